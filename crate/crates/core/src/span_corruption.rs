//! Span corruption for R- and X-denoisers: segment length planning, noise
//! masks, sentinel substitution and its exact inverse.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::denoiser::{SpanCount, SpanLengthDist};
use crate::error::{MaskError, ReconstructError, SegmentError, Side};
use crate::example::ExampleBody;
use crate::rng::RngStream;
use crate::vocab::{SpecialVocab, TokenId, TokenKind, TokenSequence};

/// Round half away from zero.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Lengths of one corrupted segment before and after corruption.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentBudget {
    pub raw_tokens_length: usize,
    pub inputs_length: usize,
    pub targets_length: usize,
}

fn span_count_for(num_noise: usize, mean_span: f64, span_count: SpanCount) -> usize {
    match span_count {
        SpanCount::Derived => (round_half_away(num_noise as f64 / mean_span) as usize).max(1),
        SpanCount::Fixed(n) => (n as usize).max(1),
    }
}

/// Pre-clamp lengths of a raw segment of `raw` tokens:
/// `(inputs_length, targets_length)`.
fn corrupted_lengths(raw: usize, rate: f64, mean_span: f64, span_count: SpanCount, extra_in: usize, extra_tgt: usize) -> (usize, usize) {
    let noise = round_half_away(raw as f64 * rate) as usize;
    let spans = span_count_for(noise, mean_span, span_count);
    let inputs = (raw - noise.min(raw)) + spans * extra_in + 1;
    let targets = noise + spans * extra_tgt + 1;
    (inputs, targets)
}

/// Largest raw segment length whose corrupted inputs fit `inputs_budget`,
/// with one sentinel per span on each side and one eos.
pub fn compute_segment_lengths(inputs_budget: usize, rate: f64, mean_span: f64) -> Result<SegmentBudget, SegmentError> {
    plan_segment(inputs_budget, rate, mean_span, SpanCount::Derived, 1, 1)
}

/// General form of [`compute_segment_lengths`] with configurable span count
/// and per-span overheads.
pub fn plan_segment(
    inputs_budget: usize,
    rate: f64,
    mean_span: f64,
    span_count: SpanCount,
    extra_in: usize,
    extra_tgt: usize,
) -> Result<SegmentBudget, SegmentError> {
    if inputs_budget < 2 {
        return Err(SegmentError::InvalidParameter { field: "inputs_budget", reason: format!("{inputs_budget} < 2") });
    }
    if !(rate > 0.0 && rate < 1.0) {
        return Err(SegmentError::InvalidParameter { field: "rate", reason: format!("{rate} not in (0, 1)") });
    }
    if !(mean_span.is_finite() && mean_span >= 1.0) {
        return Err(SegmentError::InvalidParameter { field: "mean_span", reason: format!("{mean_span} < 1") });
    }
    // inputs(T) >= T - round(T r) + 1 >= T (1 - r) + 1/2, so no feasible T
    // exceeds (budget - 1/2) / (1 - r). Walk down from just above that.
    let bound = ((inputs_budget as f64 + 1.0) / (1.0 - rate)).ceil() as usize + 2;
    for raw in (2..=bound).rev() {
        let (inputs, targets) = corrupted_lengths(raw, rate, mean_span, span_count, extra_in, extra_tgt);
        if inputs <= inputs_budget {
            return Ok(SegmentBudget { raw_tokens_length: raw, inputs_length: inputs, targets_length: targets });
        }
    }
    Err(SegmentError::BudgetTooSmall { budget: inputs_budget, rate, mean_span })
}

/// Span count the planner assumes for a raw segment of `raw` tokens. The
/// partition sampler never produces more.
pub fn planned_spans(raw: usize, rate: f64, mean_span: f64, span_count: SpanCount) -> usize {
    span_count_for(round_half_away(raw as f64 * rate) as usize, mean_span, span_count)
}

/// Worst-case `(inputs, targets, runs)` for the placed (normal, uniform)
/// strategies: placed spans may split into one run per noise token, bounded
/// by the clean tokens that must separate runs.
pub fn placed_worst_case(raw: usize, rate: f64) -> (usize, usize, usize) {
    let noise = noise_count(raw, rate);
    let runs = noise.min(raw - noise + 1);
    (raw - noise + runs + 1, noise + runs + 1, runs)
}

/// Boolean corruption mask; `true` marks a token inside a corrupted span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoiseMask {
    flags: Vec<bool>,
}

impl NoiseMask {
    pub fn from_flags(flags: Vec<bool>) -> Self {
        NoiseMask { flags }
    }

    /// Mask with the given positions set.
    pub fn from_positions(len: usize, positions: &[usize]) -> Self {
        let mut flags = vec![false; len];
        for &p in positions {
            flags[p] = true;
        }
        NoiseMask { flags }
    }

    pub fn all_noise(len: usize) -> Self {
        NoiseMask { flags: vec![true; len] }
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn num_noise(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Maximal runs of noise, as half-open ranges.
    pub fn runs(&self) -> Vec<std::ops::Range<usize>> {
        let mut runs = Vec::new();
        let mut start = None;
        for (i, &f) in self.flags.iter().enumerate() {
            match (f, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push(s..i);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push(s..self.flags.len());
        }
        runs
    }
}

/// Noise-token and span counts used by the partition strategy:
/// `num_noise = clamp(round(L r), 1, L-1)` and
/// `num_spans = max(1, round(num_noise / mu))`, the latter capped so both
/// noise and non-noise tokens can form that many nonempty runs.
pub fn partition_counts(len: usize, rate: f64, mean_span: f64, span_count: SpanCount) -> (usize, usize) {
    let num_noise = noise_count(len, rate);
    let spans = span_count_for(num_noise, mean_span, span_count);
    (num_noise, spans.min(num_noise).min(len - num_noise))
}

/// `clamp(round(L r), 1, L-1)`.
pub fn noise_count(len: usize, rate: f64) -> usize {
    (round_half_away(len as f64 * rate) as usize).clamp(1, len - 1)
}

/// Split `n` items into `k` nonempty segments, uniformly over compositions.
fn random_segmentation(n: usize, k: usize, rng: &mut RngStream) -> Vec<usize> {
    debug_assert!(k >= 1 && k <= n);
    let mut cuts: Vec<usize> = index::sample(rng, n - 1, k - 1).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    let mut lengths = Vec::with_capacity(k);
    let mut prev = 0;
    for c in cuts {
        lengths.push(c - prev);
        prev = c;
    }
    lengths.push(n - prev);
    lengths
}

/// Sample a noise mask over `len` tokens.
///
/// `span_count` only affects the partition strategy; the normal and uniform
/// strategies keep drawing spans until the noise budget is spent.
pub fn sample_noise_mask(
    len: usize,
    rate: f64,
    mean_span: f64,
    dist: SpanLengthDist,
    span_count: SpanCount,
    rng: &mut RngStream,
) -> Result<NoiseMask, MaskError> {
    if len < 2 {
        return Err(MaskError::TooShort(len));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(MaskError::InvalidParameter { field: "rate", reason: format!("{rate} not in (0, 1]") });
    }
    if !(mean_span.is_finite() && mean_span >= 1.0) {
        return Err(MaskError::InvalidParameter { field: "mean_span", reason: format!("{mean_span} < 1") });
    }
    match dist {
        SpanLengthDist::Partition => Ok(partition_mask(len, rate, mean_span, span_count, rng)),
        SpanLengthDist::Normal => {
            let normal = Normal::new(mean_span, mean_span / 4.0).expect("finite positive stddev");
            Ok(placed_mask(len, rate, rng, |rng| round_half_away(normal.sample(rng)).max(1.0) as usize))
        }
        SpanLengthDist::Uniform => {
            let hi = (round_half_away(2.0 * mean_span - 1.0) as usize).max(1);
            Ok(placed_mask(len, rate, rng, |rng| rng.random_range(1..=hi)))
        }
    }
}

fn partition_mask(len: usize, rate: f64, mean_span: f64, span_count: SpanCount, rng: &mut RngStream) -> NoiseMask {
    let (num_noise, num_spans) = partition_counts(len, rate, mean_span, span_count);
    let noise_lengths = random_segmentation(num_noise, num_spans, rng);
    let clean_lengths = random_segmentation(len - num_noise, num_spans, rng);
    let mut flags = Vec::with_capacity(len);
    for (clean, noise) in clean_lengths.into_iter().zip(noise_lengths) {
        flags.extend(std::iter::repeat_n(false, clean));
        flags.extend(std::iter::repeat_n(true, noise));
    }
    NoiseMask { flags }
}

/// Place spans of drawn lengths at uniformly random free positions until
/// the noise budget is consumed.
fn placed_mask(len: usize, rate: f64, rng: &mut RngStream, mut draw: impl FnMut(&mut RngStream) -> usize) -> NoiseMask {
    let mut flags = vec![false; len];
    let mut remaining = noise_count(len, rate);
    while remaining > 0 {
        let gaps = free_gaps(&flags);
        let widest = gaps.iter().map(|g| g.len()).max().unwrap_or(0);
        let span = draw(rng).clamp(1, remaining).min(widest);
        // every gap of width w >= span offers w - span + 1 starts
        let total: usize = gaps.iter().filter(|g| g.len() >= span).map(|g| g.len() - span + 1).sum();
        let mut pick = rng.random_range(0..total);
        for g in gaps.iter().filter(|g| g.len() >= span) {
            let starts = g.len() - span + 1;
            if pick < starts {
                let s = g.start + pick;
                flags[s..s + span].iter_mut().for_each(|f| *f = true);
                break;
            }
            pick -= starts;
        }
        remaining -= span;
    }
    NoiseMask { flags }
}

fn free_gaps(flags: &[bool]) -> Vec<std::ops::Range<usize>> {
    let inverted = NoiseMask { flags: flags.iter().map(|f| !f).collect() };
    inverted.runs()
}

/// Replace each maximal noise run with the next sentinel; the removed runs,
/// each led by its sentinel, become the targets. Both sides end with eos.
pub fn apply_sentinels(tokens: &[TokenId], mask: &NoiseMask, vocab: &SpecialVocab) -> Result<ExampleBody, MaskError> {
    if mask.len() != tokens.len() {
        return Err(MaskError::LengthMismatch { mask: mask.len(), tokens: tokens.len() });
    }
    let runs = mask.runs();
    if runs.len() > vocab.num_sentinels() as usize {
        vocab.sentinel(runs.len() as u32 - 1)?;
    }
    let mut inputs = Vec::with_capacity(tokens.len() - mask.num_noise() + runs.len() + 1);
    let mut targets = Vec::with_capacity(mask.num_noise() + runs.len() + 1);
    let mut cursor = 0;
    for (i, run) in runs.iter().enumerate() {
        let sentinel = vocab.sentinel(i as u32)?;
        inputs.extend_from_slice(&tokens[cursor..run.start]);
        inputs.push(sentinel);
        targets.push(sentinel);
        targets.extend_from_slice(&tokens[run.clone()]);
        cursor = run.end;
    }
    inputs.extend_from_slice(&tokens[cursor..]);
    inputs.push(vocab.eos_id());
    targets.push(vocab.eos_id());
    Ok(ExampleBody { inputs, targets })
}

/// Exact inverse of [`apply_sentinels`] (and of the sentinel form of the
/// prefix split). A single leading paradigm id on the inputs is skipped.
pub fn reconstruct(inputs: &[TokenId], targets: &[TokenId], vocab: &SpecialVocab) -> Result<TokenSequence, ReconstructError> {
    let fail = |side, position, reason: &str| ReconstructError { side, position, reason: reason.to_string() };

    let start = match inputs.first() {
        Some(&t) if vocab.paradigm_label(t).is_some() => 1,
        _ => 0,
    };
    let mut end = inputs.len();
    if end > start && inputs[end - 1] == vocab.eos_id() {
        end -= 1;
    }

    // targets: (sentinel_i, tokens+)* eos
    match targets.last() {
        Some(&t) if t == vocab.eos_id() => {}
        _ => return Err(fail(Side::Targets, targets.len().saturating_sub(1), "targets must end with eos")),
    }
    let body = &targets[..targets.len() - 1];
    let mut spans: Vec<&[TokenId]> = Vec::new();
    let mut span_start = None;
    for (pos, &t) in body.iter().enumerate() {
        match vocab.kind(t) {
            TokenKind::Sentinel(i) => {
                if i as usize != spans.len() + usize::from(span_start.is_some()) {
                    return Err(fail(Side::Targets, pos, &format!("expected sentinel {} but found sentinel {i}", spans.len() + usize::from(span_start.is_some()))));
                }
                if let Some(s) = span_start {
                    if s == pos {
                        return Err(fail(Side::Targets, pos, "empty span"));
                    }
                    spans.push(&body[s..pos]);
                }
                span_start = Some(pos + 1);
            }
            TokenKind::Paradigm(_) | TokenKind::OutOfRange => {
                return Err(fail(Side::Targets, pos, "unexpected special id"));
            }
            TokenKind::Base | TokenKind::Eos => {
                if span_start.is_none() {
                    return Err(fail(Side::Targets, pos, "targets must start with a sentinel"));
                }
            }
        }
    }
    match span_start {
        Some(s) if s == body.len() => return Err(fail(Side::Targets, s, "empty span")),
        Some(s) => spans.push(&body[s..]),
        None => return Err(fail(Side::Targets, 0, "targets hold no sentinel")),
    }

    let mut out = Vec::with_capacity(end - start + body.len());
    let mut used = 0usize;
    for (pos, &t) in inputs[start..end].iter().enumerate() {
        match vocab.kind(t) {
            TokenKind::Sentinel(i) => {
                if i as usize != used {
                    return Err(fail(Side::Inputs, start + pos, &format!("expected sentinel {used} but found sentinel {i}")));
                }
                let span = spans
                    .get(used)
                    .ok_or_else(|| fail(Side::Inputs, start + pos, &format!("sentinel {i} has no span in targets")))?;
                out.extend_from_slice(span);
                used += 1;
            }
            TokenKind::Paradigm(_) | TokenKind::OutOfRange => {
                return Err(fail(Side::Inputs, start + pos, "unexpected special id"));
            }
            TokenKind::Base | TokenKind::Eos => out.push(t),
        }
    }
    if used != spans.len() {
        return Err(fail(Side::Targets, 0, &format!("targets carry {} spans but inputs reference {used}", spans.len())));
    }
    Ok(out)
}
