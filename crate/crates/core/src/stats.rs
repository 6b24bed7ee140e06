//! Measuring a generated example stream against its mixture.
//!
//! Reports are mergeable: every accumulator is an integer (rates and
//! expected values in 2^-64 fixed point), so merging partial reports in any
//! order gives the same bits as a single pass.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::denoiser::{DenoiserSpec, MixtureSpec, SpanLengthDist};
use crate::example::Example;
use crate::mixture::plan_denoiser;
use crate::span_corruption::{noise_count, partition_counts, reconstruct};
use crate::vocab::{ParadigmLabel, SpecialVocab};

const FP_SCALE: f64 = 18_446_744_073_709_551_616.0; // 2^64

fn to_fp(x: f64) -> u128 {
    (x * FP_SCALE).round() as u128
}

fn from_fp(x: u128, n: u64) -> f64 {
    x as f64 / FP_SCALE / n as f64
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenoiserStats {
    pub label: ParadigmLabel,
    pub name: String,
    pub count: u64,
    pub raw_tokens: u64,
    pub noise_tokens: u64,
    pub spans: u64,
    pub targets_tokens: u64,
    /// Number of spans per example -> number of examples.
    pub span_count_histogram: BTreeMap<u64, u64>,
    /// Examples whose noise-token count differs from `clamp(round(L r), 1, L-1)`.
    pub noise_count_mismatches: u64,
    rate_sum: u128,
    expected_rate_sum: u128,
    expected_noise_sum: u128,
    expected_spans_sum: u128,
}

impl DenoiserStats {
    fn new(d: &DenoiserSpec) -> Self {
        DenoiserStats {
            label: d.label,
            name: d.describe(),
            count: 0,
            raw_tokens: 0,
            noise_tokens: 0,
            spans: 0,
            targets_tokens: 0,
            span_count_histogram: BTreeMap::new(),
            noise_count_mismatches: 0,
            rate_sum: 0,
            expected_rate_sum: 0,
            expected_noise_sum: 0,
            expected_spans_sum: 0,
        }
    }

    pub fn mean_rate(&self) -> Option<f64> {
        (self.count > 0).then(|| from_fp(self.rate_sum, self.count))
    }

    pub fn expected_rate(&self) -> Option<f64> {
        (self.count > 0).then(|| from_fp(self.expected_rate_sum, self.count))
    }

    /// Mean length of a corrupted span over all spans.
    pub fn mean_span_length(&self) -> Option<f64> {
        (self.spans > 0).then(|| self.noise_tokens as f64 / self.spans as f64)
    }

    /// Pooled like `mean_span_length`: expected noise over expected spans.
    pub fn expected_span_length(&self) -> Option<f64> {
        (self.expected_spans_sum > 0).then(|| self.expected_noise_sum as f64 / self.expected_spans_sum as f64)
    }

    pub fn mean_targets_length(&self) -> Option<f64> {
        (self.count > 0).then(|| self.targets_tokens as f64 / self.count as f64)
    }

    fn merge(&mut self, other: &DenoiserStats) {
        self.count += other.count;
        self.raw_tokens += other.raw_tokens;
        self.noise_tokens += other.noise_tokens;
        self.spans += other.spans;
        self.targets_tokens += other.targets_tokens;
        for (k, v) in &other.span_count_histogram {
            *self.span_count_histogram.entry(*k).or_default() += v;
        }
        self.noise_count_mismatches += other.noise_count_mismatches;
        self.rate_sum += other.rate_sum;
        self.expected_rate_sum += other.expected_rate_sum;
        self.expected_noise_sum += other.expected_noise_sum;
        self.expected_spans_sum += other.expected_spans_sum;
    }
}

fn shares(counts: impl Iterator<Item = u64> + Clone) -> Vec<f64> {
    let n: u64 = counts.clone().sum();
    counts.map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StatsReport {
    pub denoisers: Vec<DenoiserStats>,
    pub total: u64,
    pub reconstructed: u64,
    pub malformed: u64,
    pub dropped_segments: u64,
}

impl StatsReport {
    pub fn empty(spec: &MixtureSpec) -> Self {
        StatsReport {
            denoisers: spec.denoisers.iter().map(DenoiserStats::new).collect(),
            total: 0,
            reconstructed: 0,
            malformed: 0,
            dropped_segments: 0,
        }
    }

    /// Share of well-formed examples per denoiser.
    pub fn proportions(&self) -> Vec<f64> {
        shares(self.denoisers.iter().map(|d| d.count))
    }

    /// Share of reconstructed raw tokens per denoiser. Whole records are
    /// assigned to one denoiser, so this tracks the mixture rates even when
    /// denoisers cut segments of different lengths.
    pub fn token_proportions(&self) -> Vec<f64> {
        shares(self.denoisers.iter().map(|d| d.raw_tokens))
    }

    pub fn reconstruction_pass_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.reconstructed as f64 / self.total as f64
        }
    }

    /// Fold `other` into `self`. Both must come from the same mixture.
    pub fn merge(&mut self, other: &StatsReport) {
        assert_eq!(self.denoisers.len(), other.denoisers.len(), "reports from different mixtures");
        for (a, b) in self.denoisers.iter_mut().zip(&other.denoisers) {
            a.merge(b);
        }
        self.total += other.total;
        self.reconstructed += other.reconstructed;
        self.malformed += other.malformed;
        self.dropped_segments += other.dropped_segments;
    }

    /// Add one example. Malformed examples are counted, never fatal.
    pub fn observe(&mut self, ex: &Example, vocab: &SpecialVocab, spec: &MixtureSpec) {
        self.total += 1;
        let Some(d) = spec.denoisers.get(ex.denoiser_index) else {
            self.malformed += 1;
            return;
        };
        let inputs = match ex.inputs.first() {
            Some(&t) if vocab.paradigm_label(t).is_some() => &ex.inputs[1..],
            _ => &ex.inputs[..],
        };
        let first_target_is_sentinel = ex.targets.first().is_some_and(|&t| vocab.is_sentinel(t));
        let (raw, spans, noise) = if first_target_is_sentinel {
            match reconstruct(inputs, &ex.targets, vocab) {
                Ok(raw) => {
                    let spans = ex.targets.iter().filter(|&&t| vocab.is_sentinel(t)).count();
                    (raw.len(), spans, ex.targets.len() - spans - 1)
                }
                Err(_) => {
                    self.malformed += 1;
                    return;
                }
            }
        } else if d.is_sequential() && !d.boundary_sentinel && ex.targets.last() == Some(&vocab.eos_id()) && ex.targets.len() >= 2 {
            let noise = ex.targets.len() - 1;
            (inputs.len() + noise, 1, noise)
        } else {
            self.malformed += 1;
            return;
        };
        if raw < 2 {
            self.malformed += 1;
            return;
        }
        self.reconstructed += 1;

        let s = &mut self.denoisers[ex.denoiser_index];
        s.count += 1;
        s.raw_tokens += raw as u64;
        s.noise_tokens += noise as u64;
        s.spans += spans as u64;
        s.targets_tokens += ex.targets.len() as u64;
        *s.span_count_histogram.entry(spans as u64).or_default() += 1;
        s.rate_sum += to_fp(noise as f64 / raw as f64);

        // (rate, noise tokens, spans) this example should have on average.
        let (expected_rate, expected_noise, expected_spans) = if d.is_sequential() {
            let f = d.split.expected_fraction(raw);
            (f, f * raw as f64, 1.0)
        } else {
            let mu = d.mean_span.resolve(raw);
            let want = noise_count(raw, d.rate);
            if noise != want {
                s.noise_count_mismatches += 1;
            }
            let k = match d.span_dist {
                SpanLengthDist::Partition => partition_counts(raw, d.rate, mu, d.span_count).1 as f64,
                SpanLengthDist::Normal | SpanLengthDist::Uniform => want as f64 / mu,
            };
            (want as f64 / raw as f64, want as f64, k)
        };
        s.expected_rate_sum += to_fp(expected_rate);
        s.expected_noise_sum += to_fp(expected_noise);
        s.expected_spans_sum += to_fp(expected_spans);
    }
}

/// Measure a stream of examples against its mixture.
pub fn measure<'a, I>(examples: I, vocab: &SpecialVocab, spec: &MixtureSpec) -> StatsReport
where
    I: IntoIterator<Item = &'a Example>,
{
    let mut report = StatsReport::empty(spec);
    for ex in examples {
        report.observe(ex, vocab, spec);
    }
    report
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tolerances {
    /// Absolute tolerance on mean corruption rate.
    pub rate_abs: f64,
    /// Relative tolerance on mean span length.
    pub span_rel: f64,
    /// Absolute tolerance on mixture proportions.
    pub proportion_abs: f64,
    /// Minimum fraction of examples that must reconstruct.
    pub min_reconstruction: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { rate_abs: 0.01, span_rel: 0.10, proportion_abs: 0.02, min_reconstruction: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    /// Nothing to measure (empty bucket).
    Absent,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Finding {
    pub subject: String,
    pub metric: &'static str,
    pub expected: Option<f64>,
    pub observed: Option<f64>,
    pub tolerance: f64,
    pub status: Status,
}

impl Finding {
    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

fn check(subject: String, metric: &'static str, expected: Option<f64>, observed: Option<f64>, tolerance: f64, within: impl Fn(f64, f64) -> bool) -> Finding {
    let status = match (expected, observed) {
        (Some(e), Some(o)) if within(e, o) => Status::Pass,
        (Some(_), Some(_)) => Status::Fail,
        _ => Status::Absent,
    };
    Finding { subject, metric, expected, observed, tolerance, status }
}

/// One finding per (denoiser x metric), one per proportion, and one for
/// reconstruction.
pub fn verify(report: &StatsReport, spec: &MixtureSpec, tol: &Tolerances) -> Vec<Finding> {
    let mut findings = Vec::new();
    let rates = spec.normalized_rates();
    let props = report.token_proportions();
    for (i, (s, d)) in report.denoisers.iter().zip(&spec.denoisers).enumerate() {
        let subject = format!("denoiser[{i}] {}", s.name);
        findings.push(check(subject.clone(), "mean_rate", s.expected_rate(), s.mean_rate(), tol.rate_abs, |e, o| (e - o).abs() <= tol.rate_abs));
        findings.push(check(subject.clone(), "mean_span_length", s.expected_span_length(), s.mean_span_length(), tol.span_rel, |e, o| {
            (e - o).abs() <= tol.span_rel * e
        }));
        if !d.is_sequential() {
            findings.push(check(
                subject.clone(),
                "noise_count_mismatches",
                (s.count > 0).then_some(0.0),
                (s.count > 0).then_some(s.noise_count_mismatches as f64),
                0.0,
                |e, o| e == o,
            ));
        }
        if let Err(e) = plan_denoiser(d, spec.inputs_budget, spec.targets_budget) {
            findings.push(Finding { subject: format!("{subject}: {e}"), metric: "plan", expected: None, observed: None, tolerance: 0.0, status: Status::Fail });
        }
        findings.push(check(subject, "proportion", Some(rates[i]), (report.total > 0).then_some(props[i]), tol.proportion_abs, |e, o| {
            (e - o).abs() <= tol.proportion_abs
        }));
    }
    findings.push(check(
        "stream".into(),
        "reconstruction_pass_fraction",
        Some(tol.min_reconstruction),
        (report.total > 0).then(|| report.reconstruction_pass_fraction()),
        tol.min_reconstruction,
        |e, o| o >= e,
    ));
    findings
}

/// JSON view of a report; see the README for the schema.
#[derive(Serialize)]
pub struct ReportDocument<'a> {
    pub total: u64,
    pub reconstructed: u64,
    pub malformed: u64,
    pub dropped_segments: u64,
    pub reconstruction_pass_fraction: f64,
    pub proportions: Vec<f64>,
    pub token_proportions: Vec<f64>,
    pub denoisers: Vec<DenoiserDocument<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub findings: Option<&'a [Finding]>,
}

#[derive(Serialize)]
pub struct DenoiserDocument<'a> {
    pub index: usize,
    pub label: String,
    pub name: &'a str,
    pub count: u64,
    pub mean_rate: Option<f64>,
    pub expected_rate: Option<f64>,
    pub mean_span_length: Option<f64>,
    pub expected_span_length: Option<f64>,
    pub mean_targets_length: Option<f64>,
    pub noise_count_mismatches: u64,
    pub span_count_histogram: &'a BTreeMap<u64, u64>,
}

impl StatsReport {
    pub fn document<'a>(&'a self, findings: Option<&'a [Finding]>) -> ReportDocument<'a> {
        ReportDocument {
            total: self.total,
            reconstructed: self.reconstructed,
            malformed: self.malformed,
            dropped_segments: self.dropped_segments,
            reconstruction_pass_fraction: self.reconstruction_pass_fraction(),
            proportions: self.proportions(),
            token_proportions: self.token_proportions(),
            denoisers: self
                .denoisers
                .iter()
                .enumerate()
                .map(|(index, d)| DenoiserDocument {
                    index,
                    label: d.label.to_string(),
                    name: &d.name,
                    count: d.count,
                    mean_rate: d.mean_rate(),
                    expected_rate: d.expected_rate(),
                    mean_span_length: d.mean_span_length(),
                    expected_span_length: d.expected_span_length(),
                    mean_targets_length: d.mean_targets_length(),
                    noise_count_mismatches: d.noise_count_mismatches,
                    span_count_histogram: &d.span_count_histogram,
                })
                .collect(),
            findings,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example::Provenance;
    use crate::format::CorpusRecord;
    use crate::mixture::assemble;
    use crate::preset::preset;
    use crate::vocab::{allocate_special_vocab, tokens, TokenId};

    fn vocab() -> SpecialVocab {
        allocate_special_vocab(100, 100, &ParadigmLabel::ALL).unwrap()
    }

    fn ex(inputs: &[u32], targets: &[u32], d: usize) -> Example {
        Example { inputs: tokens(inputs), targets: tokens(targets), denoiser_index: d, provenance: Provenance::default() }
    }

    #[test]
    fn single_example_rate() {
        let spec = preset("t5-sc", 512, 512).unwrap();
        let r = measure(&[ex(&[10, 11, 100, 14, 15, 1], &[100, 12, 13, 1], 0)], &vocab(), &spec);
        assert_eq!(r.denoisers[0].mean_rate().unwrap(), 2.0 / 6.0);
        assert_eq!(r.denoisers[0].mean_span_length(), Some(2.0));
        assert_eq!(r.reconstructed, 1);
    }

    #[test]
    fn empty_bucket_is_absent() {
        let spec = preset("sclm", 512, 1024).unwrap();
        let r = measure(&[ex(&[10, 11, 100, 14, 15, 1], &[100, 12, 13, 1], 1)], &vocab(), &spec);
        assert_eq!(r.denoisers[0].count, 0);
        assert_eq!(r.denoisers[0].mean_rate(), None);
        let f = verify(&r, &spec, &Tolerances::default());
        assert!(f.iter().any(|f| f.subject.starts_with("denoiser[0]") && f.metric == "mean_rate" && f.status == Status::Absent));
    }

    #[test]
    fn malformed_counted_not_fatal() {
        let spec = preset("t5-sc", 512, 512).unwrap();
        let r = measure(
            &[ex(&[10, 100, 1], &[101, 5, 1], 0), ex(&[10, 100, 1], &[100, 5, 1], 7), ex(&[10, 100, 1], &[100, 5, 1], 0)],
            &vocab(),
            &spec,
        );
        assert_eq!((r.total, r.malformed, r.reconstructed), (3, 2, 1));
    }

    #[test]
    fn verify_definitions() {
        let spec = preset("sclm", 512, 1024).unwrap();
        let mut r = StatsReport::empty(&spec);
        r.total = 1000;
        r.reconstructed = 999;
        r.denoisers[0].raw_tokens = 550;
        r.denoisers[1].raw_tokens = 450;
        let f = verify(&r, &spec, &Tolerances::default());
        let prop: Vec<_> = f.iter().filter(|f| f.metric == "proportion").collect();
        assert!(prop.iter().all(|f| f.status == Status::Fail));
        let rec = f.iter().find(|f| f.metric == "reconstruction_pass_fraction").unwrap();
        assert_eq!(rec.status, Status::Fail);

        r.reconstructed = 1000;
        r.denoisers[0].raw_tokens = 510;
        r.denoisers[1].raw_tokens = 490;
        let f = verify(&r, &spec, &Tolerances::default());
        assert!(f.iter().filter(|f| f.metric == "proportion" || f.metric == "reconstruction_pass_fraction").all(|f| f.passed()));
    }

    #[test]
    fn proportion_is_token_share() {
        // Two examples of 100 raw tokens against four of 50: equal token
        // shares, unequal example shares.
        let spec = preset("sclm", 512, 1024).unwrap();
        let mut r = StatsReport::empty(&spec);
        r.total = 6;
        r.reconstructed = 6;
        r.denoisers[0].count = 2;
        r.denoisers[0].raw_tokens = 200;
        r.denoisers[1].count = 4;
        r.denoisers[1].raw_tokens = 200;
        assert_eq!(r.token_proportions(), vec![0.5, 0.5]);
        assert_eq!(r.proportions()[0], 2.0 / 6.0);
        let f = verify(&r, &spec, &Tolerances::default());
        assert!(f.iter().filter(|f| f.metric == "proportion").all(|f| f.passed()));
    }

    #[test]
    fn merging_matches_single_pass() {
        let v = vocab();
        let spec = preset("ul2", 64, 128).unwrap();
        let corpus: Vec<CorpusRecord> = (0..200)
            .map(|i| CorpusRecord { id: i, tokens: (0..(30 + i as u32 % 50)).map(|j| TokenId(3 + (j * 13 + i as u32) % 90)).collect() })
            .collect();
        let (examples, _) = assemble(&spec, &v, corpus).unwrap();
        let whole = measure(&examples, &v, &spec);
        for split in [1, 17, examples.len() / 2] {
            let (a, b) = examples.split_at(split);
            let mut ab = measure(a, &v, &spec);
            ab.merge(&measure(b, &v, &spec));
            let mut ba = measure(b, &v, &spec);
            ba.merge(&measure(a, &v, &spec));
            assert_eq!(ab, whole);
            assert_eq!(ba, whole);
        }
        let p: f64 = whole.proportions().iter().sum();
        assert!((p - 1.0).abs() < 1e-9);
        assert!(whole.denoisers.iter().all(|d| d.noise_count_mismatches == 0));
    }
}
