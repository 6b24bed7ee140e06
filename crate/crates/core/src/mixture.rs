//! Mixture-of-denoisers assembly.
//!
//! Per corpus record `i`:
//!
//! 1. pick a denoiser, either `i mod k` (shard) or a categorical draw from
//!    the stream `[record:i, op:assign]` (sample);
//! 2. keep one random chunk of at most `max_chunk_len` tokens;
//! 3. queue the chunk on its denoiser. With merging, every `merge_batch`
//!    queued chunks are concatenated into one batch; without it each chunk
//!    is its own batch;
//! 4. cut each batch into segments of the denoiser's raw length, corrupt
//!    each segment with the stream `[denoiser:d, batch:b, segment:t]`, and
//!    optionally prepend the paradigm token.
//!
//! Batches are emitted when full (or at end of input, in denoiser order),
//! so output order depends only on the corpus and the spec. Corruption of
//! emitted batches runs on a worker pool without affecting that order.

use std::ops::ControlFlow;

use rand::Rng;
use rayon::prelude::*;

use crate::denoiser::{AssignmentMode, DenoiserSpec, MixtureSpec, SpanLengthDist};
use crate::error::{AssembleError, SegmentError};
use crate::example::{Example, ExampleBody, Provenance};
use crate::format::CorpusRecord;
use crate::rng::{PathLabel, RngStream};
use crate::s_denoiser::{make_prefix_example, sample_target_length};
use crate::span_corruption::{apply_sentinels, placed_worst_case, plan_segment, planned_spans, sample_noise_mask, SegmentBudget};
use crate::vocab::{SpecialVocab, TokenId, TokenSequence};

/// Pick a contiguous chunk of at most `max_len` tokens with a uniformly
/// random start. Returns the chunk's offset and tokens.
pub fn select_chunk<'a>(seq: &'a [TokenId], max_len: usize, rng: &mut RngStream) -> (usize, &'a [TokenId]) {
    if seq.len() <= max_len {
        return (0, seq);
    }
    let start = rng.random_range(0..=seq.len() - max_len);
    (start, &seq[start..start + max_len])
}

/// Concatenate up to `batch` consecutive sequences (when `merge`) and cut
/// the result into consecutive segments of `raw_len`; a shorter final
/// remainder is kept. Without merging each sequence is split on its own.
pub fn merge_and_split(seqs: &[TokenSequence], raw_len: usize, merge: bool, batch: usize) -> Vec<TokenSequence> {
    assert!(raw_len >= 1 && batch >= 1);
    let mut out = Vec::new();
    let mut cut = |tokens: &[TokenId]| out.extend(tokens.chunks(raw_len).map(|c| c.to_vec()));
    if merge {
        for group in seqs.chunks(batch) {
            cut(&group.concat());
        }
    } else {
        for s in seqs {
            cut(s);
        }
    }
    out
}

/// The mixture's denoiser for record `index`.
pub fn assign_denoiser(spec: &MixtureSpec, rates: &[f64], index: u64, root: &RngStream) -> usize {
    let k = spec.denoisers.len();
    match spec.assignment {
        AssignmentMode::Shard => (index % k as u64) as usize,
        AssignmentMode::Sample => {
            let mut rng = root.derive_all(&[PathLabel::Record(index), PathLabel::Op("assign")]);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, r) in rates.iter().enumerate() {
                acc += r;
                if u < acc {
                    return i;
                }
            }
            k - 1
        }
    }
}

/// Prefix the inputs with the paradigm id of the example's denoiser.
/// The paradigm token does not count against the inputs budget.
pub fn prepend_mode_token(mut ex: Example, spec: &MixtureSpec, vocab: &SpecialVocab) -> Example {
    if !spec.prepend_paradigm {
        return ex;
    }
    let label = spec.denoisers[ex.denoiser_index].paradigm;
    if let Some(id) = vocab.paradigm_id(label) {
        ex.inputs.insert(0, id);
    }
    ex
}

/// Segment plan for one denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserPlan {
    pub raw_len: usize,
    pub max_inputs: usize,
    pub max_targets: usize,
    /// Most sentinels one example can use.
    pub max_spans: usize,
}

/// Raw segment length and worst-case lengths for `d` under the budgets.
pub fn plan_denoiser(d: &DenoiserSpec, inputs_budget: usize, targets_budget: usize) -> Result<DenoiserPlan, SegmentError> {
    if d.is_sequential() {
        let extra = usize::from(d.boundary_sentinel);
        // inputs: (L - u) + extra <= L - 1 + extra; targets: u + extra + 1
        let raw = (2..=inputs_budget + 1 - extra)
            .rev()
            .find(|&len| d.split.max_target(len) + extra < targets_budget)
            .ok_or(SegmentError::BudgetTooSmall { budget: targets_budget, rate: d.rate, mean_span: f64::NAN })?;
        return Ok(DenoiserPlan {
            raw_len: raw,
            max_inputs: raw - 1 + extra,
            max_targets: d.split.max_target(raw) + extra + 1,
            max_spans: extra,
        });
    }
    let mu = d.mean_span.resolve(inputs_budget);
    match d.span_dist {
        SpanLengthDist::Partition => {
            let SegmentBudget { raw_tokens_length, inputs_length, targets_length } =
                plan_segment(inputs_budget, d.rate, mu, d.span_count, 1, 1)?;
            Ok(DenoiserPlan {
                raw_len: raw_tokens_length,
                max_inputs: inputs_length,
                max_targets: targets_length,
                max_spans: planned_spans(raw_tokens_length, d.rate, mu, d.span_count),
            })
        }
        SpanLengthDist::Normal | SpanLengthDist::Uniform => {
            // Worst-case inputs are nondecreasing in the raw length and at
            // least raw (1 - r) + 1, so scan down from that bound.
            let bound = ((inputs_budget as f64 + 1.0) / (1.0 - d.rate)).ceil() as usize + 2;
            let raw = (2..=bound)
                .rev()
                .find(|&t| placed_worst_case(t, d.rate).0 <= inputs_budget)
                .ok_or(SegmentError::BudgetTooSmall { budget: inputs_budget, rate: d.rate, mean_span: mu })?;
            let (max_inputs, max_targets, max_spans) = placed_worst_case(raw, d.rate);
            Ok(DenoiserPlan { raw_len: raw, max_inputs, max_targets, max_spans })
        }
    }
}

/// Corrupt one raw segment with denoiser `d`.
pub fn corrupt_segment(
    tokens: &[TokenId],
    d: &DenoiserSpec,
    vocab: &SpecialVocab,
    rng: &mut RngStream,
) -> Result<ExampleBody, String> {
    if d.is_sequential() {
        let u = sample_target_length(tokens.len(), d.split, rng).map_err(|e| e.to_string())?;
        make_prefix_example(tokens, u, vocab, d.boundary_sentinel).map_err(|e| e.to_string())
    } else {
        let mu = d.mean_span.resolve(tokens.len());
        let mask = sample_noise_mask(tokens.len(), d.rate, mu, d.span_dist, d.span_count, rng).map_err(|e| e.to_string())?;
        apply_sentinels(tokens, &mask, vocab).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug)]
struct Chunk {
    record_id: u64,
    offset: u64,
    tokens: TokenSequence,
}

/// Chunks queued for one denoiser that are corrupted together.
#[derive(Clone, Debug)]
pub struct Batch {
    denoiser: usize,
    index: u64,
    chunks: Vec<Chunk>,
}

/// Totals reported after a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AssemblySummary {
    pub records: u64,
    pub examples: u64,
    /// Segments shorter than two tokens, which cannot be corrupted.
    pub dropped_segments: u64,
    pub stopped_early: bool,
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    spec: MixtureSpec,
    vocab: SpecialVocab,
    plans: Vec<DenoiserPlan>,
    root: RngStream,
    workers: usize,
}

impl Pipeline {
    /// Validate the spec and plan every denoiser against the budgets.
    pub fn new(spec: &MixtureSpec, vocab: &SpecialVocab) -> Result<Self, AssembleError> {
        let spec = spec.validate()?;
        let mut plans = Vec::with_capacity(spec.denoisers.len());
        for (index, d) in spec.denoisers.iter().enumerate() {
            let plan = plan_denoiser(d, spec.inputs_budget, spec.targets_budget)
                .map_err(|source| AssembleError::Segment { index, source })?;
            if plan.max_targets > spec.targets_budget {
                return Err(AssembleError::TargetsBudget {
                    index,
                    expected: plan.max_targets,
                    configured: spec.targets_budget,
                });
            }
            if plan.max_spans > vocab.num_sentinels() as usize {
                return Err(AssembleError::Sentinels { index, needed: plan.max_spans, available: vocab.num_sentinels() });
            }
            plans.push(plan);
        }
        let root = RngStream::new(spec.seed);
        Ok(Pipeline { spec, vocab: vocab.clone(), plans, root, workers: 1 })
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    pub fn plans(&self) -> &[DenoiserPlan] {
        &self.plans
    }

    /// Run the corpus through the mixture, handing examples to `sink` in
    /// deterministic order. The sink may stop the run early.
    pub fn run<I, F>(&self, corpus: I, mut sink: F) -> Result<AssemblySummary, AssembleError>
    where
        I: IntoIterator<Item = CorpusRecord>,
        F: FnMut(Example) -> ControlFlow<()>,
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .expect("thread pool");
        let window = self.workers * 4;
        let k = self.spec.denoisers.len();
        let rates = self.spec.normalized_rates();
        let mut pending: Vec<Vec<Chunk>> = vec![Vec::new(); k];
        let mut batch_counts = vec![0u64; k];
        let mut ready: Vec<Batch> = Vec::new();
        let mut summary = AssemblySummary::default();

        let mut flush = |ready: &mut Vec<Batch>, summary: &mut AssemblySummary| -> Result<ControlFlow<()>, AssembleError> {
            let results: Vec<Result<(Vec<Example>, u64), AssembleError>> =
                pool.install(|| ready.par_iter().map(|b| self.process_batch(b)).collect());
            ready.clear();
            for r in results {
                let (examples, dropped) = r?;
                summary.dropped_segments += dropped;
                for ex in examples {
                    summary.examples += 1;
                    if sink(ex).is_break() {
                        summary.stopped_early = true;
                        return Ok(ControlFlow::Break(()));
                    }
                }
            }
            Ok(ControlFlow::Continue(()))
        };

        for (index, record) in corpus.into_iter().enumerate() {
            let index = index as u64;
            summary.records += 1;
            let d = assign_denoiser(&self.spec, &rates, index, &self.root);
            if !record.tokens.is_empty() {
                let mut rng = self.root.derive_all(&[PathLabel::Record(index), PathLabel::Op("chunk")]);
                let (offset, tokens) = select_chunk(&record.tokens, self.spec.max_chunk_len, &mut rng);
                pending[d].push(Chunk { record_id: record.id, offset: offset as u64, tokens: tokens.to_vec() });
            }
            let full = if self.spec.merge_examples { pending[d].len() >= self.spec.merge_batch } else { !pending[d].is_empty() };
            if full {
                ready.push(Batch { denoiser: d, index: batch_counts[d], chunks: std::mem::take(&mut pending[d]) });
                batch_counts[d] += 1;
            }
            if ready.len() >= window && flush(&mut ready, &mut summary)?.is_break() {
                return Ok(summary);
            }
        }
        for (d, chunks) in pending.into_iter().enumerate() {
            if !chunks.is_empty() {
                ready.push(Batch { denoiser: d, index: batch_counts[d], chunks });
                batch_counts[d] += 1;
            }
        }
        let _ = flush(&mut ready, &mut summary)?;
        Ok(summary)
    }

    /// Run to completion and collect every example.
    pub fn collect<I>(&self, corpus: I) -> Result<(Vec<Example>, AssemblySummary), AssembleError>
    where
        I: IntoIterator<Item = CorpusRecord>,
    {
        let mut out = Vec::new();
        let summary = self.run(corpus, |ex| {
            out.push(ex);
            ControlFlow::Continue(())
        })?;
        Ok((out, summary))
    }

    fn process_batch(&self, batch: &Batch) -> Result<(Vec<Example>, u64), AssembleError> {
        let d = &self.spec.denoisers[batch.denoiser];
        let plan = self.plans[batch.denoiser];
        let mut tokens = Vec::new();
        // (start position in `tokens`, chunk index)
        let mut starts = Vec::with_capacity(batch.chunks.len());
        for (i, c) in batch.chunks.iter().enumerate() {
            starts.push((tokens.len(), i));
            tokens.extend_from_slice(&c.tokens);
        }
        let batch_rng = self.root.derive_all(&[PathLabel::Denoiser(batch.denoiser as u64), PathLabel::Batch(batch.index)]);
        let mut examples = Vec::new();
        let mut dropped = 0;
        for (t, segment) in tokens.chunks(plan.raw_len).enumerate() {
            let begin = t * plan.raw_len;
            let at = starts.partition_point(|&(s, _)| s <= begin) - 1;
            let (chunk_start, ci) = starts[at];
            let chunk = &batch.chunks[ci];
            if segment.len() < 2 {
                dropped += 1;
                continue;
            }
            let mut rng = batch_rng.derive(PathLabel::Segment(t as u64));
            let provenance = Provenance {
                record_id: chunk.record_id,
                offset: chunk.offset + (begin - chunk_start) as u64,
                stream: rng.key64(),
            };
            let body = corrupt_segment(segment, d, &self.vocab, &mut rng)
                .map_err(|reason| AssembleError::Record { record_id: chunk.record_id, reason })?;
            if body.inputs.len() > self.spec.inputs_budget || body.targets.len() > self.spec.targets_budget {
                return Err(AssembleError::Record {
                    record_id: chunk.record_id,
                    reason: format!(
                        "example lengths ({}, {}) exceed budgets ({}, {})",
                        body.inputs.len(),
                        body.targets.len(),
                        self.spec.inputs_budget,
                        self.spec.targets_budget
                    ),
                });
            }
            let ex = Example::from_body(body, batch.denoiser, provenance);
            examples.push(prepend_mode_token(ex, &self.spec, &self.vocab));
        }
        Ok((examples, dropped))
    }
}

/// One-shot assembly of an in-memory corpus.
pub fn assemble(
    spec: &MixtureSpec,
    vocab: &SpecialVocab,
    corpus: Vec<CorpusRecord>,
) -> Result<(Vec<Example>, AssemblySummary), AssembleError> {
    Pipeline::new(spec, vocab)?.collect(corpus)
}
