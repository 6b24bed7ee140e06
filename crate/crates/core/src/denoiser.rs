//! Denoiser and mixture configuration, plus validation.

use serde::{Deserialize, Serialize};

use crate::error::ValidationError;
use crate::s_denoiser::SplitPolicy;
use crate::vocab::ParadigmLabel;

/// Span length at or above which a denoiser counts as extreme.
pub const EXTREME_SPAN: f64 = 12.0;
/// Corruption rate at or above which a denoiser counts as extreme.
pub const EXTREME_RATE: f64 = 0.3;

/// Mean span length. S-denoisers carry the symbolic `L/4`, resolved against
/// the segment length only when a segment is cut.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanSpan {
    Tokens(f64),
    QuarterLength,
}

impl MeanSpan {
    pub fn resolve(self, len: usize) -> f64 {
        match self {
            MeanSpan::Tokens(mu) => mu,
            MeanSpan::QuarterLength => len as f64 / 4.0,
        }
    }

    pub fn tokens(self) -> Option<f64> {
        match self {
            MeanSpan::Tokens(mu) => Some(mu),
            MeanSpan::QuarterLength => None,
        }
    }
}

impl std::fmt::Display for MeanSpan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MeanSpan::Tokens(mu) => write!(f, "{mu}"),
            MeanSpan::QuarterLength => f.write_str("L/4"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanCount {
    /// `max(1, round(num_noise / mu))`.
    Derived,
    Fixed(u32),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanLengthDist {
    #[default]
    Partition,
    Normal,
    Uniform,
}

impl std::str::FromStr for SpanLengthDist {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "partition" => Ok(SpanLengthDist::Partition),
            "normal" => Ok(SpanLengthDist::Normal),
            "uniform" => Ok(SpanLengthDist::Uniform),
            other => Err(format!("unknown span length strategy {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub label: ParadigmLabel,
    pub mean_span: MeanSpan,
    pub rate: f64,
    pub span_count: SpanCount,
    pub span_dist: SpanLengthDist,
    pub paradigm: ParadigmLabel,
    /// Only read for S-denoisers.
    pub split: SplitPolicy,
    /// Only read for S-denoisers: put sentinel_0 at the prefix/suffix boundary.
    pub boundary_sentinel: bool,
}

impl DenoiserSpec {
    /// A span-corruption denoiser; R or X is decided by the extremeness rule.
    pub fn span(mean_span: f64, rate: f64) -> Self {
        let label = if mean_span >= EXTREME_SPAN || rate >= EXTREME_RATE {
            ParadigmLabel::X
        } else {
            ParadigmLabel::R
        };
        DenoiserSpec {
            label,
            mean_span: MeanSpan::Tokens(mean_span),
            rate,
            span_count: SpanCount::Derived,
            span_dist: SpanLengthDist::Partition,
            paradigm: label,
            split: SplitPolicy::QuarterMean,
            boundary_sentinel: true,
        }
    }

    /// A sequential (prefix-LM) denoiser. `rate` is the nominal mean
    /// fraction of tokens moved to the targets.
    pub fn sequential(split: SplitPolicy, rate: f64) -> Self {
        DenoiserSpec {
            label: ParadigmLabel::S,
            mean_span: MeanSpan::QuarterLength,
            rate,
            span_count: SpanCount::Fixed(1),
            span_dist: SpanLengthDist::Uniform,
            paradigm: ParadigmLabel::S,
            split,
            boundary_sentinel: true,
        }
    }

    pub fn with_dist(mut self, dist: SpanLengthDist) -> Self {
        self.span_dist = dist;
        self
    }

    pub fn is_sequential(&self) -> bool {
        self.label == ParadigmLabel::S
    }

    /// Short human-readable name, e.g. `R(mu=3,r=0.15)`.
    pub fn describe(&self) -> String {
        match self.label {
            ParadigmLabel::S => format!("S(mu={},r={},split={})", self.mean_span, self.rate, self.split),
            l => format!("{l}(mu={},r={})", self.mean_span, self.rate),
        }
    }

    fn check(&self, index: usize) -> Result<(), ValidationError> {
        let err = |field: &'static str, reason: String| ValidationError::Denoiser { index, field, reason };
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(err("rate", format!("{} not in (0, 1]", self.rate)));
        }
        match self.mean_span {
            MeanSpan::Tokens(mu) if !(mu.is_finite() && mu >= 1.0) => {
                return Err(err("mean_span", format!("{mu} must be a finite value >= 1")));
            }
            MeanSpan::QuarterLength if self.label != ParadigmLabel::S => {
                return Err(err("mean_span", "L/4 is only meaningful for S-denoisers".into()));
            }
            _ => {}
        }
        if let SpanCount::Fixed(0) = self.span_count {
            return Err(err("span_count", "fixed span count must be >= 1".into()));
        }
        match self.label {
            ParadigmLabel::S => {
                if self.span_count != SpanCount::Fixed(1) {
                    return Err(err("span_count", "S-denoisers use exactly one span".into()));
                }
                if self.span_dist != SpanLengthDist::Uniform {
                    return Err(err("span_dist", "S-denoisers use the uniform split".into()));
                }
                self.split.check().map_err(|e| err("split", e.to_string()))?;
            }
            label => {
                let mu = self.mean_span.tokens().unwrap_or(f64::NAN);
                if self.rate >= 1.0 {
                    return Err(err(
                        "rate",
                        "span corruption needs rate < 1; use an S-denoiser for whole-sequence targets".into(),
                    ));
                }
                let extreme = mu >= EXTREME_SPAN || self.rate >= EXTREME_RATE;
                if label == ParadigmLabel::X && !extreme {
                    return Err(err("label", format!("X needs mu >= 12 or rate >= 0.3 (mu={mu}, rate={})", self.rate)));
                }
                if label == ParadigmLabel::R && extreme {
                    return Err(err("label", format!("R needs mu < 12 and rate < 0.3 (mu={mu}, rate={})", self.rate)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMode {
    Shard,
    #[default]
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub denoisers: Vec<DenoiserSpec>,
    /// Per-denoiser weights; empty means uniform.
    pub rates: Vec<f64>,
    pub inputs_budget: usize,
    pub targets_budget: usize,
    pub seed: u64,
    pub merge_examples: bool,
    pub assignment: AssignmentMode,
    pub prepend_paradigm: bool,
    /// Longest chunk kept from one corpus record.
    pub max_chunk_len: usize,
    /// Number of consecutive records concatenated before re-splitting.
    pub merge_batch: usize,
}

pub const DEFAULT_MAX_CHUNK_LEN: usize = 65536;
pub const DEFAULT_MERGE_BATCH: usize = 128;
pub const DEFAULT_SEED: u64 = 7;

impl MixtureSpec {
    pub fn new(denoisers: Vec<DenoiserSpec>, inputs_budget: usize, targets_budget: usize) -> Self {
        MixtureSpec {
            denoisers,
            rates: Vec::new(),
            inputs_budget,
            targets_budget,
            seed: DEFAULT_SEED,
            merge_examples: true,
            assignment: AssignmentMode::Sample,
            prepend_paradigm: true,
            max_chunk_len: DEFAULT_MAX_CHUNK_LEN,
            merge_batch: DEFAULT_MERGE_BATCH,
        }
    }

    pub fn with_rates(mut self, rates: Vec<f64>) -> Self {
        self.rates = rates;
        self
    }

    /// Check every invariant and return a copy with normalized rates.
    /// Idempotent: validating an already validated spec returns it unchanged.
    pub fn validate(&self) -> Result<MixtureSpec, ValidationError> {
        if self.denoisers.is_empty() {
            return Err(ValidationError::EmptyMixture);
        }
        let k = self.denoisers.len();
        let rates = if self.rates.is_empty() { vec![1.0; k] } else { self.rates.clone() };
        if rates.len() != k {
            return Err(ValidationError::RateCountMismatch { rates: rates.len(), denoisers: k });
        }
        for (index, &value) in rates.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ValidationError::NonPositiveRate { index, value });
            }
        }
        for (i, d) in self.denoisers.iter().enumerate() {
            d.check(i)?;
        }
        if self.inputs_budget < 2 {
            return Err(ValidationError::Field { field: "inputs_budget", reason: "must be >= 2".into() });
        }
        if self.targets_budget < 2 {
            return Err(ValidationError::Field { field: "targets_budget", reason: "must be >= 2".into() });
        }
        if self.max_chunk_len < 1 {
            return Err(ValidationError::Field { field: "max_chunk_len", reason: "must be >= 1".into() });
        }
        if self.merge_batch < 1 {
            return Err(ValidationError::Field { field: "merge_batch", reason: "must be >= 1".into() });
        }
        let total: f64 = rates.iter().sum();
        let rates = if (total - 1.0).abs() <= 1e-12 {
            rates
        } else {
            rates.iter().map(|r| r / total).collect()
        };
        Ok(MixtureSpec { rates, ..self.clone() })
    }

    /// Normalized rates; uniform when none were given.
    pub fn normalized_rates(&self) -> Vec<f64> {
        let k = self.denoisers.len();
        if self.rates.is_empty() {
            return vec![1.0 / k as f64; k];
        }
        let total: f64 = self.rates.iter().sum();
        self.rates.iter().map(|r| r / total).collect()
    }
}
