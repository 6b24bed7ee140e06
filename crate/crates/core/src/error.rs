use thiserror::Error;

use crate::vocab::ParadigmLabel;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VocabError {
    #[error("base vocabulary must hold at least one id")]
    EmptyBase,
    #[error("num_sentinels must be >= 1")]
    NoSentinels,
    #[error("paradigm label {0} listed twice")]
    DuplicateLabel(ParadigmLabel),
    #[error("special vocabulary does not fit in 32-bit ids")]
    Overflow,
    #[error("eos id {eos} must be a reserved id below base_size {base_size}")]
    EosOutsideBase { eos: u32, base_size: u32 },
    #[error("reserved id {id} overlaps {what}")]
    ReservedOverlap { id: u32, what: &'static str },
    #[error("need {needed} sentinels but only {available} are allocated")]
    SentinelExhausted { needed: u32, available: u32 },
    #[error("unknown paradigm label {0:?} (expected R, S or X)")]
    UnknownLabel(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("mixture has no denoisers")]
    EmptyMixture,
    #[error("rates has {rates} entries but there are {denoisers} denoisers")]
    RateCountMismatch { rates: usize, denoisers: usize },
    #[error("rates[{index}] = {value} must be > 0")]
    NonPositiveRate { index: usize, value: f64 },
    #[error("denoisers[{index}].{field}: {reason}")]
    Denoiser { index: usize, field: &'static str, reason: String },
    #[error("{field}: {reason}")]
    Field { field: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SegmentError {
    #[error("inputs budget {budget} admits no segment (rate {rate}, mean span {mean_span})")]
    BudgetTooSmall { budget: usize, rate: f64, mean_span: f64 },
    #[error("invalid segment parameter {field}: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaskError {
    #[error("sequence of length {0} is too short to corrupt (need >= 2)")]
    TooShort(usize),
    #[error("invalid mask parameter {field}: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error("mask length {mask} does not match sequence length {tokens}")]
    LengthMismatch { mask: usize, tokens: usize },
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Inputs,
    Targets,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Inputs => "inputs",
            Side::Targets => "targets",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed {side} at position {position}: {reason}")]
pub struct ReconstructError {
    pub side: Side,
    pub position: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SplitError {
    #[error("sequence of length {0} is too short to split (need >= 2)")]
    TooShort(usize),
    #[error("target length {u} out of range [1, {max}]")]
    TargetOutOfRange { u: usize, max: usize },
    #[error("invalid split policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssembleError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("denoiser {index}: {source}")]
    Segment { index: usize, source: SegmentError },
    #[error(
        "denoiser {index}: expected max targets length {expected} is greater than configured targets length {configured}"
    )]
    TargetsBudget { index: usize, expected: usize, configured: usize },
    #[error("denoiser {index}: examples can hold up to {needed} spans but the vocabulary has {available} sentinels")]
    Sentinels { index: usize, needed: usize, available: u32 },
    #[error("record {record_id}: {reason}")]
    Record { record_id: u64, reason: String },
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("bad magic {0:?}; expected \"UL2X\"")]
    BadMagic([u8; 4]),
    #[error("unsupported binary version {0}")]
    Version(u16),
    #[error("truncated record {0}")]
    Truncated(usize),
    #[error("record ids must be strictly increasing: {prev} then {next} (line {line})")]
    NonIncreasingId { prev: u64, next: u64, line: usize },
    #[error("record {record_id}: token {token} outside base vocabulary of size {base_size}")]
    TokenOutOfRange { record_id: u64, token: u32, base_size: u32 },
    #[error("unknown denoiser label {0:?}")]
    Label(String),
}
