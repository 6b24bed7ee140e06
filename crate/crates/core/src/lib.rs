//! Deterministic generation of denoising pretraining examples: span
//! corruption (R/X), prefix splits (S), mixtures of denoisers with paradigm
//! tokens, and statistics that certify a generated stream.

pub mod denoiser;
pub mod error;
pub mod example;
pub mod format;
pub mod mixture;
pub mod preset;
pub mod rng;
pub mod s_denoiser;
pub mod span_corruption;
pub mod stats;
pub mod vocab;

pub use denoiser::{AssignmentMode, DenoiserSpec, MeanSpan, MixtureSpec, SpanCount, SpanLengthDist};
pub use error::{AssembleError, FormatError, MaskError, ReconstructError, SegmentError, SplitError, ValidationError, VocabError};
pub use example::{Example, ExampleBody, Provenance};
pub use format::{CorpusRecord, Encoding, ExampleReader, ExampleRecord, ExampleWriter};
pub use mixture::{assemble, AssemblySummary, Pipeline};
pub use preset::{catalog, preset, PresetInfo, UnknownPreset};
pub use rng::{PathLabel, RngStream};
pub use s_denoiser::SplitPolicy;
pub use span_corruption::{apply_sentinels, compute_segment_lengths, reconstruct, sample_noise_mask, NoiseMask, SegmentBudget};
pub use stats::{measure, verify, Finding, Status, StatsReport, Tolerances};
pub use vocab::{allocate_special_vocab, AliasTable, ParadigmLabel, SpecialVocab, SpecialVocabBuilder, TokenId, TokenSequence};
