use serde::{Deserialize, Serialize};

use crate::vocab::TokenSequence;

/// Where an example's raw tokens came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    /// Id of the corpus record holding the segment's first token.
    pub record_id: u64,
    /// Offset of that token inside the record.
    pub offset: u64,
    /// Key of the random stream that corrupted the segment.
    pub stream: u64,
}

/// Inputs/targets pair before a denoiser index is attached.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExampleBody {
    pub inputs: TokenSequence,
    pub targets: TokenSequence,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub inputs: TokenSequence,
    pub targets: TokenSequence,
    pub denoiser_index: usize,
    pub provenance: Provenance,
}

impl Example {
    pub fn from_body(body: ExampleBody, denoiser_index: usize, provenance: Provenance) -> Self {
        Example { inputs: body.inputs, targets: body.targets, denoiser_index, provenance }
    }
}
