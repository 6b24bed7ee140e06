//! Token ids and the special-vocabulary layout that sits on top of a base
//! vocabulary.
//!
//! Layout, for a base vocabulary of size `B` with `K` sentinels and `P`
//! paradigm labels:
//!
//! ```text
//! [0, B)            base tokens (eos and other reserved ids live here)
//! [B, B+K)          sentinel_0 .. sentinel_{K-1}, ascending
//! [B+K, B+K+P)      paradigm tokens, in the order the labels were given
//! ```

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::VocabError;

/// Minimum number of sentinels a vocabulary is expected to offer by default.
pub const DEFAULT_NUM_SENTINELS: u32 = 100;

/// Default end-of-sequence id, reserved inside the base vocabulary.
pub const DEFAULT_EOS_ID: u32 = 1;

/// Padding id used by the byte fallback tokenizer and as decoder BOS.
pub const PAD_ID: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn get(self) -> u32 {
        self.0
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type TokenSequence = Vec<TokenId>;

/// Convert raw ids into a token sequence.
pub fn tokens(ids: &[u32]) -> TokenSequence {
    ids.iter().copied().map(TokenId).collect()
}

/// The three denoising regimes, each of which owns one paradigm token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParadigmLabel {
    R,
    S,
    X,
}

impl ParadigmLabel {
    pub const ALL: [ParadigmLabel; 3] = [ParadigmLabel::R, ParadigmLabel::S, ParadigmLabel::X];

    pub fn as_char(self) -> char {
        match self {
            ParadigmLabel::R => 'R',
            ParadigmLabel::S => 'S',
            ParadigmLabel::X => 'X',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'R' | 'r' => Some(ParadigmLabel::R),
            'S' | 's' => Some(ParadigmLabel::S),
            'X' | 'x' => Some(ParadigmLabel::X),
            _ => None,
        }
    }

    /// Pretraining display string, e.g. `[R]`.
    pub fn display_tag(self) -> &'static str {
        match self {
            ParadigmLabel::R => "[R]",
            ParadigmLabel::S => "[S]",
            ParadigmLabel::X => "[X]",
        }
    }
}

impl fmt::Display for ParadigmLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl std::str::FromStr for ParadigmLabel {
    type Err = VocabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => {
                ParadigmLabel::from_char(c).ok_or_else(|| VocabError::UnknownLabel(s.to_string()))
            }
            _ => Err(VocabError::UnknownLabel(s.to_string())),
        }
    }
}

/// Maps mode-tag display strings onto paradigm labels.
///
/// The default table knows both the pretraining tags (`[R]`, `[S]`, `[X]`)
/// and the tags used by the released checkpoint (`[NLU]`, `[S2S]`, `[NLG]`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasTable {
    entries: BTreeMap<String, ParadigmLabel>,
}

impl Default for AliasTable {
    fn default() -> Self {
        let mut entries = BTreeMap::new();
        for label in ParadigmLabel::ALL {
            entries.insert(label.display_tag().to_string(), label);
        }
        entries.insert("[NLU]".to_string(), ParadigmLabel::R);
        entries.insert("[S2S]".to_string(), ParadigmLabel::S);
        entries.insert("[NLG]".to_string(), ParadigmLabel::X);
        AliasTable { entries }
    }
}

impl AliasTable {
    pub fn empty() -> Self {
        AliasTable { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, tag: impl Into<String>, label: ParadigmLabel) {
        self.entries.insert(tag.into(), label);
    }

    pub fn resolve(&self, tag: &str) -> Option<ParadigmLabel> {
        self.entries.get(tag.trim()).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParadigmLabel)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Placement of sentinel, paradigm and end-of-sequence ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialVocab {
    base_size: u32,
    eos_id: TokenId,
    sentinel_start: u32,
    num_sentinels: u32,
    paradigm: Vec<(ParadigmLabel, TokenId)>,
    reserved: Vec<TokenId>,
}

/// Token classes as seen by consumers of generated examples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Base,
    Eos,
    Sentinel(u32),
    Paradigm(ParadigmLabel),
    OutOfRange,
}

/// Builder for [`SpecialVocab`] when the caller needs a custom eos or a
/// list of reserved ids.
#[derive(Clone, Debug)]
pub struct SpecialVocabBuilder {
    base_size: u32,
    num_sentinels: u32,
    labels: Vec<ParadigmLabel>,
    eos: Option<u32>,
    reserved: Vec<u32>,
}

impl SpecialVocabBuilder {
    pub fn new(base_size: u32, num_sentinels: u32) -> Self {
        SpecialVocabBuilder {
            base_size,
            num_sentinels,
            labels: ParadigmLabel::ALL.to_vec(),
            eos: None,
            reserved: Vec::new(),
        }
    }

    pub fn paradigm_labels(mut self, labels: &[ParadigmLabel]) -> Self {
        self.labels = labels.to_vec();
        self
    }

    pub fn eos(mut self, eos: u32) -> Self {
        self.eos = Some(eos);
        self
    }

    pub fn reserved(mut self, ids: &[u32]) -> Self {
        self.reserved = ids.to_vec();
        self
    }

    pub fn build(self) -> Result<SpecialVocab, VocabError> {
        if self.base_size < 1 {
            return Err(VocabError::EmptyBase);
        }
        if self.num_sentinels < 1 {
            return Err(VocabError::NoSentinels);
        }
        let mut seen = Vec::with_capacity(self.labels.len());
        for &l in &self.labels {
            if seen.contains(&l) {
                return Err(VocabError::DuplicateLabel(l));
            }
            seen.push(l);
        }
        let sentinel_start = self.base_size;
        let paradigm_start = sentinel_start
            .checked_add(self.num_sentinels)
            .ok_or(VocabError::Overflow)?;
        paradigm_start
            .checked_add(self.labels.len() as u32)
            .ok_or(VocabError::Overflow)?;
        let paradigm: Vec<_> = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, &l)| (l, TokenId(paradigm_start + i as u32)))
            .collect();

        let eos = self.eos.unwrap_or(DEFAULT_EOS_ID);
        if eos >= self.base_size {
            return Err(VocabError::EosOutsideBase { eos, base_size: self.base_size });
        }
        for &r in &self.reserved {
            if r == eos {
                return Err(VocabError::ReservedOverlap { id: r, what: "eos" });
            }
            if r >= self.base_size {
                return Err(VocabError::ReservedOverlap {
                    id: r,
                    what: if r < paradigm_start { "sentinel range" } else { "paradigm ids" },
                });
            }
        }
        Ok(SpecialVocab {
            base_size: self.base_size,
            eos_id: TokenId(eos),
            sentinel_start,
            num_sentinels: self.num_sentinels,
            paradigm,
            reserved: self.reserved.into_iter().map(TokenId).collect(),
        })
    }
}

/// Lay out sentinels ascending from `base_size`, followed by one paradigm id
/// per label. Eos defaults to id 1.
pub fn allocate_special_vocab(
    base_size: u32,
    num_sentinels: u32,
    paradigm_labels: &[ParadigmLabel],
) -> Result<SpecialVocab, VocabError> {
    SpecialVocabBuilder::new(base_size, num_sentinels)
        .paradigm_labels(paradigm_labels)
        .build()
}

impl SpecialVocab {
    pub fn base_size(&self) -> u32 {
        self.base_size
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn num_sentinels(&self) -> u32 {
        self.num_sentinels
    }

    pub fn reserved(&self) -> &[TokenId] {
        &self.reserved
    }

    /// Total id space: base + sentinels + paradigm tokens.
    pub fn total_size(&self) -> u32 {
        self.base_size + self.num_sentinels + self.paradigm.len() as u32
    }

    pub fn sentinel_range(&self) -> std::ops::Range<u32> {
        self.sentinel_start..self.sentinel_start + self.num_sentinels
    }

    pub fn sentinel(&self, i: u32) -> Result<TokenId, VocabError> {
        if i < self.num_sentinels {
            Ok(TokenId(self.sentinel_start + i))
        } else {
            Err(VocabError::SentinelExhausted { needed: i + 1, available: self.num_sentinels })
        }
    }

    /// Index of a sentinel id, if `id` is one.
    pub fn sentinel_index(&self, id: TokenId) -> Option<u32> {
        self.sentinel_range().contains(&id.0).then(|| id.0 - self.sentinel_start)
    }

    pub fn is_sentinel(&self, id: TokenId) -> bool {
        self.sentinel_index(id).is_some()
    }

    pub fn paradigm_id(&self, label: ParadigmLabel) -> Option<TokenId> {
        self.paradigm.iter().find(|(l, _)| *l == label).map(|(_, id)| *id)
    }

    pub fn paradigm_label(&self, id: TokenId) -> Option<ParadigmLabel> {
        self.paradigm.iter().find(|(_, p)| *p == id).map(|(l, _)| *l)
    }

    pub fn paradigm_ids(&self) -> &[(ParadigmLabel, TokenId)] {
        &self.paradigm
    }

    pub fn kind(&self, id: TokenId) -> TokenKind {
        if id == self.eos_id {
            TokenKind::Eos
        } else if id.0 < self.base_size {
            TokenKind::Base
        } else if let Some(i) = self.sentinel_index(id) {
            TokenKind::Sentinel(i)
        } else if let Some(l) = self.paradigm_label(id) {
            TokenKind::Paradigm(l)
        } else {
            TokenKind::OutOfRange
        }
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id.0 < self.total_size()
    }

    /// Render one id: sentinels as `<X_i>`, paradigm ids by display tag,
    /// eos as `</s>`, everything else as its number.
    pub fn render(&self, id: TokenId) -> String {
        match self.kind(id) {
            TokenKind::Eos => "</s>".to_string(),
            TokenKind::Sentinel(i) => format!("<X_{i}>"),
            TokenKind::Paradigm(l) => l.display_tag().to_string(),
            TokenKind::Base | TokenKind::OutOfRange => id.0.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn t5_sized_layout() {
        let v = allocate_special_vocab(32000, 100, &ParadigmLabel::ALL).unwrap();
        assert_eq!(v.sentinel_range(), 32000..32100);
        assert_eq!(v.sentinel(0).unwrap(), TokenId(32000));
        assert_eq!(v.sentinel(99).unwrap(), TokenId(32099));
        assert_eq!(v.paradigm_id(ParadigmLabel::R), Some(TokenId(32100)));
        assert_eq!(v.paradigm_id(ParadigmLabel::S), Some(TokenId(32101)));
        assert_eq!(v.paradigm_id(ParadigmLabel::X), Some(TokenId(32102)));
        assert_eq!(v.total_size(), 32103);
        assert_eq!(v.eos_id(), TokenId(1));
    }

    #[test]
    fn small_layout() {
        let v = allocate_special_vocab(10, 2, &[ParadigmLabel::R]).unwrap();
        assert_eq!(v.sentinel_range(), 10..12);
        assert_eq!(v.paradigm_id(ParadigmLabel::R), Some(TokenId(12)));
        assert_eq!(v.paradigm_id(ParadigmLabel::X), None);
    }

    #[test]
    fn zero_sentinels_rejected() {
        assert_eq!(allocate_special_vocab(10, 0, &[]), Err(VocabError::NoSentinels));
    }

    #[test]
    fn reserved_overlap_rejected() {
        let err = SpecialVocabBuilder::new(10, 2).eos(3).reserved(&[0, 3]).build();
        assert!(matches!(err, Err(VocabError::ReservedOverlap { id: 3, .. })));
        let err = SpecialVocabBuilder::new(10, 2).reserved(&[11]).build();
        assert!(matches!(err, Err(VocabError::ReservedOverlap { id: 11, .. })));
        let err = SpecialVocabBuilder::new(10, 2).eos(10).build();
        assert!(matches!(err, Err(VocabError::EosOutsideBase { .. })));
    }

    #[test]
    fn sentinel_exhaustion() {
        let v = allocate_special_vocab(10, 2, &[]).unwrap();
        assert!(v.sentinel(1).is_ok());
        assert!(matches!(v.sentinel(2), Err(VocabError::SentinelExhausted { .. })));
    }

    #[test]
    fn classes_are_disjoint() {
        let v = SpecialVocabBuilder::new(500, 37).reserved(&[0, 2]).build().unwrap();
        let base: BTreeSet<u32> = (0..v.base_size()).collect();
        let sentinels: BTreeSet<u32> = v.sentinel_range().collect();
        let paradigm: BTreeSet<u32> = v.paradigm_ids().iter().map(|(_, id)| id.0).collect();
        assert!(base.is_disjoint(&sentinels));
        assert!(base.is_disjoint(&paradigm));
        assert!(sentinels.is_disjoint(&paradigm));
        assert!(!sentinels.contains(&v.eos_id().0) && !paradigm.contains(&v.eos_id().0));
        assert!(v.reserved().iter().all(|r| *r != v.eos_id()));
    }

    #[test]
    fn aliases_cover_release_tags() {
        let a = AliasTable::default();
        assert_eq!(a.resolve("[NLU]"), Some(ParadigmLabel::R));
        assert_eq!(a.resolve("[NLG]"), Some(ParadigmLabel::X));
        assert_eq!(a.resolve("[S2S]"), Some(ParadigmLabel::S));
        assert_eq!(a.resolve("[R]"), Some(ParadigmLabel::R));
        assert_eq!(a.resolve("[Q]"), None);
    }

    #[test]
    fn render_markers() {
        let v = allocate_special_vocab(10, 2, &ParadigmLabel::ALL).unwrap();
        assert_eq!(v.render(TokenId(11)), "<X_1>");
        assert_eq!(v.render(TokenId(1)), "</s>");
        assert_eq!(v.render(TokenId(14)), "[X]");
        assert_eq!(v.render(TokenId(5)), "5");
    }
}
