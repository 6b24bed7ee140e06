//! Sequential (prefix-LM) denoising: a bidirectional prefix and a suffix
//! target that always reaches the end of the segment.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::SplitError;
use crate::example::ExampleBody;
use crate::rng::RngStream;
use crate::vocab::{SpecialVocab, TokenId};

/// How the target (suffix) length `u` is drawn for a segment of length `L`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    /// `u` uniform on `[1, floor(L/2)]`, mean about `L/4`.
    #[default]
    QuarterMean,
    /// `u` uniform on `[1, L-1]`.
    FullUniform,
    /// `u = clamp(round(f L), 1, L-1)`.
    FixedFraction(f64),
}

impl SplitPolicy {
    pub fn check(&self) -> Result<(), SplitError> {
        match *self {
            SplitPolicy::FixedFraction(f) if !(f > 0.0 && f <= 1.0) => {
                Err(SplitError::InvalidPolicy(format!("fixed fraction {f} not in (0, 1]")))
            }
            _ => Ok(()),
        }
    }

    /// Largest `u` the policy can produce for a segment of length `len`.
    pub fn max_target(&self, len: usize) -> usize {
        match *self {
            SplitPolicy::QuarterMean => (len / 2).max(1),
            SplitPolicy::FullUniform => len - 1,
            SplitPolicy::FixedFraction(f) => fixed_target(len, f),
        }
    }

    /// Expected target fraction `E[u] / L` at segment length `len`.
    pub fn expected_fraction(&self, len: usize) -> f64 {
        let mean_u = match *self {
            SplitPolicy::QuarterMean => ((len / 2).max(1) as f64 + 1.0) / 2.0,
            SplitPolicy::FullUniform => len as f64 / 2.0,
            SplitPolicy::FixedFraction(f) => fixed_target(len, f) as f64,
        };
        mean_u / len as f64
    }
}

impl fmt::Display for SplitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitPolicy::QuarterMean => f.write_str("quarter_mean"),
            SplitPolicy::FullUniform => f.write_str("full_uniform"),
            SplitPolicy::FixedFraction(x) => write!(f, "fixed_fraction({x})"),
        }
    }
}

fn fixed_target(len: usize, fraction: f64) -> usize {
    ((fraction * len as f64).round() as usize).clamp(1, len - 1)
}

/// Draw the number of trailing tokens that become the target.
pub fn sample_target_length(len: usize, policy: SplitPolicy, rng: &mut RngStream) -> Result<usize, SplitError> {
    if len < 2 {
        return Err(SplitError::TooShort(len));
    }
    policy.check()?;
    Ok(match policy {
        SplitPolicy::QuarterMean => rng.random_range(1..=(len / 2).max(1)),
        SplitPolicy::FullUniform => rng.random_range(1..=len - 1),
        SplitPolicy::FixedFraction(f) => fixed_target(len, f),
    })
}

/// Split `tokens` so the last `u` tokens become the target.
///
/// With the boundary sentinel: inputs `prefix ++ [S0]`, targets
/// `[S0] ++ suffix ++ [eos]`. Without: inputs `prefix`, targets
/// `suffix ++ [eos]`.
pub fn make_prefix_example(
    tokens: &[TokenId],
    u: usize,
    vocab: &SpecialVocab,
    with_sentinel: bool,
) -> Result<ExampleBody, SplitError> {
    let len = tokens.len();
    if len < 2 {
        return Err(SplitError::TooShort(len));
    }
    if u < 1 || u > len - 1 {
        return Err(SplitError::TargetOutOfRange { u, max: len - 1 });
    }
    let cut = len - u;
    let mut inputs = Vec::with_capacity(cut + 1);
    let mut targets = Vec::with_capacity(u + 2);
    inputs.extend_from_slice(&tokens[..cut]);
    if with_sentinel {
        let s0 = vocab.sentinel(0).expect("vocabularies hold at least one sentinel");
        inputs.push(s0);
        targets.push(s0);
    }
    targets.extend_from_slice(&tokens[cut..]);
    targets.push(vocab.eos_id());
    Ok(ExampleBody { inputs, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::PathLabel;
    use crate::span_corruption::reconstruct;
    use crate::vocab::{allocate_special_vocab, tokens};

    fn vocab() -> SpecialVocab {
        allocate_special_vocab(100, 4, &[]).unwrap()
    }

    #[test]
    fn prefix_examples() {
        let v = vocab();
        let t = tokens(&[1, 2, 3, 4, 5, 6]);
        let with = make_prefix_example(&t, 2, &v, true).unwrap();
        assert_eq!(with.inputs, tokens(&[1, 2, 3, 4, 100]));
        assert_eq!(with.targets, tokens(&[100, 5, 6, 1]));
        let without = make_prefix_example(&t, 2, &v, false).unwrap();
        assert_eq!(without.inputs, tokens(&[1, 2, 3, 4]));
        assert_eq!(without.targets, tokens(&[5, 6, 1]));
        assert!(matches!(make_prefix_example(&t, 6, &v, true), Err(SplitError::TargetOutOfRange { .. })));
        assert!(make_prefix_example(&t, 0, &v, true).is_err());
    }

    #[test]
    fn sentinel_form_reconstructs() {
        let v = vocab();
        let t = tokens(&[7, 8, 9, 10, 11]);
        for u in 1..5 {
            let body = make_prefix_example(&t, u, &v, true).unwrap();
            assert_eq!(reconstruct(&body.inputs, &body.targets, &v).unwrap(), t);
        }
    }

    #[test]
    fn target_length_ranges() {
        let root = RngStream::new(11);
        for i in 0..2000 {
            let mut rng = root.derive(PathLabel::Record(i));
            let u = sample_target_length(512, SplitPolicy::QuarterMean, &mut rng).unwrap();
            assert!((1..=256).contains(&u));
            let u = sample_target_length(512, SplitPolicy::FullUniform, &mut rng).unwrap();
            assert!((1..=511).contains(&u));
        }
        let mut rng = RngStream::new(0);
        for p in [SplitPolicy::QuarterMean, SplitPolicy::FullUniform, SplitPolicy::FixedFraction(0.9)] {
            assert_eq!(sample_target_length(2, p, &mut rng).unwrap(), 1);
        }
        assert_eq!(sample_target_length(512, SplitPolicy::FixedFraction(0.25), &mut rng).unwrap(), 128);
        assert!(matches!(sample_target_length(1, SplitPolicy::QuarterMean, &mut rng), Err(SplitError::TooShort(1))));
    }

    #[test]
    fn causal_limit_leaves_one_prefix_token() {
        let v = vocab();
        let t: Vec<TokenId> = (0..64).map(|i| TokenId(2 + i)).collect();
        let mut rng = RngStream::new(0);
        let u = sample_target_length(t.len(), SplitPolicy::FixedFraction(1.0), &mut rng).unwrap();
        let body = make_prefix_example(&t, u, &v, true).unwrap();
        assert_eq!(body.inputs.len(), 2);
        let u = sample_target_length(t.len(), SplitPolicy::FixedFraction(1.0 - 1.0 / 64.0), &mut rng).unwrap();
        assert_eq!(make_prefix_example(&t, u, &v, true).unwrap().inputs.len(), 2);
    }

    #[test]
    fn expected_fraction_matches_definition() {
        assert!((SplitPolicy::QuarterMean.expected_fraction(512) - 128.5 / 512.0).abs() < 1e-15);
        assert_eq!(SplitPolicy::FullUniform.expected_fraction(10), 0.5);
        assert_eq!(SplitPolicy::FixedFraction(0.25).expected_fraction(512), 0.25);
    }
}
