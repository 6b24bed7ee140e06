//! Named mixtures: the UL2 mixture, the single-objective baselines and the
//! ablation mixtures A through L.

use thiserror::Error;

use crate::denoiser::{DenoiserSpec, MixtureSpec};
use crate::s_denoiser::SplitPolicy;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown preset {name:?}; valid presets: {}", valid.join(", "))]
pub struct UnknownPreset {
    pub name: String,
    pub valid: Vec<&'static str>,
}

#[derive(Clone, Copy, Debug)]
pub struct PresetInfo {
    pub name: &'static str,
    pub provenance: &'static str,
    pub summary: &'static str,
}

/// One ablation row: span lengths x corruption rates, plus the S share.
struct Ablation {
    name: &'static str,
    provenance: &'static str,
    spans: &'static [f64],
    rates: &'static [f64],
    s_share: f64,
}

const ABLATIONS: &[Ablation] = &[
    Ablation { name: "var-a", provenance: "ablation mixture A", spans: &[], rates: &[], s_share: 1.00 },
    Ablation { name: "var-b", provenance: "ablation mixture B", spans: &[3.0], rates: &[0.50], s_share: 0.0 },
    Ablation { name: "var-c", provenance: "ablation mixture C", spans: &[3.0, 8.0, 12.0], rates: &[0.15, 0.50], s_share: 0.14 },
    Ablation { name: "var-d", provenance: "ablation mixture D", spans: &[3.0, 8.0, 12.0, 32.0], rates: &[0.15, 0.50], s_share: 0.11 },
    Ablation { name: "var-e", provenance: "ablation mixture E", spans: &[3.0, 8.0, 32.0, 64.0], rates: &[0.15, 0.50], s_share: 0.11 },
    Ablation { name: "var-f", provenance: "ablation mixture F", spans: &[3.0, 8.0, 64.0], rates: &[0.15, 0.50], s_share: 0.17 },
    Ablation { name: "var-g", provenance: "ablation mixture G", spans: &[3.0, 8.0, 32.0, 64.0], rates: &[0.15], s_share: 0.25 },
    Ablation { name: "var-h", provenance: "ablation mixture H", spans: &[8.0, 64.0], rates: &[0.15], s_share: 0.25 },
    Ablation { name: "var-i", provenance: "ablation mixture I", spans: &[3.0, 8.0, 12.0, 32.0], rates: &[0.15, 0.50], s_share: 0.50 },
    Ablation { name: "var-j", provenance: "ablation mixture J", spans: &[3.0, 8.0, 64.0], rates: &[0.15, 0.50], s_share: 0.50 },
    Ablation { name: "var-k", provenance: "ablation mixture K", spans: &[3.0, 8.0, 12.0], rates: &[0.15, 0.50], s_share: 0.0 },
    Ablation { name: "var-l", provenance: "ablation mixture L", spans: &[3.0, 8.0, 64.0], rates: &[0.15, 0.50], s_share: 0.0 },
];

const BASE_PRESETS: &[PresetInfo] = &[
    PresetInfo {
        name: "ul2",
        provenance: "UL2 mixture-of-denoisers",
        summary: "R(3,.15) R(8,.15) S(L/4,.25) X(3,.5) X(8,.5) X(64,.15) X(64,.5), uniform",
    },
    PresetInfo { name: "t5-sc", provenance: "baseline: T5 span corruption", summary: "R(3,.15)" },
    PresetInfo { name: "clm", provenance: "baseline: causal LM", summary: "S with a one-token prefix" },
    PresetInfo { name: "plm", provenance: "baseline: prefix LM", summary: "S, split uniform on [1, L-1]" },
    PresetInfo { name: "sclm", provenance: "baseline: span corruption + LM", summary: "clm + t5-sc, equal mix" },
    PresetInfo { name: "unilm", provenance: "baseline: UniLM-style mix", summary: "clm + plm + R(1,.15), equal thirds" },
];

/// Every preset with its provenance, in catalog order.
pub fn catalog() -> Vec<PresetInfo> {
    let mut out = BASE_PRESETS.to_vec();
    for a in ABLATIONS {
        out.push(PresetInfo { name: a.name, provenance: a.provenance, summary: "" });
    }
    out
}

fn names() -> Vec<&'static str> {
    catalog().iter().map(|p| p.name).collect()
}

fn uniform_s() -> DenoiserSpec {
    DenoiserSpec::sequential(SplitPolicy::QuarterMean, 0.25)
}

fn causal() -> DenoiserSpec {
    DenoiserSpec::sequential(SplitPolicy::FixedFraction(1.0), 1.0)
}

fn prefix_lm() -> DenoiserSpec {
    DenoiserSpec::sequential(SplitPolicy::FullUniform, 0.5)
}

/// Expand a preset name into a mixture. Rates are returned unnormalized
/// where the catalog states weights; call `validate` to normalize.
pub fn preset(name: &str, inputs_budget: usize, targets_budget: usize) -> Result<MixtureSpec, UnknownPreset> {
    let key = name.trim().to_ascii_lowercase();
    let (denoisers, rates) = match key.as_str() {
        "ul2" => (
            vec![
                DenoiserSpec::span(3.0, 0.15),
                DenoiserSpec::span(8.0, 0.15),
                uniform_s(),
                DenoiserSpec::span(3.0, 0.5),
                DenoiserSpec::span(8.0, 0.5),
                DenoiserSpec::span(64.0, 0.15),
                DenoiserSpec::span(64.0, 0.5),
            ],
            Vec::new(),
        ),
        "t5-sc" => (vec![DenoiserSpec::span(3.0, 0.15)], Vec::new()),
        "clm" => (vec![causal()], Vec::new()),
        "plm" => (vec![prefix_lm()], Vec::new()),
        "sclm" => (vec![causal(), DenoiserSpec::span(3.0, 0.15)], vec![0.5, 0.5]),
        "unilm" => (vec![causal(), prefix_lm(), DenoiserSpec::span(1.0, 0.15)], vec![1.0, 1.0, 1.0]),
        other => {
            let row = ABLATIONS
                .iter()
                .find(|a| a.name == other)
                .ok_or_else(|| UnknownPreset { name: name.to_string(), valid: names() })?;
            ablation(row)
        }
    };
    let spec = MixtureSpec::new(denoisers, inputs_budget, targets_budget);
    Ok(if rates.is_empty() { spec } else { spec.with_rates(rates) })
}

fn ablation(row: &Ablation) -> (Vec<DenoiserSpec>, Vec<f64>) {
    let mut denoisers = Vec::new();
    for &mu in row.spans {
        for &r in row.rates {
            denoisers.push(DenoiserSpec::span(mu, r));
        }
    }
    let n = denoisers.len();
    let mut rates = vec![(1.0 - row.s_share) / n.max(1) as f64; n];
    if row.s_share > 0.0 {
        denoisers.push(uniform_s());
        rates.push(row.s_share);
    }
    (denoisers, rates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::MeanSpan;
    use crate::vocab::ParadigmLabel;

    #[test]
    fn ul2_matches_mixture_table() {
        let s = preset("ul2", 512, 512).unwrap().validate().unwrap();
        assert_eq!(s.denoisers.len(), 7);
        let got: Vec<(ParadigmLabel, MeanSpan, f64)> = s.denoisers.iter().map(|d| (d.label, d.mean_span, d.rate)).collect();
        use ParadigmLabel::*;
        let t = MeanSpan::Tokens;
        assert_eq!(
            got,
            vec![
                (R, t(3.0), 0.15),
                (R, t(8.0), 0.15),
                (S, MeanSpan::QuarterLength, 0.25),
                (X, t(3.0), 0.5),
                (X, t(8.0), 0.5),
                (X, t(64.0), 0.15),
                (X, t(64.0), 0.5),
            ]
        );
        assert!(s.rates.iter().all(|r| (r - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn var_h_rates() {
        let s = preset("var-h", 512, 512).unwrap().validate().unwrap();
        assert_eq!(s.denoisers.len(), 3);
        assert_eq!(s.denoisers[0].mean_span, MeanSpan::Tokens(8.0));
        assert_eq!(s.denoisers[1].mean_span, MeanSpan::Tokens(64.0));
        assert!(s.denoisers[2].is_sequential());
        for (got, want) in s.rates.iter().zip([0.375, 0.375, 0.25]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ablation_denoiser_counts() {
        let counts = [
            ("var-a", 1), ("var-b", 1), ("var-c", 7), ("var-d", 9), ("var-e", 9), ("var-f", 7),
            ("var-g", 5), ("var-h", 3), ("var-i", 9), ("var-j", 7), ("var-k", 6), ("var-l", 6),
        ];
        for (name, n) in counts {
            let s = preset(name, 512, 1024).unwrap().validate().unwrap();
            assert_eq!(s.denoisers.len(), n, "{name}");
        }
    }

    #[test]
    fn every_preset_validates() {
        for info in catalog() {
            preset(info.name, 512, 1024).unwrap().validate().unwrap_or_else(|e| panic!("{}: {e}", info.name));
        }
    }

    #[test]
    fn baselines() {
        let s = preset("t5-sc", 512, 512).unwrap();
        assert_eq!(s.denoisers.len(), 1);
        assert_eq!((s.denoisers[0].mean_span, s.denoisers[0].rate), (MeanSpan::Tokens(3.0), 0.15));
        let s = preset("sclm", 512, 512).unwrap().validate().unwrap();
        assert_eq!(s.rates, vec![0.5, 0.5]);
        let s = preset("plm", 512, 512).unwrap();
        assert_eq!(s.denoisers[0].split, SplitPolicy::FullUniform);
    }

    #[test]
    fn unknown_lists_catalog() {
        let err = preset("bert", 512, 512).unwrap_err();
        assert!(err.valid.contains(&"ul2") && err.valid.contains(&"var-l"));
        assert!(err.to_string().contains("var-a"));
    }
}
