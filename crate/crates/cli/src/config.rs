//! TOML run configuration. The preset named in `[mixture]` is expanded
//! first; every other key in the section then overrides it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use ul2_core::{
    preset, AliasTable, AssignmentMode, DenoiserSpec, MixtureSpec, ParadigmLabel, SpanLengthDist, SpecialVocab,
    SpecialVocabBuilder, SplitPolicy, ValidationError,
};
use ul2_core::mixture::plan_denoiser;
use ul2_toy::{Arch, ToyConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("invalid value for `{field}`: {reason}")]
    Field { field: String, reason: String },
}

fn field(field: impl Into<String>, reason: impl ToString) -> ConfigError {
    ConfigError::Field { field: field.into(), reason: reason.to_string() }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    mixture: RawMixture,
    #[serde(default)]
    vocab: RawVocab,
    #[serde(default)]
    toy: Option<RawToy>,
    #[serde(default)]
    aliases: BTreeMap<String, String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMixture {
    preset: Option<String>,
    denoisers: Option<Vec<RawDenoiser>>,
    rates: Option<Vec<f64>>,
    inputs_budget: Option<usize>,
    targets_budget: Option<usize>,
    seed: Option<u64>,
    merge: Option<bool>,
    assignment: Option<AssignmentMode>,
    prepend_paradigm: Option<bool>,
    max_chunk_len: Option<usize>,
    merge_batch: Option<usize>,
    /// Applied to every S-denoiser.
    s_split: Option<String>,
    s_fraction: Option<f64>,
    /// Applied to every R/X-denoiser.
    span_dist: Option<SpanLengthDist>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDenoiser {
    label: Option<String>,
    mean_span: Option<f64>,
    rate: f64,
    span_dist: Option<SpanLengthDist>,
    split: Option<String>,
    fraction: Option<f64>,
    span_count: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVocab {
    base_size: u32,
    /// Defaults to the larger of 100 and what the mixture can use.
    num_sentinels: Option<u32>,
    eos: u32,
}

impl Default for RawVocab {
    fn default() -> Self {
        RawVocab { base_size: ul2_core::format::BYTE_VOCAB_SIZE, num_sentinels: None, eos: 1 }
    }
}

pub const MIN_DEFAULT_SENTINELS: u32 = 100;

/// Sentinels needed by the most span-hungry denoiser, at least 100.
pub fn sentinels_needed(spec: &MixtureSpec) -> u32 {
    spec.denoisers
        .iter()
        .filter_map(|d| plan_denoiser(d, spec.inputs_budget, spec.targets_budget).ok())
        .map(|p| p.max_spans as u32)
        .fold(MIN_DEFAULT_SENTINELS, u32::max)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawToy {
    vocab_size: Option<usize>,
    d_model: Option<usize>,
    layers: Option<usize>,
    heads: Option<usize>,
    d_ff: Option<usize>,
    max_len: Option<usize>,
    arch: Option<String>,
    num_buckets: Option<usize>,
    max_distance: Option<usize>,
    seed: Option<u64>,
    lr: Option<f64>,
    momentum: Option<f64>,
    batch_size: Option<usize>,
}

pub const DEFAULT_INPUTS_BUDGET: usize = 512;
pub const DEFAULT_TARGETS_BUDGET: usize = 1024;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub mixture: MixtureSpec,
    pub vocab: SpecialVocab,
    pub toy: ToyConfig,
    pub aliases: AliasTable,
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse_config(&text)
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, column)
}

fn parse_split(name: &str, fraction: Option<f64>, at: &str) -> Result<SplitPolicy, ConfigError> {
    let policy = match name {
        "quarter_mean" => SplitPolicy::QuarterMean,
        "full_uniform" => SplitPolicy::FullUniform,
        "fixed_fraction" => SplitPolicy::FixedFraction(
            fraction.ok_or_else(|| field(at, "fixed_fraction needs a fraction value"))?,
        ),
        other => return Err(field(at, format!("unknown split policy {other:?} (quarter_mean, full_uniform, fixed_fraction)"))),
    };
    policy.check().map_err(|e| field(at, e))?;
    Ok(policy)
}

fn parse_label(s: &str, aliases: &AliasTable, at: &str) -> Result<ParadigmLabel, ConfigError> {
    s.parse::<ParadigmLabel>()
        .ok()
        .or_else(|| aliases.resolve(s))
        .ok_or_else(|| field(at, format!("unknown denoiser label {s:?}")))
}

fn build_denoiser(raw: &RawDenoiser, i: usize, aliases: &AliasTable) -> Result<DenoiserSpec, ConfigError> {
    let at = |k: &str| format!("mixture.denoisers[{i}].{k}");
    let label = raw.label.as_deref().map(|l| parse_label(l, aliases, &at("label"))).transpose()?;
    let mut d = match (label, raw.mean_span) {
        (Some(ParadigmLabel::S), _) | (None, None) => {
            if raw.mean_span.is_some() {
                return Err(field(at("mean_span"), "S-denoisers take their span from the segment length"));
            }
            let split = parse_split(raw.split.as_deref().unwrap_or("quarter_mean"), raw.fraction, &at("split"))?;
            DenoiserSpec::sequential(split, raw.rate)
        }
        (label, Some(mu)) => {
            let mut d = DenoiserSpec::span(mu, raw.rate);
            if let Some(l) = label {
                d.label = l;
                d.paradigm = l;
            }
            if let Some(dist) = raw.span_dist {
                d.span_dist = dist;
            }
            if let Some(n) = raw.span_count {
                d.span_count = ul2_core::SpanCount::Fixed(n);
            }
            d
        }
        (Some(_), None) => return Err(field(at("mean_span"), "R and X denoisers need mean_span")),
    };
    if label == Some(ParadigmLabel::S) && (raw.span_dist.is_some() || raw.span_count.is_some()) {
        return Err(field(at("span_dist"), "S-denoisers take no span_dist or span_count"));
    }
    d.paradigm = d.label;
    Ok(d)
}

fn map_validation(e: ValidationError) -> ConfigError {
    match e {
        ValidationError::EmptyMixture => field("mixture.denoisers", "no denoisers; set `preset` or `denoisers`"),
        ValidationError::RateCountMismatch { rates, denoisers } => {
            field("mixture.rates", format!("{rates} rates for {denoisers} denoisers"))
        }
        ValidationError::NonPositiveRate { index, value } => {
            field(format!("mixture.rates[{index}]"), format!("{value} must be positive and finite"))
        }
        ValidationError::Denoiser { index, field: f, reason } => field(format!("mixture.denoisers[{index}].{f}"), reason),
        ValidationError::Field { field: f, reason } => field(format!("mixture.{f}"), reason),
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        ConfigError::Syntax { line, column, message: e.message().to_string() }
    })?;

    let mut aliases = AliasTable::default();
    for (tag, label) in &raw.aliases {
        let l = label.parse::<ParadigmLabel>().map_err(|_| field(format!("aliases.{tag}"), format!("{label:?} is not R, S or X")))?;
        aliases.insert(tag.clone(), l);
    }

    let m = &raw.mixture;
    let ib = m.inputs_budget.unwrap_or(DEFAULT_INPUTS_BUDGET);
    let tb = m.targets_budget.unwrap_or(DEFAULT_TARGETS_BUDGET);
    let mut spec = match (&m.preset, &m.denoisers) {
        (Some(_), Some(_)) => return Err(field("mixture.denoisers", "give either `preset` or `denoisers`, not both")),
        (Some(name), None) => preset(name, ib, tb).map_err(|e| field("mixture.preset", e))?,
        (None, Some(list)) => {
            let ds = list.iter().enumerate().map(|(i, d)| build_denoiser(d, i, &aliases)).collect::<Result<_, _>>()?;
            MixtureSpec::new(ds, ib, tb)
        }
        (None, None) => return Err(field("mixture.preset", "missing; set `preset` or `denoisers`")),
    };
    if let Some(r) = &m.rates {
        spec.rates = r.clone();
    }
    if let Some(v) = m.seed {
        spec.seed = v;
    }
    if let Some(v) = m.merge {
        spec.merge_examples = v;
    }
    if let Some(v) = m.assignment {
        spec.assignment = v;
    }
    if let Some(v) = m.prepend_paradigm {
        spec.prepend_paradigm = v;
    }
    if let Some(v) = m.max_chunk_len {
        spec.max_chunk_len = v;
    }
    if let Some(v) = m.merge_batch {
        spec.merge_batch = v;
    }
    if let Some(name) = &m.s_split {
        let policy = parse_split(name, m.s_fraction, "mixture.s_split")?;
        spec.denoisers.iter_mut().filter(|d| d.is_sequential()).for_each(|d| d.split = policy);
    } else if m.s_fraction.is_some() {
        return Err(field("mixture.s_fraction", "only used with s_split = \"fixed_fraction\""));
    }
    if let Some(dist) = m.span_dist {
        spec.denoisers.iter_mut().filter(|d| !d.is_sequential()).for_each(|d| d.span_dist = dist);
    }
    let mixture = spec.validate().map_err(map_validation)?;

    let num_sentinels = raw.vocab.num_sentinels.unwrap_or_else(|| sentinels_needed(&mixture));
    let vocab = SpecialVocabBuilder::new(raw.vocab.base_size, num_sentinels)
        .eos(raw.vocab.eos)
        .build()
        .map_err(|e| field("vocab", e))?;

    let toy = build_toy(raw.toy.unwrap_or_default(), &vocab)?;
    Ok(RunConfig { mixture, vocab, toy, aliases })
}

fn build_toy(raw: RawToy, vocab: &SpecialVocab) -> Result<ToyConfig, ConfigError> {
    let d = ToyConfig::default();
    let arch = match raw.arch.as_deref() {
        Some(a) => a.parse::<Arch>().map_err(|e| field("toy.arch", e))?,
        None => d.arch,
    };
    let cfg = ToyConfig {
        vocab_size: raw.vocab_size.unwrap_or(vocab.total_size() as usize),
        d_model: raw.d_model.unwrap_or(d.d_model),
        layers: raw.layers.unwrap_or(d.layers),
        heads: raw.heads.unwrap_or(d.heads),
        d_ff: raw.d_ff.unwrap_or(d.d_ff),
        max_len: raw.max_len.unwrap_or(d.max_len),
        arch,
        num_buckets: raw.num_buckets.unwrap_or(d.num_buckets),
        max_distance: raw.max_distance.unwrap_or(d.max_distance),
        seed: raw.seed.unwrap_or(d.seed),
        lr: raw.lr.unwrap_or(d.lr),
        momentum: raw.momentum.unwrap_or(d.momentum),
        batch_size: raw.batch_size.unwrap_or(d.batch_size),
    };
    if cfg.vocab_size < vocab.total_size() as usize {
        return Err(field("toy.vocab_size", format!("{} is smaller than the mixture vocabulary {}", cfg.vocab_size, vocab.total_size())));
    }
    cfg.check().map_err(|e| field("toy", e))?;
    Ok(cfg)
}
