use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use ul2_core::format::{byte_detokenize, byte_tokenize, read_corpus_jsonl, read_corpus_text, BYTE_OFFSET};
use ul2_core::mixture::corrupt_segment;
use ul2_core::span_corruption::placed_worst_case;
use ul2_core::{
    catalog, measure, preset, verify, AliasTable, AssemblySummary, CorpusRecord, DenoiserSpec, Encoding, Example,
    ExampleReader, ExampleRecord, ExampleWriter, MixtureSpec, ParadigmLabel, PathLabel, Pipeline, RngStream,
    SpanLengthDist, SpecialVocab, SpecialVocabBuilder, SplitPolicy, Status, TokenId, Tolerances,
};
use ul2_toy::{train_toy, write_trace, Arch};

use crate::config::load_config;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    Auto,
    Jsonl,
    Text,
}

pub fn read_corpus(path: &Path, format: CorpusFormat, base_size: u32) -> Result<Vec<CorpusRecord>> {
    let file = File::open(path).with_context(|| format!("opening corpus {}", path.display()))?;
    let reader = BufReader::new(file);
    let jsonl = match format {
        CorpusFormat::Jsonl => true,
        CorpusFormat::Text => false,
        CorpusFormat::Auto => matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl" | "json")),
    };
    let records = if jsonl { read_corpus_jsonl(reader, base_size)? } else { read_corpus_text(reader)? };
    Ok(records)
}

pub fn read_example_file(path: &Path) -> Result<Vec<ExampleRecord>> {
    let file = File::open(path).with_context(|| format!("opening examples {}", path.display()))?;
    let reader = ExampleReader::new(BufReader::new(file))?;
    reader.map(|r| r.map_err(anyhow::Error::from)).collect::<Result<Vec<_>>>().with_context(|| format!("reading {}", path.display()))
}

pub struct MixArgs {
    pub config: PathBuf,
    pub corpus: PathBuf,
    pub corpus_format: CorpusFormat,
    pub out: PathBuf,
    pub encoding: Encoding,
    pub limit: Option<usize>,
    pub workers: usize,
}

pub fn mix(args: &MixArgs) -> Result<AssemblySummary> {
    let cfg = load_config(&args.config)?;
    let corpus = read_corpus(&args.corpus, args.corpus_format, cfg.vocab.base_size())?;
    let pipeline = Pipeline::new(&cfg.mixture, &cfg.vocab)?.with_workers(args.workers);
    let file = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut writer = ExampleWriter::new(BufWriter::new(file), args.encoding)?;
    let limit = args.limit.unwrap_or(usize::MAX);
    let mut failure = None;
    let labels: Vec<ParadigmLabel> = cfg.mixture.denoisers.iter().map(|d| d.label).collect();
    let summary = if limit == 0 {
        AssemblySummary::default()
    } else {
        pipeline.run(corpus, |ex| {
            if let Err(e) = writer.write(&ExampleRecord::from_example(&ex, labels[ex.denoiser_index])) {
                failure = Some(e);
                return ControlFlow::Break(());
            }
            if writer.written() >= limit {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })?
    };
    if let Some(e) = failure {
        return Err(e).context("writing examples");
    }
    writer.finish()?;
    Ok(summary)
}

pub struct CorruptArgs {
    pub denoiser: String,
    pub mu: f64,
    pub rate: f64,
    pub len: usize,
    pub seed: u64,
    pub span_dist: SpanLengthDist,
    pub split: SplitPolicy,
    pub base_size: u32,
    /// Defaults to the larger of 100 and the most spans one segment can hold.
    pub num_sentinels: Option<u32>,
    pub render: bool,
}

fn corrupt_denoiser(args: &CorruptArgs, aliases: &AliasTable) -> Result<DenoiserSpec> {
    let label = args
        .denoiser
        .parse::<ParadigmLabel>()
        .ok()
        .or_else(|| aliases.resolve(&args.denoiser))
        .with_context(|| format!("unknown denoiser {:?}; use R, S, X or a mode tag", args.denoiser))?;
    let d = match label {
        ParadigmLabel::S => DenoiserSpec::sequential(args.split, args.rate),
        l => {
            let mut d = DenoiserSpec::span(args.mu, args.rate).with_dist(args.span_dist);
            d.label = l;
            d.paradigm = l;
            d
        }
    };
    MixtureSpec::new(vec![d.clone()], args.len.max(2), args.len.max(2) * 2 + 2).validate()?;
    Ok(d)
}

fn parse_line_tokens(line: &str, vocab: &SpecialVocab) -> Result<Vec<TokenId>> {
    let t = line.trim_start();
    if let Some(ids) = t.starts_with('[').then(|| serde_json::from_str::<Vec<u32>>(t).ok()).flatten() {
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab.base_size()) {
            bail!("token {bad} is outside the base vocabulary of size {}", vocab.base_size());
        }
        Ok(ids.into_iter().map(TokenId).collect())
    } else {
        Ok(byte_tokenize(line))
    }
}

/// Corrupt each stdin line, split into segments of `len` tokens. Lines
/// that look like JSON arrays are read as token ids, anything else is
/// byte-tokenized.
pub fn corrupt<R: BufRead, W: Write>(args: &CorruptArgs, input: R, mut out: W) -> Result<usize> {
    if args.len < 2 {
        bail!("--len must be at least 2");
    }
    let d = corrupt_denoiser(args, &AliasTable::default())?;
    let needed = if d.is_sequential() { 1 } else { placed_worst_case(args.len, args.rate).2 as u32 };
    let vocab = SpecialVocabBuilder::new(args.base_size, args.num_sentinels.unwrap_or(needed.max(100))).build()?;
    let root = RngStream::new(args.seed);
    let mut written = 0;
    for (line_no, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let toks = parse_line_tokens(&line, &vocab)?;
        for (s, segment) in toks.chunks(args.len).enumerate() {
            if segment.len() < 2 {
                continue;
            }
            let mut rng = root.derive_all(&[PathLabel::Record(line_no as u64), PathLabel::Segment(s as u64)]);
            let stream = rng.key64();
            let body = corrupt_segment(segment, &d, &vocab, &mut rng).map_err(anyhow::Error::msg)?;
            let ex = Example {
                inputs: body.inputs,
                targets: body.targets,
                denoiser_index: 0,
                provenance: ul2_core::Provenance { record_id: line_no as u64, offset: (s * args.len) as u64, stream },
            };
            if args.render {
                writeln!(out, "inputs:  {}", render(&ex.inputs, &vocab, true))?;
                writeln!(out, "targets: {}", render(&ex.targets, &vocab, true))?;
            } else {
                serde_json::to_writer(&mut out, &ExampleRecord::from_example(&ex, d.label))?;
                writeln!(out)?;
            }
            written += 1;
        }
    }
    out.flush()?;
    Ok(written)
}

/// Render ids with special tokens as markers. With `detok`, runs of base
/// tokens are shown as byte-tokenizer text.
pub fn render(ids: &[TokenId], vocab: &SpecialVocab, detok: bool) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut run: Vec<TokenId> = Vec::new();
    let flush = |run: &mut Vec<TokenId>, parts: &mut Vec<String>| {
        if !run.is_empty() {
            parts.push(format!("{:?}", byte_detokenize(run)));
            run.clear();
        }
    };
    for &id in ids {
        let plain = vocab.render(id);
        let is_text = detok && id.0 >= BYTE_OFFSET && id.0 < vocab.base_size() && id != vocab.eos_id();
        if is_text {
            run.push(id);
        } else {
            flush(&mut run, &mut parts);
            parts.push(plain);
        }
    }
    flush(&mut run, &mut parts);
    parts.join(" ")
}

pub fn inspect<W: Write>(path: &Path, n: usize, detok: bool, vocab: &SpecialVocab, mut out: W) -> Result<()> {
    let file = File::open(path).with_context(|| format!("opening examples {}", path.display()))?;
    let reader = ExampleReader::new(BufReader::new(file))?;
    for (i, rec) in reader.take(n).enumerate() {
        let rec = rec?;
        let ex = rec.to_example();
        writeln!(
            out,
            "#{i} {} denoiser={} record={} offset={} stream={:016x} ({} inputs, {} targets)",
            rec.denoiser,
            rec.denoiser_index,
            rec.record_id,
            rec.offset,
            rec.stream,
            ex.inputs.len(),
            ex.targets.len()
        )?;
        writeln!(out, "  inputs:  {}", render(&ex.inputs, vocab, detok))?;
        writeln!(out, "  targets: {}", render(&ex.targets, vocab, detok))?;
    }
    out.flush()?;
    Ok(())
}

/// Measure and verify a stream; returns whether every finding passed.
/// With `strict`, findings with nothing to measure count as failures.
pub fn stats<W: Write>(examples: &Path, config: &Path, strict: bool, mut out: W) -> Result<bool> {
    let cfg = load_config(config)?;
    let records = read_example_file(examples)?;
    let k = cfg.mixture.denoisers.len();
    let examples: Vec<Example> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.denoiser_index as usize >= k {
                bail!("example {i} names denoiser {} but the mixture has {k}", r.denoiser_index);
            }
            Ok(r.to_example())
        })
        .collect::<Result<_>>()?;
    let report = measure(&examples, &cfg.vocab, &cfg.mixture);
    let findings = verify(&report, &cfg.mixture, &Tolerances::default());
    serde_json::to_writer_pretty(&mut out, &report.document(Some(&findings)))?;
    writeln!(out)?;
    out.flush()?;
    Ok(findings.iter().all(|f| f.status == Status::Pass || (!strict && f.status == Status::Absent)))
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub examples: PathBuf,
    pub steps: usize,
    pub arch: Option<Arch>,
    pub trace: Option<PathBuf>,
}

pub fn train(args: &TrainArgs) -> Result<Vec<f64>> {
    let cfg = load_config(&args.config)?;
    let mut toy = cfg.toy.clone();
    if let Some(a) = args.arch {
        toy.arch = a;
    }
    let examples: Vec<Example> = read_example_file(&args.examples)?.iter().map(|r| r.to_example()).collect();
    let outcome = train_toy(&toy, &examples, args.steps, toy.lr)?;
    if let Some(path) = &args.trace {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_trace(BufWriter::new(file), &outcome.losses)?;
    }
    Ok(outcome.losses)
}

#[derive(Serialize)]
pub struct PresetDenoiser {
    pub label: ParadigmLabel,
    /// `null` for a span of a quarter of the segment length.
    pub mean_span: Option<f64>,
    pub rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Serialize)]
pub struct PresetEntry {
    pub name: &'static str,
    pub provenance: &'static str,
    pub summary: &'static str,
    pub denoisers: Vec<PresetDenoiser>,
    pub rates: Vec<f64>,
}

pub fn preset_entries() -> Result<Vec<PresetEntry>> {
    catalog()
        .into_iter()
        .map(|info| {
            let spec = preset(info.name, 512, 1024)?.validate()?;
            let denoisers = spec
                .denoisers
                .iter()
                .map(|d| PresetDenoiser {
                    label: d.label,
                    mean_span: d.mean_span.tokens(),
                    rate: d.rate,
                    split: d.is_sequential().then(|| d.split.to_string()),
                })
                .collect();
            Ok(PresetEntry { name: info.name, provenance: info.provenance, summary: info.summary, denoisers, rates: spec.rates })
        })
        .collect()
}

pub fn presets<W: Write>(json: bool, mut out: W) -> Result<()> {
    let entries = preset_entries()?;
    if json {
        serde_json::to_writer_pretty(&mut out, &entries)?;
        writeln!(out)?;
    } else {
        for e in &entries {
            writeln!(out, "{:<7} {}", e.name, e.provenance)?;
            for (d, r) in e.denoisers.iter().zip(&e.rates) {
                let mu = d.mean_span.map_or("L/4".to_string(), |m| m.to_string());
                let split = d.split.as_deref().map(|s| format!(" split={s}")).unwrap_or_default();
                writeln!(out, "        {} mu={mu} r={}{split} weight={r:.4}", d.label, d.rate)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
