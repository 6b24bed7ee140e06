//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the PASS/FAIL lines are always shown.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use ul2_core::format::byte_tokenize;
use ul2_core::mixture::{assign_denoiser, corrupt_segment};
use ul2_core::s_denoiser::{make_prefix_example, sample_target_length};
use ul2_core::span_corruption::round_half_away;
use ul2_core::{
    apply_sentinels, assemble, compute_segment_lengths, preset, reconstruct, sample_noise_mask, AliasTable,
    AssignmentMode, CorpusRecord, Example, ExampleRecord, ParadigmLabel, PathLabel, RngStream, SpanCount,
    SpanLengthDist, SpecialVocab, SpecialVocabBuilder, SplitPolicy, TokenId,
};
use ul2_toy::{grad_check, prepare_tokens, train_toy, Arch, ToyConfig, ToyModel};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Byte vocabulary with enough sentinels for every ul2 denoiser at 512.
fn vocab() -> SpecialVocab {
    vocab_with(128)
}

fn vocab_with(sentinels: u32) -> SpecialVocab {
    SpecialVocabBuilder::new(ul2_core::format::BYTE_VOCAB_SIZE, sentinels).build().unwrap()
}

fn random_tokens(rng: &mut impl Rng, len: usize, base: u32) -> Vec<TokenId> {
    (0..len).map(|_| TokenId(rng.random_range(3..base))).collect()
}

/// Split a span-corruption example into its noise spans, from the targets.
fn target_spans(targets: &[TokenId], vocab: &SpecialVocab) -> Vec<usize> {
    let mut spans = Vec::new();
    for &t in targets {
        if vocab.is_sentinel(t) {
            spans.push(0);
        } else if t != vocab.eos_id() {
            *spans.last_mut().expect("targets start with a sentinel") += 1;
        }
    }
    spans
}

fn c1_presets() -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_ul2")).args(["presets", "--json"]).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("presets exited with {}", out.status))?;
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let ul2 = doc.as_array().and_then(|a| a.iter().find(|p| p["name"] == "ul2")).ok_or("no ul2 preset listed")?;
    let golden: [(&str, Option<f64>, f64); 7] = [
        ("R", Some(3.0), 0.15),
        ("R", Some(8.0), 0.15),
        ("S", None, 0.25),
        ("X", Some(3.0), 0.5),
        ("X", Some(8.0), 0.5),
        ("X", Some(64.0), 0.15),
        ("X", Some(64.0), 0.5),
    ];
    let got: Vec<(String, Option<f64>, f64)> = ul2["denoisers"]
        .as_array()
        .ok_or("denoisers missing")?
        .iter()
        .map(|d| (d["label"].as_str().unwrap_or("?").to_string(), d["mean_span"].as_f64(), d["rate"].as_f64().unwrap_or(f64::NAN)))
        .collect();
    let want: Vec<(String, Option<f64>, f64)> = golden.iter().map(|&(l, m, r)| (l.to_string(), m, r)).collect();
    ensure(got == want, || format!("ul2 denoisers {got:?}"))?;
    let rates: Vec<f64> = ul2["rates"].as_array().ok_or("rates missing")?.iter().filter_map(|r| r.as_f64()).collect();
    ensure(rates.len() == 7 && rates.iter().all(|r| (r - 1.0 / 7.0).abs() < 1e-12), || format!("rates {rates:?}"))?;
    Ok("7 denoisers, uniform rates".into())
}

/// Largest raw length whose corrupted inputs fit the budget, by scanning
/// every candidate.
fn segment_oracle(budget: usize, rate: f64, mu: f64) -> Option<(usize, usize, usize)> {
    let lengths = |t: usize| {
        let noise = round_half_away(t as f64 * rate) as usize;
        let spans = (round_half_away(noise as f64 / mu) as usize).max(1);
        (t - noise + spans + 1, noise + spans + 1)
    };
    (2..=4 * budget + 16).filter(|&t| lengths(t).0 <= budget).max().map(|t| (t, lengths(t).0, lengths(t).1))
}

fn c2_segment_oracle() -> Outcome {
    let got = compute_segment_lengths(512, 0.15, 3.0).map_err(|e| e.to_string())?;
    let pinned = (got.raw_tokens_length, got.inputs_length, got.targets_length);
    ensure(pinned == (568, 512, 114), || format!("(512, 0.15, 3) gave {pinned:?}"))?;
    ensure(segment_oracle(512, 0.15, 3.0) == Some((568, 512, 114)), || "oracle disagrees with pinned case".into())?;
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let budget = rng.random_range(16..=1024);
        let rate = rng.random_range(0.05..=0.6);
        let mu = rng.random_range(1.0..=64.0);
        let want = segment_oracle(budget, rate, mu);
        let got = compute_segment_lengths(budget, rate, mu).ok().map(|s| (s.raw_tokens_length, s.inputs_length, s.targets_length));
        ensure(got == want, || format!("({budget}, {rate}, {mu}): got {got:?}, oracle {want:?}"))?;
    }
    Ok("1000 random triples and (512, 0.15, 3) -> (568, 512, 114)".into())
}

fn c3_rates() -> Outcome {
    let v = vocab();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let measure = |d: &ul2_core::DenoiserSpec, seed: u64, rng: &mut ChaCha20Rng| {
        let root = RngStream::new(seed);
        let (mut rate_sum, mut noise, mut spans) = (0.0, 0usize, 0usize);
        for i in 0..10_000u64 {
            let tokens = random_tokens(rng, 512, v.base_size());
            let body = corrupt_segment(&tokens, d, &v, &mut root.derive(PathLabel::Record(i))).unwrap();
            let s = target_spans(&body.targets, &v);
            let n: usize = s.iter().sum();
            rate_sum += n as f64 / 512.0;
            noise += n;
            spans += s.len();
        }
        (rate_sum / 10_000.0, noise as f64 / spans as f64)
    };
    let t5 = preset("t5-sc", 512, 1024).unwrap();
    let (rate, span) = measure(&t5.denoisers[0], 31, &mut rng);
    ensure((rate - 0.15).abs() <= 0.01, || format!("t5-sc mean rate {rate}"))?;
    ensure((span - 3.0).abs() <= 0.3, || format!("t5-sc mean span {span}"))?;
    let ul2 = preset("ul2", 512, 1024).unwrap();
    let mut detail = format!("t5-sc rate={rate:.4} span={span:.3}");
    for d in ul2.denoisers.iter().filter(|d| d.label == ParadigmLabel::X && d.rate == 0.5 && d.mean_span.tokens().unwrap() < 64.0) {
        let (r, _) = measure(d, 37, &mut rng);
        ensure((r - 0.5).abs() <= 0.02, || format!("{} mean rate {r}", d.describe()))?;
        detail += &format!(" {}={r:.4}", d.describe());
    }
    Ok(detail)
}

fn c4_round_trip() -> Outcome {
    // Up to 300 spans fit in 600 tokens.
    let v = vocab_with(301);
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let root = RngStream::new(44);
    let dists = [SpanLengthDist::Partition, SpanLengthDist::Normal, SpanLengthDist::Uniform];
    let mut per = [0usize; 3];
    for i in 0..10_000u64 {
        let which = i as usize % 3;
        let len = rng.random_range(2..=600);
        let mu = rng.random_range(1.0..=64.0);
        let rate = rng.random_range(0.05..0.95);
        let tokens = random_tokens(&mut rng, len, v.base_size());
        let mask = sample_noise_mask(len, rate, mu, dists[which], SpanCount::Derived, &mut root.derive(PathLabel::Record(i)))
            .map_err(|e| format!("pair {i}: {e}"))?;
        let body = apply_sentinels(&tokens, &mask, &v).map_err(|e| format!("pair {i}: {e}"))?;
        let back = reconstruct(&body.inputs, &body.targets, &v).map_err(|e| format!("pair {i}: {e}"))?;
        ensure(back == tokens, || format!("pair {i} ({len}, {rate}, {mu}, {:?}) did not round-trip", dists[which]))?;
        per[which] += 1;
    }
    Ok(format!("10000/10000 (partition {}, normal {}, uniform {})", per[0], per[1], per[2]))
}

fn c5_s_law() -> Outcome {
    let v = vocab();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let root = RngStream::new(55);
    let mut frac = 0.0;
    for i in 0..10_000u64 {
        let tokens = random_tokens(&mut rng, 512, v.base_size());
        let u = sample_target_length(512, SplitPolicy::QuarterMean, &mut root.derive(PathLabel::Record(i))).map_err(|e| e.to_string())?;
        frac += u as f64 / 512.0;
        let body = make_prefix_example(&tokens, u, &v, true).map_err(|e| e.to_string())?;
        // Everything after the cut lands in the targets, in order, and no
        // raw token follows the targets' content in the inputs.
        let content: Vec<TokenId> = body.targets.iter().copied().filter(|&t| !v.is_sentinel(t) && t != v.eos_id()).collect();
        let prefix: Vec<TokenId> = body.inputs.iter().copied().filter(|&t| !v.is_sentinel(t)).collect();
        ensure(content.as_slice() == &tokens[512 - u..], || format!("draw {i}: targets are not the suffix"))?;
        ensure(prefix.as_slice() == &tokens[..512 - u], || format!("draw {i}: inputs are not the prefix"))?;
        ensure(body.inputs.last().is_some_and(|&t| v.is_sentinel(t)), || format!("draw {i}: inputs continue past the cut"))?;
    }
    let mean = frac / 10_000.0;
    ensure((mean - 0.25).abs() <= 0.01, || format!("mean target fraction {mean}"))?;
    Ok(format!("mean target fraction {mean:.4}, suffix property 10000/10000"))
}

fn c6_proportions() -> Outcome {
    let spec = preset("ul2", 512, 1024).unwrap().validate().unwrap();
    let root = RngStream::new(spec.seed);
    let n = 100_000u64;
    let mut counts = [0u64; 7];
    for i in 0..n {
        counts[assign_denoiser(&spec, &spec.rates, i, &root)] += 1;
    }
    let worst = counts.iter().map(|&c| (c as f64 / n as f64 - 1.0 / 7.0).abs()).fold(0.0, f64::max);
    ensure(worst < 0.02, || format!("counts {counts:?}"))?;
    let shard = ul2_core::MixtureSpec { assignment: AssignmentMode::Shard, ..spec.clone() };
    let mut sc = [0u64; 7];
    for i in 0..n {
        sc[assign_denoiser(&shard, &shard.rates, i, &root)] += 1;
    }
    let want: Vec<u64> = (0..7).map(|k| (n - k).div_ceil(7)).collect();
    ensure(sc.to_vec() == want, || format!("shard counts {sc:?}, want {want:?}"))?;
    Ok(format!("max deviation {worst:.4}; shard counts {sc:?}"))
}

fn run_mix(dir: &Path, config: &Path, corpus: &Path, out: &str, format: &str, workers: usize) -> Result<Vec<u8>, String> {
    let out_path = dir.join(out);
    let status = Command::new(env!("CARGO_BIN_EXE_ul2"))
        .args(["mix", "--config"])
        .arg(config)
        .arg("--corpus")
        .arg(corpus)
        .arg("--out")
        .arg(&out_path)
        .args(["--format", format, "--workers", &workers.to_string()])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || format!("mix failed: {}", String::from_utf8_lossy(&status.stderr)))?;
    std::fs::read(&out_path).map_err(|e| e.to_string())
}

fn c7_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("mix.toml");
    std::fs::write(&config, "[mixture]\npreset = \"ul2\"\ninputs_budget = 128\ntargets_budget = 256\nseed = 7\n").map_err(|e| e.to_string())?;
    let corpus = dir.path().join("corpus.jsonl");
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut text = String::new();
    for id in 0..3000u64 {
        let len = rng.random_range(1..400);
        let toks: Vec<u32> = (0..len).map(|_| rng.random_range(3..259)).collect();
        text += &serde_json::json!({ "id": id * 3 + 1, "tokens": toks }).to_string();
        text.push('\n');
    }
    std::fs::write(&corpus, text).map_err(|e| e.to_string())?;
    let mut sizes = Vec::new();
    for format in ["jsonl", "bin"] {
        let a = run_mix(dir.path(), &config, &corpus, "a", format, 1)?;
        let b = run_mix(dir.path(), &config, &corpus, "b", format, 1)?;
        ensure(!a.is_empty() && a == b, || format!("{format}: repeated runs differ"))?;
        for workers in [2, 5, 8] {
            let c = run_mix(dir.path(), &config, &corpus, "c", format, workers)?;
            ensure(a == c, || format!("{format}: {workers} workers differ from 1"))?;
        }
        sizes.push(format!("{format} {} bytes", a.len()));
    }
    Ok(format!("identical across reruns and 1/2/5/8 workers ({})", sizes.join(", ")))
}

fn small_toy(arch: Arch, vocab_size: usize) -> ToyConfig {
    ToyConfig { vocab_size, d_model: 16, layers: 2, heads: 2, d_ff: 24, max_len: 256, arch, seed: 8, ..ToyConfig::default() }
}

fn c8_masks() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let vocab_size = 40;
    let mut probes = 0;
    for arch in Arch::ALL {
        let m = ToyModel::new(small_toy(arch, vocab_size)).map_err(|e| e.to_string())?;
        for shape in 0..100 {
            let in_len = rng.random_range(0..10);
            let tgt_len = rng.random_range(1..10);
            let inputs: Vec<usize> = (0..in_len).map(|_| rng.random_range(3..vocab_size)).collect();
            let targets: Vec<usize> = (0..tgt_len).map(|_| rng.random_range(3..vocab_size)).collect();
            let base = prepare_tokens(&m.config, &inputs, &targets).map_err(|e| e.to_string())?;
            let logits = m.forward_prepared(std::slice::from_ref(&base)).map_err(|e| e.to_string())?.logits.remove(0);
            // Perturb each decoder position; every query that may not see it
            // must keep its logits bit for bit.
            for j in 0..base.dec_tokens.len() {
                let mut moved = base.clone();
                moved.dec_tokens[j] = 3 + (moved.dec_tokens[j] + 1) % (vocab_size - 3);
                let after = m.forward_prepared(&[moved]).map_err(|e| e.to_string())?.logits.remove(0);
                for q in 0..base.dec_tokens.len() {
                    let visible = j < base.prefix_len || j <= q;
                    if !visible {
                        probes += 1;
                        ensure(logits.row(q) == after.row(q), || format!("{arch} shape {shape}: query {q} saw position {j}"))?;
                    }
                }
            }
            if arch == Arch::PrefixLmDecoder && in_len > 0 {
                let mut relabeled = base.clone();
                for l in relabeled.labels.iter_mut().take(in_len) {
                    *l = rng.random_range(0..vocab_size);
                }
                let a = m.forward_prepared(&[base]).map_err(|e| e.to_string())?.loss;
                let b = m.forward_prepared(&[relabeled]).map_err(|e| e.to_string())?.loss;
                ensure(a == b, || format!("shape {shape}: input labels changed the loss ({a} vs {b})"))?;
            }
        }
        let mut z = m.clone();
        z.zero_output_projection();
        let ex = Example {
            inputs: vec![TokenId(5), TokenId(6)],
            targets: vec![TokenId(7), TokenId(8), TokenId(9)],
            denoiser_index: 0,
            provenance: Default::default(),
        };
        let loss = z.forward_loss(&[ex]).map_err(|e| e.to_string())?.loss;
        ensure((loss - (vocab_size as f64).ln()).abs() < 1e-10, || format!("{arch}: uniform loss {loss}"))?;
    }
    Ok(format!("{probes} masked probes unchanged over 100 shapes per arch; uniform loss = ln V"))
}

/// A short ul2 stream over a small text corpus.
fn ul2_examples(text: &str, records: usize) -> (Vec<Example>, SpecialVocab, ul2_core::MixtureSpec) {
    let v = vocab();
    let spec = preset("ul2", 512, 1024).unwrap();
    let toks = byte_tokenize(text);
    let per = toks.len().div_ceil(records);
    let corpus = toks.chunks(per).enumerate().map(|(i, c)| CorpusRecord { id: i as u64, tokens: c.to_vec() }).collect();
    let (examples, _) = assemble(&spec, &v, corpus).unwrap();
    (examples, v, spec)
}

fn c9_grad_check() -> Outcome {
    let text = "pack my box with five dozen liquor jugs; sphinx of black quartz, judge my vow. ".repeat(12);
    let (examples, v, spec) = ul2_examples(&text, 96);
    // One short example per paradigm label.
    let mut batch = Vec::new();
    for label in ParadigmLabel::ALL {
        let pick = examples
            .iter()
            .filter(|e| spec.denoisers[e.denoiser_index].label == label)
            .min_by_key(|e| e.inputs.len() + e.targets.len())
            .ok_or_else(|| format!("no {label} example"))?;
        batch.push(pick.clone());
    }
    let mut detail = Vec::new();
    for arch in Arch::ALL {
        let m = ToyModel::new(small_toy(arch, v.total_size() as usize)).map_err(|e| e.to_string())?;
        let prepared: Vec<_> = batch.iter().map(|e| m.prepare(e)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let r = grad_check(&m, &prepared, 1e-5, 240, 9).map_err(|e| e.to_string())?;
        ensure(r.max_rel_error < 1e-4, || format!("{arch}: max relative error {} at {}", r.max_rel_error, r.worst))?;
        detail.push(format!("{arch} {:.2e}", r.max_rel_error));
    }
    Ok(format!("max relative error {} over {} sampled entries, batch with R/S/X", detail.join(", "), 240))
}

fn c10_descent() -> Outcome {
    let text = "the cat sat on the mat while a small dog slept by the warm door.";
    let text = &text[..64.min(text.len())];
    let text = format!("{text:<64}");
    let (examples, v, _) = ul2_examples(&text, 8);
    let mut detail = Vec::new();
    for arch in Arch::ALL {
        let cfg = ToyConfig { vocab_size: v.total_size() as usize, arch, batch_size: examples.len(), ..ToyConfig::default() };
        let out = train_toy(&cfg, &examples, 500, cfg.lr).map_err(|e| e.to_string())?;
        let first = out.losses[0];
        let hit = out.losses.iter().position(|&l| l < 0.5 * first);
        ensure(hit.is_some(), || format!("{arch}: loss never halved, {first} -> {}", out.losses[499]))?;
        detail.push(format!("{arch} {first:.3}->{:.4} halved at step {}", out.losses[499], hit.unwrap()));
    }
    Ok(format!("{} examples; {}", examples.len(), detail.join("; ")))
}

fn c11_mode_tokens() -> Outcome {
    let text = "mode tokens lead every example so the model knows the task. ".repeat(400);
    let (examples, v, spec) = ul2_examples(&text, 800);
    for (i, e) in examples.iter().enumerate() {
        let label = spec.denoisers[e.denoiser_index].label;
        let first = e.inputs.first().copied();
        ensure(first == v.paradigm_id(label), || format!("example {i} starts with {first:?}, denoiser {label}"))?;
        let rec = ExampleRecord::from_example(e, label);
        ensure(rec.label().ok() == v.paradigm_label(e.inputs[0]), || format!("example {i}: record label mismatch"))?;
    }
    let seen: std::collections::BTreeSet<_> = examples.iter().map(|e| spec.denoisers[e.denoiser_index].label).collect();
    ensure(seen.len() == 3, || format!("labels seen {seen:?}"))?;
    let aliases = AliasTable::default();
    for (tag, want) in [("[NLU]", ParadigmLabel::R), ("[NLG]", ParadigmLabel::X), ("[S2S]", ParadigmLabel::S)] {
        ensure(aliases.resolve(tag) == Some(want), || format!("{tag} resolves to {:?}", aliases.resolve(tag)))?;
    }
    Ok(format!("{}/{} examples lead with their paradigm id; [NLU]->R [NLG]->X [S2S]->S", examples.len(), examples.len()))
}

fn main() {
    let criteria: [(u32, &str, Duration, fn() -> Outcome); 11] = [
        (1, "preset fidelity", Duration::from_secs(1), c1_presets),
        (2, "segment-length oracle", Duration::from_secs(5), c2_segment_oracle),
        (3, "corruption-rate certification", Duration::from_secs(30), c3_rates),
        (4, "round-trip", Duration::from_secs(30), c4_round_trip),
        (5, "S-denoiser law", Duration::from_secs(10), c5_s_law),
        (6, "mixture proportions", Duration::from_secs(30), c6_proportions),
        (7, "determinism", Duration::from_secs(60), c7_determinism),
        (8, "mask/loss correctness", Duration::from_secs(60), c8_masks),
        (9, "gradient check", Duration::from_secs(120), c9_grad_check),
        (10, "descent", Duration::from_secs(300), c10_descent),
        (11, "mode tokens", Duration::from_secs(10), c11_mode_tokens),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, name, limit, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|a| name.contains(a.as_str()) || a == &n.to_string()) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let took = start.elapsed();
        let result = match result {
            Ok(d) if took > limit => Err(format!("{d}; took {took:.2?}, limit {limit:?}")),
            r => r,
        };
        match result {
            Ok(detail) => println!("PASS criterion {n:>2} {name} ({took:.2?}): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {n:>2} {name} ({took:.2?}): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
