use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use ul2_cli::commands::{self, CorpusFormat, CorruptArgs, MixArgs, TrainArgs};
use ul2_cli::load_config;
use ul2_core::{Encoding, SpanLengthDist, SplitPolicy};
use ul2_toy::Arch;

#[derive(Parser)]
#[command(name = "ul2", version, about = "Generate, check and train on mixture-of-denoisers examples")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Jsonl,
    Bin,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusFormatArg {
    Auto,
    Jsonl,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Encdec,
    Prefixdec,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistArg {
    Partition,
    Normal,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    QuarterMean,
    FullUniform,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a corpus into a stream of denoising examples.
    Mix {
        #[arg(long)]
        config: PathBuf,
        /// JSON Lines of {"id", "tokens"} (.jsonl) or UTF-8 text, one record per line.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        corpus_format: CorpusFormatArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: FormatArg,
        /// Stop after this many examples.
        #[arg(long)]
        limit: Option<usize>,
        /// Worker threads; output bytes do not depend on this.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Corrupt stdin lines with one denoiser and print the examples.
    Corrupt {
        /// R, S, X or a mode tag such as [NLG].
        #[arg(long)]
        denoiser: String,
        #[arg(long, default_value_t = 3.0)]
        mu: f64,
        #[arg(long, default_value_t = 0.15)]
        rate: f64,
        /// Segment length; longer lines are split.
        #[arg(long, default_value_t = 512)]
        len: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, value_enum, default_value = "partition")]
        span_dist: DistArg,
        #[arg(long, value_enum, default_value = "quarter-mean")]
        split: SplitArg,
        #[arg(long, default_value_t = ul2_core::format::BYTE_VOCAB_SIZE)]
        base_size: u32,
        /// Defaults to max(100, spans a --len segment can hold).
        #[arg(long)]
        sentinels: Option<u32>,
        /// Print sentinel-marked text instead of JSON.
        #[arg(long)]
        render: bool,
    },
    /// Measure a stream and check it against its mixture; exits 1 on failure.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Treat unmeasurable findings as failures.
        #[arg(long)]
        strict: bool,
    },
    /// Pretty-print the first examples of a stream.
    Inspect {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        n: usize,
        /// Show base tokens as byte-tokenizer text.
        #[arg(long)]
        detok: bool,
        /// Vocabulary layout; defaults to the byte vocabulary with 100 sentinels.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the toy transformer on a stream and write a loss trace.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, value_enum)]
        arch: Option<ArchArg>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// List the named mixtures.
    Presets {
        #[arg(long)]
        json: bool,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    let stdout = io::stdout();
    match cli.command {
        Command::Mix { config, corpus, corpus_format, out, format, limit, workers } => {
            let args = MixArgs {
                config,
                corpus,
                corpus_format: match corpus_format {
                    CorpusFormatArg::Auto => CorpusFormat::Auto,
                    CorpusFormatArg::Jsonl => CorpusFormat::Jsonl,
                    CorpusFormatArg::Text => CorpusFormat::Text,
                },
                out,
                encoding: match format {
                    FormatArg::Jsonl => Encoding::Jsonl,
                    FormatArg::Bin => Encoding::Binary,
                },
                limit,
                workers,
            };
            let s = commands::mix(&args)?;
            eprintln!("records={} examples={} dropped_segments={} stopped_early={}", s.records, s.examples, s.dropped_segments, s.stopped_early);
        }
        Command::Corrupt { denoiser, mu, rate, len, seed, span_dist, split, base_size, sentinels, render } => {
            let args = CorruptArgs {
                denoiser,
                mu,
                rate,
                len,
                seed,
                span_dist: match span_dist {
                    DistArg::Partition => SpanLengthDist::Partition,
                    DistArg::Normal => SpanLengthDist::Normal,
                    DistArg::Uniform => SpanLengthDist::Uniform,
                },
                split: match split {
                    SplitArg::QuarterMean => SplitPolicy::QuarterMean,
                    SplitArg::FullUniform => SplitPolicy::FullUniform,
                },
                base_size,
                num_sentinels: sentinels,
                render,
            };
            commands::corrupt(&args, io::stdin().lock(), BufWriter::new(stdout.lock()))?;
        }
        Command::Stats { input, config, strict } => {
            if !commands::stats(&input, &config, strict, BufWriter::new(stdout.lock()))? {
                eprintln!("stats: verification failed");
                return Ok(ExitCode::from(1));
            }
        }
        Command::Inspect { input, n, detok, config } => {
            let vocab = match config {
                Some(c) => load_config(&c)?.vocab,
                None => ul2_core::SpecialVocabBuilder::new(ul2_core::format::BYTE_VOCAB_SIZE, 100).build()?,
            };
            commands::inspect(&input, n, detok, &vocab, BufWriter::new(stdout.lock()))?;
        }
        Command::TrainToy { config, input, steps, arch, trace } => {
            let args = TrainArgs {
                config,
                examples: input,
                steps,
                arch: arch.map(|a| match a {
                    ArchArg::Encdec => Arch::EncoderDecoder,
                    ArchArg::Prefixdec => Arch::PrefixLmDecoder,
                }),
                trace,
            };
            let losses = commands::train(&args)?;
            println!("steps={} initial_loss={:.6} final_loss={:.6}", losses.len(), losses[0], losses[losses.len() - 1]);
        }
        Command::Presets { json } => commands::presets(json, BufWriter::new(stdout.lock()))?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
