//! Command-line front end. Machine-readable results go to stdout as JSON
//! lines or to CSV files; diagnostics go to stderr.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::analysis::{
    self, bench_heads, empirical_logprob_matrix, pairwise_kld_rows, rank_report, spectrum_curve,
    subsample_rows, BenchConfig, RankMeta,
};
use crate::corpus::{encode, read_text, CorpusSplits, TokenMode, TokenStream, VocabOptions};
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadKind, ProjectionKind};
use crate::optim::OptimizerKind;
use crate::synthetic::{self, bottleneck_sweep, gen_language, write_sweep_csv, FitConfig};
use crate::training::{self, evaluate, Checkpoint, ModelConfig, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "mosr",
    version,
    about = "Softmax / MoC / MoS language-model heads and rank analysis",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint; metrics stream to stdout.
    Train(TrainArgs),
    /// Perplexity and bits per token of a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Numerical rank of the empirical log-probability matrix.
    Rank(RankArgs),
    /// Normalized singular-value curve as CSV.
    Spectrum(SpectrumArgs),
    /// Expected pairwise KL divergence between predicted distributions.
    Kld(KldArgs),
    /// Fit heads to a synthetic language over a (d, K) grid.
    Bottleneck(BottleneckArgs),
    /// Training-step slowdown of MoS relative to Softmax.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct CorpusArgs {
    /// Directory holding train.txt, valid.txt and test.txt.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "word", value_parser = parse_from_str::<TokenMode>)]
    mode: TokenMode,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Word-mode vocabulary cap, specials included.
    #[arg(long, default_value_t = 10_000)]
    max_vocab: usize,
    #[arg(long, value_parser = parse_from_str::<HeadKind>)]
    head: HeadKind,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Input embedding width; defaults to d, which ties the embeddings.
    #[arg(long)]
    embed: Option<usize>,
    /// LSTM hidden width; defaults to d.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long)]
    no_output_bias: bool,
    #[arg(long)]
    no_projection_bias: bool,
    #[arg(long, default_value = "auto", value_parser = parse_from_str::<ProjectionKind>)]
    projection: ProjectionKind,
    #[arg(long, default_value = "sgd", value_parser = parse_from_str::<OptimizerKind>)]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 20)]
    batch_size: usize,
    #[arg(long, default_value_t = 20)]
    bptt: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Include wall-clock seconds in the metrics.
    #[arg(long)]
    timings: bool,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory holding the split files.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    src: SplitArgs,
}

#[derive(Args, Debug)]
struct RankArgs {
    #[command(flatten)]
    src: SplitArgs,
    #[arg(long, default_value_t = analysis::DEFAULT_MAX_ROWS)]
    max_rows: usize,
}

#[derive(Args, Debug)]
struct SpectrumArgs {
    #[command(flatten)]
    src: SplitArgs,
    #[arg(long, default_value_t = analysis::DEFAULT_MAX_ROWS)]
    max_rows: usize,
    #[arg(long, default_value_t = analysis::DEFAULT_SPECTRUM_GRID)]
    grid: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct KldArgs {
    #[command(flatten)]
    src: SplitArgs,
    #[arg(long, default_value_t = analysis::DEFAULT_KLD_PAIRS)]
    pairs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BottleneckArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    r: usize,
    #[arg(long, default_value_t = synthetic::DEFAULT_SCALE)]
    scale: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_delimiter = ',', required = true)]
    d_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    k_grid: Vec<usize>,
    #[arg(long, default_value_t = FitConfig::default().iterations)]
    iterations: usize,
    #[arg(long, default_value_t = FitConfig::default().restarts)]
    restarts: usize,
    #[arg(long, default_value_t = FitConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// MoS component counts.
    #[arg(long, value_delimiter = ',', default_values_t = [5usize, 10, 15])]
    grid: Vec<usize>,
    #[arg(long, default_value_t = BenchConfig::default().vocab)]
    vocab: usize,
    #[arg(long, default_value_t = BenchConfig::default().d)]
    d: usize,
    #[arg(long, default_value_t = BenchConfig::default().hidden)]
    hidden: usize,
    #[arg(long, default_value_t = BenchConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = BenchConfig::default().bptt_len)]
    bptt: usize,
    #[arg(long, default_value_t = BenchConfig::default().warmup)]
    warmup: usize,
    #[arg(long, default_value_t = BenchConfig::default().timed)]
    timed: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn parse_from_str<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    2
                }
            };
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}

fn emit(stdout: &mut dyn Write, value: &serde_json::Value) -> Result<()> {
    writeln!(stdout, "{value}").map_err(|e| Error::io("<stdout>", e))
}

fn dispatch(command: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a, stdout, stderr),
        Command::Eval(a) => {
            let (ckpt, stream) = load_split(&a.src)?;
            let r = evaluate(&ckpt.model, &stream)?;
            emit(stdout, &json!({"nll": r.nll, "ppl": r.ppl, "bpc": r.bpc, "tokens": r.tokens}))
        }
        Command::Rank(a) => {
            let (ckpt, stream) = load_split(&a.src)?;
            let full = empirical_logprob_matrix(&ckpt.model, &stream)?;
            let m = subsample_rows(&full, a.max_rows)?;
            let meta = RankMeta::of(&ckpt.model.config.head, full.rows(), Some(a.max_rows));
            let report = rank_report(&m, meta)?;
            emit(stdout, &serde_json::to_value(report).expect("plain struct"))
        }
        Command::Spectrum(a) => {
            let (ckpt, stream) = load_split(&a.src)?;
            let full = empirical_logprob_matrix(&ckpt.model, &stream)?;
            let m = subsample_rows(&full, a.max_rows)?;
            let curve = spectrum_curve(&m, a.grid)?;
            let file = std::fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
            curve.write_csv(std::io::BufWriter::new(file))?;
            emit(
                stdout,
                &json!({
                    "out": a.out.display().to_string(),
                    "rows": m.rows(),
                    "values": curve.normalized.len(),
                    "percent_below_0.01": curve.percent_below(0.01),
                }),
            )
        }
        Command::Kld(a) => {
            let (ckpt, stream) = load_split(&a.src)?;
            let m = empirical_logprob_matrix(&ckpt.model, &stream)?;
            let kld = pairwise_kld_rows(&m, a.pairs, a.seed)?;
            emit(stdout, &json!({"kld": kld, "pairs": a.pairs, "seed": a.seed}))
        }
        Command::Bottleneck(a) => cmd_bottleneck(a, stdout, stderr),
        Command::Bench(a) => {
            let cfg = BenchConfig {
                vocab: a.vocab,
                d: a.d,
                hidden: a.hidden,
                batch_size: a.batch_size,
                bptt_len: a.bptt,
                ks: a.grid,
                warmup: a.warmup,
                timed: a.timed,
                seed: a.seed,
            };
            for row in bench_heads(&cfg)? {
                emit(stdout, &serde_json::to_value(row).expect("plain struct"))?;
            }
            Ok(())
        }
    }
}

fn load_split(a: &SplitArgs) -> Result<(Checkpoint, TokenStream)> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let path = split_path(&a.corpus, &a.split)?;
    let stream = encode(&read_text(&path)?, &ckpt.vocab)?;
    Ok((ckpt, stream))
}

fn split_path(dir: &Path, split: &str) -> Result<PathBuf> {
    match split {
        "train" | "valid" | "test" => Ok(dir.join(format!("{split}.txt"))),
        other => Err(Error::Contract(format!(
            "unknown split {other:?} (expected train, valid or test)"
        ))),
    }
}

fn cmd_train(a: TrainArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let opts = match a.corpus.mode {
        TokenMode::Word => VocabOptions::word(a.max_vocab),
        TokenMode::Char => VocabOptions::char(),
    };
    let splits = CorpusSplits::load(&a.corpus.corpus, opts)?;
    let head = HeadConfig {
        output_bias: !a.no_output_bias,
        projection_bias: !a.no_projection_bias,
        projection: a.projection,
        ..HeadConfig::new(a.head, a.d, a.k)
    };
    let model = ModelConfig::new(
        splits.vocab.len(),
        a.embed.unwrap_or(a.d),
        a.hidden.unwrap_or(a.d),
        a.layers,
        head,
    );
    let config = TrainConfig {
        optimizer: a.optimizer,
        lr: a.lr,
        grad_clip: a.clip,
        epochs: a.epochs,
        batch_size: a.batch_size,
        bptt_len: a.bptt,
        seed: a.seed,
        model,
    };
    let _ = writeln!(
        stderr,
        "training {} head: vocab {}, {} parameters",
        a.head,
        splits.vocab.len(),
        training::count_params(&model)
    );
    let mut write_err = None;
    let outcome = training::train(&splits, &config, |m| {
        let mut v = json!({
            "epoch": m.epoch,
            "train_nll": m.train_nll,
            "valid_nll": m.valid_nll,
            "train_ppl": m.train_ppl,
            "valid_ppl": m.valid_ppl,
        });
        if a.timings {
            v["wall_seconds"] = json!(m.wall_seconds);
        }
        if let Err(e) = emit(stdout, &v) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    outcome.checkpoint.save(&a.out)
}

fn cmd_bottleneck(a: BottleneckArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let lang = gen_language(a.n, a.m, a.r, a.scale, a.seed)?;
    let cfg = FitConfig {
        lr: a.lr,
        iterations: a.iterations,
        restarts: a.restarts,
        seed: a.seed,
        ..FitConfig::default()
    };
    let _ = writeln!(
        stderr,
        "fitting {} d values x {} K values on a {}x{} language of rank {}",
        a.d_grid.len(),
        a.k_grid.len(),
        a.n,
        a.m,
        a.r
    );
    let rows = bottleneck_sweep(&lang, &a.d_grid, &a.k_grid, &cfg, a.threads)?;
    let file = std::fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_sweep_csv(&rows, std::io::BufWriter::new(file))?;
    emit(
        stdout,
        &json!({"out": a.out.display().to_string(), "cells": rows.len()}),
    )
}
