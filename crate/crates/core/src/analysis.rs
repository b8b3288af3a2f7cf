//! Empirical log-probability matrices of trained models and the
//! measurements taken on them: numerical rank, normalized singular-value
//! spectra, expected pairwise KL divergence, and head timing.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{TokenStream, Window};
use crate::error::{contract, Error, Result};
use crate::heads::{HeadConfig, HeadKind};
use crate::linalg::{numerical_rank, svd_values, Matrix, SVD_ALGORITHM};
use crate::optim::{clip_global_norm, Optimizer, OptimizerKind};
use crate::training::{logprob_rows, Model, ModelConfig};

/// Row cap for rank and spectrum measurements.
pub const DEFAULT_MAX_ROWS: usize = 2000;
pub const DEFAULT_KLD_PAIRS: usize = 10_000;
pub const DEFAULT_SPECTRUM_GRID: usize = 101;

/// Row `t` is `log P(· | tokens ≤ t)`, computed with one sequential stream.
pub fn empirical_logprob_matrix(model: &Model, stream: &TokenStream) -> Result<Matrix> {
    logprob_rows(model, stream)
}

/// At most `cap` rows taken at stride `T / cap` (row `⌊i·T/cap⌋` for `i < cap`).
pub fn subsample_rows(m: &Matrix, cap: usize) -> Result<Matrix> {
    contract!(cap > 0, "row cap must be positive");
    let t = m.rows();
    if t <= cap {
        return Ok(m.clone());
    }
    let idx: Vec<usize> = (0..cap).map(|i| i * t / cap).collect();
    Ok(m.select_rows(&idx))
}

/// What produced the matrix of a [`RankReport`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankMeta {
    pub head: HeadKind,
    pub d: usize,
    pub k: usize,
    /// Rows before any subsampling.
    pub source_rows: usize,
    pub row_cap: Option<usize>,
}

impl RankMeta {
    pub fn of(config: &HeadConfig, source_rows: usize, row_cap: Option<usize>) -> Self {
        RankMeta {
            head: config.kind,
            d: config.d,
            k: config.k,
            source_rows,
            row_cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankReport {
    pub rows: usize,
    pub cols: usize,
    pub source_rows: usize,
    pub row_cap: Option<usize>,
    pub sigma_max: f64,
    pub threshold: f64,
    pub rank: usize,
    pub head: HeadKind,
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub svd_algorithm: &'static str,
}

pub fn rank_report(m: &Matrix, meta: RankMeta) -> Result<RankReport> {
    let s = svd_values(m)?;
    Ok(RankReport {
        rows: m.rows(),
        cols: m.cols(),
        source_rows: meta.source_rows,
        row_cap: meta.row_cap,
        sigma_max: s.sigma_max(),
        threshold: s.rank_threshold(),
        rank: numerical_rank(&s),
        head: meta.head,
        d: meta.d,
        k: meta.k,
        svd_algorithm: SVD_ALGORITHM,
    })
}

/// Singular values divided by `σ₁` plus the percentage of them lying
/// strictly below each grid threshold. The last threshold is 1, where the
/// curve is 100% by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumCurve {
    /// Descending, first entry 1.
    pub normalized: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub cum_percent: Vec<f64>,
}

impl SpectrumCurve {
    /// Percentage of normalized values strictly below `t`.
    pub fn percent_below(&self, t: f64) -> f64 {
        let below = self.normalized.iter().filter(|&&v| v < t).count();
        100.0 * below as f64 / self.normalized.len() as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Format(format!("writing spectrum CSV: {e}"));
        out.write_record(["threshold", "cum_percent"]).map_err(err)?;
        for (t, p) in self.thresholds.iter().zip(&self.cum_percent) {
            out.write_record([t.to_string(), p.to_string()]).map_err(err)?;
        }
        out.flush()
            .map_err(|e| Error::Format(format!("writing spectrum CSV: {e}")))
    }
}

/// Curve on the uniform grid `i / (grid − 1)`, `i = 0 … grid − 1`.
pub fn spectrum_curve(m: &Matrix, grid: usize) -> Result<SpectrumCurve> {
    contract!(grid >= 2, "spectrum grid needs at least two points");
    let s = svd_values(m)?;
    let top = s.sigma_max();
    contract!(top > 0.0, "spectrum of a zero matrix is undefined");
    let normalized: Vec<f64> = s.values.iter().map(|v| v / top).collect();
    let mut curve = SpectrumCurve {
        normalized,
        thresholds: (0..grid).map(|i| i as f64 / (grid - 1) as f64).collect(),
        cum_percent: Vec::with_capacity(grid),
    };
    curve.cum_percent = curve
        .thresholds
        .iter()
        .map(|&t| if t >= 1.0 { 100.0 } else { curve.percent_below(t) })
        .collect();
    Ok(curve)
}

/// Monte-Carlo mean of `KL(P_i ‖ P_j)` over rows `i, j` drawn uniformly
/// with replacement from `ChaCha8Rng::seed_from_u64(seed)`.
pub fn pairwise_kld_rows(logprobs: &Matrix, num_pairs: usize, seed: u64) -> Result<f64> {
    contract!(num_pairs >= 1, "need at least one pair");
    let t = logprobs.rows();
    contract!(t >= 2, "need at least two positions");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..num_pairs {
        let i = rng.random_range(0..t);
        let j = rng.random_range(0..t);
        if i == j {
            continue;
        }
        total += logprobs
            .row(i)
            .iter()
            .zip(logprobs.row(j))
            .map(|(&a, &b)| a.exp() * (a - b))
            .sum::<f64>();
    }
    Ok((total / num_pairs as f64).max(0.0))
}

pub fn pairwise_kld(model: &Model, stream: &TokenStream, num_pairs: usize, seed: u64) -> Result<f64> {
    pairwise_kld_rows(&empirical_logprob_matrix(model, stream)?, num_pairs, seed)
}

/// Shapes for [`bench_heads`]. All heads share the encoder and batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub vocab: usize,
    pub d: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub bptt_len: usize,
    /// Component counts of the MoS cells.
    pub ks: Vec<usize>,
    pub warmup: usize,
    pub timed: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            vocab: 200,
            d: 32,
            hidden: 64,
            batch_size: 20,
            bptt_len: 20,
            ks: vec![5, 10, 15],
            warmup: 5,
            timed: 20,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub head: HeadKind,
    #[serde(rename = "K")]
    pub k: usize,
    pub median_step_seconds: f64,
    /// Median step time over the Softmax median.
    pub slowdown: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_steps(config: ModelConfig, bench: &BenchConfig, window: &Window) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(bench.seed);
    let mut model = Model::init(config, &mut rng)?;
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
    let state = model.initial_state(bench.batch_size);
    let mut times = Vec::with_capacity(bench.timed);
    for i in 0..bench.warmup + bench.timed {
        let start = Instant::now();
        let (_, grads, _) = model.window_loss(window, &state, true)?;
        let mut grads = grads.expect("gradients requested");
        clip_global_norm(&mut grads, 5.0);
        opt.step(&mut model, &grads);
        if i >= bench.warmup {
            times.push(start.elapsed().as_secs_f64());
        }
    }
    Ok(median(times))
}

/// Median wall time of one training step (forward, backward, clip, update)
/// for Softmax and for MoS at every `K`, on the same random window.
pub fn bench_heads(bench: &BenchConfig) -> Result<Vec<BenchRow>> {
    contract!(!bench.ks.is_empty(), "bench needs at least one MoS cell");
    contract!(bench.timed >= 1, "bench needs at least one timed step");
    let mut rng = ChaCha8Rng::seed_from_u64(bench.seed);
    let mut ids = || -> Vec<Vec<usize>> {
        (0..bench.batch_size)
            .map(|_| (0..bench.bptt_len).map(|_| rng.random_range(0..bench.vocab)).collect())
            .collect()
    };
    let window = Window {
        inputs: ids(),
        targets: ids(),
    };
    let base = |kind: HeadKind, k: usize| {
        let mut head = HeadConfig::new(kind, bench.d, k);
        head.output_bias = kind == HeadKind::Softmax;
        ModelConfig::new(bench.vocab, bench.d, bench.hidden, 1, head)
    };
    let reference = time_steps(base(HeadKind::Softmax, 1), bench, &window)?;
    let mut rows = vec![BenchRow {
        head: HeadKind::Softmax,
        k: 1,
        median_step_seconds: reference,
        slowdown: 1.0,
    }];
    for &k in &bench.ks {
        let t = time_steps(base(HeadKind::Mos, k), bench, &window)?;
        rows.push(BenchRow {
            head: HeadKind::Mos,
            k,
            median_step_seconds: t,
            slowdown: t / reference,
        });
    }
    Ok(rows)
}
