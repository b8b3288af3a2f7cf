//! Truncated-BPTT training, evaluation, capacity matching and checkpoints.
//!
//! Training carries recurrent state across consecutive windows of each
//! parallel stream and resets it at every epoch boundary. Evaluation always
//! runs a single stream (`B = 1`) with full state carry, independent of the
//! training batch size.

mod capacity;
mod checkpoint;
mod model;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use capacity::{matched_configs, CapacityKnob, MATCH_TOLERANCE};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{count_params, time_major_targets, Model, ModelConfig, WindowForward};

use crate::corpus::{make_batches, CorpusSplits, TokenStream};
use crate::error::{contract, Error, Result};
use crate::linalg::Matrix;
use crate::optim::{clip_global_norm, Optimizer, OptimizerKind};
use crate::params::Parameters;

/// Positions per forward call during evaluation.
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Global-norm cap; `f64::INFINITY` disables clipping.
    pub grad_clip: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub bptt_len: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// SGD at lr 1.0 with clip 5.0.
    pub fn word_defaults(model: ModelConfig) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 1.0,
            grad_clip: 5.0,
            epochs: 1,
            batch_size: 20,
            bptt_len: 20,
            seed: 1,
            model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.lr >= 0.0 && self.lr.is_finite(), "lr must be finite and non-negative");
        contract!(self.grad_clip > 0.0, "grad_clip must be positive");
        contract!(
            self.batch_size > 0 && self.bptt_len > 0,
            "batch size and window length must be positive"
        );
        self.model.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub train_nll: f64,
    pub valid_nll: f64,
    pub train_ppl: f64,
    pub valid_ppl: f64,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    fn new(epoch: usize, train_nll: f64, valid_nll: f64, started: Instant) -> Self {
        EpochMetrics {
            epoch,
            train_nll,
            valid_nll,
            train_ppl: train_nll.exp(),
            valid_ppl: valid_nll.exp(),
            wall_seconds: started.elapsed().as_secs_f64(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: Checkpoint,
    /// Optimizer steps taken.
    pub steps: usize,
    /// Largest gradient norm actually applied.
    pub max_applied_grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    pub nll: f64,
    pub ppl: f64,
    pub bpc: f64,
    /// Predictions scored.
    pub tokens: usize,
}

/// Trains from a fresh seeded initialization, calling `observer` after the
/// initial evaluation and after every epoch.
pub fn train(
    splits: &CorpusSplits,
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    contract!(
        config.model.vocab_size() == splits.vocab.len(),
        "model vocabulary {} does not match corpus vocabulary {}",
        config.model.vocab_size(),
        splits.vocab.len()
    );
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::init(config.model, &mut rng)?;
    let rng_state = RngState {
        seed: config.seed,
        word_pos: rng.get_word_pos(),
    };
    let plan = make_batches(&splits.train, config.batch_size, config.bptt_len)?;
    let mut optimizer = Optimizer::new(config.optimizer, config.lr);

    let mut metrics = Vec::with_capacity(config.epochs + 1);
    let train_nll = {
        let mut state = model.initial_state(config.batch_size);
        let mut total = 0.0;
        for window in plan.windows() {
            let (nll, _, next) = model.window_loss(&window, &state, false)?;
            total += nll;
            state = next;
        }
        total / plan.num_windows as f64
    };
    let valid_nll = evaluate(&model, &splits.valid)?.nll;
    let m0 = EpochMetrics::new(0, train_nll, valid_nll, started);
    observer(&m0);
    metrics.push(m0);

    let mut step = 0;
    let mut max_norm: f64 = 0.0;
    for epoch in 1..=config.epochs {
        let mut state = model.initial_state(config.batch_size);
        let mut total = 0.0;
        for window in plan.windows() {
            let (nll, grads, next) = model.window_loss(&window, &state, true)?;
            let mut grads = grads.expect("gradients requested");
            if !nll.is_finite() || !grads.all_finite() {
                return Err(Error::TrainingDiverged {
                    step,
                    detail: format!("loss {nll}"),
                });
            }
            clip_global_norm(&mut grads, config.grad_clip);
            max_norm = max_norm.max(grads.global_norm());
            optimizer.step(&mut model, &grads);
            total += nll;
            state = next;
            step += 1;
        }
        let train_nll = total / plan.num_windows as f64;
        let valid_nll = evaluate(&model, &splits.valid)?.nll;
        if !valid_nll.is_finite() || !model.all_finite() {
            return Err(Error::TrainingDiverged {
                step,
                detail: format!("validation loss {valid_nll}"),
            });
        }
        let m = EpochMetrics::new(epoch, train_nll, valid_nll, started);
        observer(&m);
        metrics.push(m);
    }

    Ok(TrainOutcome {
        metrics,
        checkpoint: Checkpoint {
            train: *config,
            vocab: splits.vocab.clone(),
            model,
            rng: rng_state,
        },
        steps: step,
        max_applied_grad_norm: max_norm,
    })
}

fn check_stream(model: &Model, stream: &TokenStream) -> Result<()> {
    contract!(
        stream.vocab_size == model.config.vocab_size(),
        "stream vocabulary {} does not match model vocabulary {}",
        stream.vocab_size,
        model.config.vocab_size()
    );
    contract!(stream.len() >= 2, "need at least two tokens to score");
    Ok(())
}

/// Runs `model` over `stream` with `B = 1`, passing each chunk's
/// log-probability rows and targets to `visit`.
fn sequential(
    model: &Model,
    stream: &TokenStream,
    mut visit: impl FnMut(&Matrix, &[usize]) -> Result<()>,
) -> Result<()> {
    check_stream(model, stream)?;
    let ids = &stream.ids;
    let mut state = model.initial_state(1);
    let mut start = 0;
    while start + 1 < ids.len() {
        let end = (start + EVAL_CHUNK).min(ids.len() - 1);
        let inputs = vec![ids[start..end].to_vec()];
        let fw = model.forward(&inputs, &state)?;
        visit(fw.logprobs(), &ids[start + 1..end + 1])?;
        state = fw.encoder.state;
        start = end;
    }
    Ok(())
}

/// Mean NLL over every next-token prediction of `stream`.
pub fn evaluate(model: &Model, stream: &TokenStream) -> Result<EvalResult> {
    let mut total = 0.0;
    let mut count = 0usize;
    sequential(model, stream, |lp, targets| {
        for (r, &t) in targets.iter().enumerate() {
            total -= lp[(r, t)];
        }
        count += targets.len();
        Ok(())
    })?;
    let nll = total / count as f64;
    Ok(EvalResult {
        nll,
        ppl: nll.exp(),
        bpc: nll / std::f64::consts::LN_2,
        tokens: count,
    })
}

/// Full next-token log-distributions at every prediction position, one row
/// per position (`stream.len() − 1` rows).
pub fn logprob_rows(model: &Model, stream: &TokenStream) -> Result<Matrix> {
    let mut parts = Vec::new();
    sequential(model, stream, |lp, _| {
        parts.push(lp.clone());
        Ok(())
    })?;
    Matrix::vstack(&parts)
}
