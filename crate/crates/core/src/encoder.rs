//! Token embedding plus a stack of vanilla LSTM layers, with exact
//! backpropagation through time.
//!
//! Gate blocks are laid out `[input, forget, cell, output]` along the rows
//! of every weight matrix and bias.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::linalg::{add_matmul_tn, matmul, matmul_nt, Matrix};
use crate::params::{
    matrix_view, matrix_view_mut, uniform_matrix, vector_view, vector_view_mut, Parameters, View,
    ViewMut,
};

/// Forget-gate bias at initialization.
pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(
            self.vocab_size > 0 && self.embed_dim > 0 && self.hidden_dim > 0 && self.num_layers > 0,
            "encoder dimensions must be positive: {self:?}"
        );
        Ok(())
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embed_dim
        } else {
            self.hidden_dim
        }
    }

    /// Learnable scalars, optionally excluding the embedding table.
    pub fn param_count(&self, with_embedding: bool) -> usize {
        let h = self.hidden_dim;
        let layers: usize = (0..self.num_layers)
            .map(|l| 4 * h * (self.layer_input(l) + h) + 4 * h)
            .sum();
        layers + if with_embedding { self.vocab_size * self.embed_dim } else { 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// `4h × in`
    pub w_ih: Matrix,
    /// `4h × h`
    pub w_hh: Matrix,
    /// `4h`
    pub bias: Vec<f64>,
}

impl LstmLayer {
    fn zeros(input: usize, hidden: usize) -> Self {
        LstmLayer {
            w_ih: Matrix::zeros(4 * hidden, input),
            w_hh: Matrix::zeros(4 * hidden, hidden),
            bias: vec![0.0; 4 * hidden],
        }
    }
}

/// Encoder weights. `embedding` is `None` when the table is shared with the
/// output head; callers then pass the shared table explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub config: EncoderConfig,
    pub embedding: Option<Matrix>,
    pub layers: Vec<LstmLayer>,
}

impl LstmParams {
    pub fn zeros(config: EncoderConfig, with_embedding: bool) -> Self {
        LstmParams {
            config,
            embedding: with_embedding.then(|| Matrix::zeros(config.vocab_size, config.embed_dim)),
            layers: (0..config.num_layers)
                .map(|l| LstmLayer::zeros(config.layer_input(l), config.hidden_dim))
                .collect(),
        }
    }

    /// Uniform(−0.1, 0.1) weights, forget-gate bias 1, other biases 0.
    pub fn init<R: Rng>(config: EncoderConfig, with_embedding: bool, rng: &mut R) -> Self {
        let h = config.hidden_dim;
        let embedding =
            with_embedding.then(|| uniform_matrix(config.vocab_size, config.embed_dim, rng));
        let layers = (0..config.num_layers)
            .map(|l| {
                let mut bias = vec![0.0; 4 * h];
                bias[h..2 * h].iter_mut().for_each(|b| *b = FORGET_BIAS_INIT);
                LstmLayer {
                    w_ih: uniform_matrix(4 * h, config.layer_input(l), rng),
                    w_hh: uniform_matrix(4 * h, h, rng),
                    bias,
                }
            })
            .collect();
        LstmParams {
            config,
            embedding,
            layers,
        }
    }

    /// Runs the encoder with its own embedding table.
    pub fn forward(&self, ids: &[Vec<usize>], state: &HiddenState) -> Result<ForwardPass> {
        let table = self.embedding.as_ref().ok_or_else(|| {
            crate::Error::Contract("encoder has no embedding table of its own".into())
        })?;
        forward(self, table, ids, state)
    }
}

pub fn init_params(config: EncoderConfig, seed: u64) -> LstmParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LstmParams::init(config, true, &mut rng)
}

impl Parameters for LstmParams {
    fn views(&self) -> Vec<View<'_>> {
        let mut out = Vec::new();
        if let Some(e) = &self.embedding {
            out.push(matrix_view("embedding", e));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(matrix_view(format!("layer{l}.w_ih"), &layer.w_ih));
            out.push(matrix_view(format!("layer{l}.w_hh"), &layer.w_hh));
            out.push(vector_view(format!("layer{l}.bias"), &layer.bias));
        }
        out
    }

    fn views_mut(&mut self) -> Vec<ViewMut<'_>> {
        let mut out = Vec::new();
        if let Some(e) = &mut self.embedding {
            out.push(matrix_view_mut("embedding", e));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push(matrix_view_mut(format!("layer{l}.w_ih"), &mut layer.w_ih));
            out.push(matrix_view_mut(format!("layer{l}.w_hh"), &mut layer.w_hh));
            out.push(vector_view_mut(format!("layer{l}.bias"), &mut layer.bias));
        }
        out
    }
}

/// Per-layer hidden and cell vectors, each `B × hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub h: Vec<Matrix>,
    pub c: Vec<Matrix>,
}

impl HiddenState {
    pub fn zeros(config: &EncoderConfig, batch: usize) -> Self {
        HiddenState {
            h: vec![Matrix::zeros(batch, config.hidden_dim); config.num_layers],
            c: vec![Matrix::zeros(batch, config.hidden_dim); config.num_layers],
        }
    }

    pub fn batch_size(&self) -> usize {
        self.h.first().map_or(0, Matrix::rows)
    }

    fn matches(&self, config: &EncoderConfig, batch: usize) -> bool {
        self.h.len() == config.num_layers
            && self.c.len() == config.num_layers
            && self
                .h
                .iter()
                .chain(&self.c)
                .all(|m| m.shape() == (batch, config.hidden_dim))
    }
}

struct StepCache {
    x: Matrix,
    h_prev: Matrix,
    c_prev: Matrix,
    /// Activated gates, `B × 4h`.
    gates: Matrix,
    tanh_c: Matrix,
}

/// Everything backward needs from a forward pass.
pub struct Tape {
    ids: Vec<Vec<usize>>,
    batch: usize,
    /// `steps[layer][t]`
    steps: Vec<Vec<StepCache>>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct ForwardPass {
    /// Top-layer hidden states, one `B × hidden` matrix per time step.
    pub outputs: Vec<Matrix>,
    pub state: HiddenState,
    pub tape: Tape,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn embed(table: &Matrix, ids: &[Vec<usize>], t: usize) -> Matrix {
    let rows: Vec<usize> = ids.iter().map(|seq| seq[t]).collect();
    table.select_rows(&rows)
}

/// Runs all layers over a `B × L` id block starting from `state`.
pub fn forward(
    params: &LstmParams,
    table: &Matrix,
    ids: &[Vec<usize>],
    state: &HiddenState,
) -> Result<ForwardPass> {
    let cfg = &params.config;
    let batch = ids.len();
    contract!(batch > 0, "empty batch");
    let len = ids[0].len();
    contract!(len > 0, "empty window");
    contract!(
        ids.iter().all(|s| s.len() == len),
        "ragged input window"
    );
    contract!(
        ids.iter().flatten().all(|&i| i < cfg.vocab_size),
        "token id out of range for vocabulary of {}",
        cfg.vocab_size
    );
    contract!(
        table.shape() == (cfg.vocab_size, cfg.embed_dim),
        "embedding table is {}x{}, expected {}x{}",
        table.rows(),
        table.cols(),
        cfg.vocab_size,
        cfg.embed_dim
    );
    contract!(
        state.matches(cfg, batch),
        "hidden state does not match {} layers x {batch} x {}",
        cfg.num_layers,
        cfg.hidden_dim
    );

    let h = cfg.hidden_dim;
    let mut inputs: Vec<Matrix> = (0..len).map(|t| embed(table, ids, t)).collect();
    let mut new_state = state.clone();
    let mut steps = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let mut h_t = state.h[l].clone();
        let mut c_t = state.c[l].clone();
        let mut caches = Vec::with_capacity(len);
        let mut outputs = Vec::with_capacity(len);
        for x in inputs {
            let mut z = matmul_nt(&x, &layer.w_ih)?;
            z.axpy(1.0, &matmul_nt(&h_t, &layer.w_hh)?);
            let mut c_new = Matrix::zeros(batch, h);
            let mut h_new = Matrix::zeros(batch, h);
            let mut tanh_c = Matrix::zeros(batch, h);
            for b in 0..batch {
                let zr = z.row_mut(b);
                for (zv, bv) in zr.iter_mut().zip(&layer.bias) {
                    *zv += bv;
                }
                for j in 0..h {
                    zr[j] = sigmoid(zr[j]);
                    zr[h + j] = sigmoid(zr[h + j]);
                    zr[2 * h + j] = zr[2 * h + j].tanh();
                    zr[3 * h + j] = sigmoid(zr[3 * h + j]);
                }
                for j in 0..h {
                    let c = zr[h + j] * c_t[(b, j)] + zr[j] * zr[2 * h + j];
                    let tc = c.tanh();
                    c_new[(b, j)] = c;
                    tanh_c[(b, j)] = tc;
                    h_new[(b, j)] = zr[3 * h + j] * tc;
                }
            }
            caches.push(StepCache {
                x,
                h_prev: h_t,
                c_prev: c_t,
                gates: z,
                tanh_c,
            });
            outputs.push(h_new.clone());
            h_t = h_new;
            c_t = c_new;
        }
        new_state.h[l] = h_t;
        new_state.c[l] = c_t;
        steps.push(caches);
        inputs = outputs;
    }
    Ok(ForwardPass {
        outputs: inputs,
        state: new_state,
        tape: Tape {
            ids: ids.to_vec(),
            batch,
            steps,
        },
    })
}

pub struct BackwardPass {
    /// Same layout as the parameters; the embedding gradient is always
    /// present (dense) even when the parameters share their table.
    pub grads: LstmParams,
    /// Gradient with respect to the state the forward pass started from.
    pub grad_state: HiddenState,
}

/// Exact gradients of `Σₜ ⟨grad_outputs[t], outputs[t]⟩ + ⟨grad_final, final state⟩`.
pub fn backward(
    params: &LstmParams,
    tape: &Tape,
    grad_outputs: &[Matrix],
    grad_final: Option<&HiddenState>,
) -> Result<BackwardPass> {
    let cfg = &params.config;
    let h = cfg.hidden_dim;
    let batch = tape.batch;
    contract!(
        tape.steps.len() == params.layers.len(),
        "tape has {} layers, parameters have {}",
        tape.steps.len(),
        params.layers.len()
    );
    contract!(
        grad_outputs.len() == tape.len(),
        "got {} output gradients for a tape of {} steps",
        grad_outputs.len(),
        tape.len()
    );
    contract!(
        grad_outputs.iter().all(|g| g.shape() == (batch, h)),
        "output gradient shape mismatch"
    );
    if let Some(gf) = grad_final {
        contract!(gf.matches(cfg, batch), "final-state gradient shape mismatch");
    }

    let mut grads = LstmParams::zeros(*cfg, true);
    let mut grad_state = HiddenState::zeros(cfg, batch);
    let mut upstream: Vec<Matrix> = grad_outputs.to_vec();
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let gl = &mut grads.layers[l];
        let (mut dh_next, mut dc_next) = match grad_final {
            Some(gf) => (gf.h[l].clone(), gf.c[l].clone()),
            None => (Matrix::zeros(batch, h), Matrix::zeros(batch, h)),
        };
        let mut below = vec![Matrix::zeros(batch, layer.w_ih.cols()); tape.len()];
        for t in (0..tape.len()).rev() {
            let step = &tape.steps[l][t];
            let mut dz = Matrix::zeros(batch, 4 * h);
            for b in 0..batch {
                let g = step.gates.row(b);
                let dzr = dz.row_mut(b);
                for j in 0..h {
                    let (i_g, f_g, c_g, o_g) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                    let tc = step.tanh_c[(b, j)];
                    let dh = upstream[t][(b, j)] + dh_next[(b, j)];
                    let dc = dc_next[(b, j)] + dh * o_g * (1.0 - tc * tc);
                    dzr[j] = dc * c_g * i_g * (1.0 - i_g);
                    dzr[h + j] = dc * step.c_prev[(b, j)] * f_g * (1.0 - f_g);
                    dzr[2 * h + j] = dc * i_g * (1.0 - c_g * c_g);
                    dzr[3 * h + j] = dh * tc * o_g * (1.0 - o_g);
                    dc_next[(b, j)] = dc * f_g;
                }
                for (db, d) in gl.bias.iter_mut().zip(dzr.iter()) {
                    *db += d;
                }
            }
            add_matmul_tn(&mut gl.w_ih, &dz, &step.x)?;
            add_matmul_tn(&mut gl.w_hh, &dz, &step.h_prev)?;
            below[t] = matmul(&dz, &layer.w_ih)?;
            dh_next = matmul(&dz, &layer.w_hh)?;
        }
        grad_state.h[l] = dh_next;
        grad_state.c[l] = dc_next;
        upstream = below;
    }
    let de = grads.embedding.as_mut().expect("zeros() built an embedding");
    for (t, dx) in upstream.iter().enumerate() {
        for (b, seq) in tape.ids.iter().enumerate() {
            let row = de.row_mut(seq[t]);
            for (r, d) in row.iter_mut().zip(dx.row(b)) {
                *r += d;
            }
        }
    }
    Ok(BackwardPass { grads, grad_state })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 5,
            embed_dim: 3,
            hidden_dim: 4,
            num_layers: 2,
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_params(tiny(), 7);
        let b = init_params(tiny(), 7);
        assert_eq!(a, b);
        let c = init_params(tiny(), 8);
        assert_ne!(a, c);
        for v in a.views() {
            if v.name.ends_with("bias") {
                continue;
            }
            assert!(v.data.iter().all(|x| x.abs() <= 0.1), "{}", v.name);
        }
        let h = tiny().hidden_dim;
        for layer in &a.layers {
            assert!(layer.bias[h..2 * h].iter().all(|&b| b == 1.0));
            assert!(layer.bias[..h].iter().all(|&b| b == 0.0));
            assert!(layer.bias[2 * h..].iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn param_count_matches_layout() {
        let p = init_params(tiny(), 1);
        assert_eq!(p.num_scalars(), tiny().param_count(true));
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let p = LstmParams::zeros(tiny(), true);
        let ids = vec![vec![0, 1, 2], vec![4, 3, 2]];
        let out = p.forward(&ids, &HiddenState::zeros(&tiny(), 2)).unwrap();
        for g in &out.outputs {
            assert!(g.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let p = init_params(tiny(), 1);
        let state = HiddenState::zeros(&tiny(), 2);
        assert!(p.forward(&[vec![0, 9]], &HiddenState::zeros(&tiny(), 1)).is_err());
        assert!(p.forward(&[vec![0, 1]], &state).is_err());
        assert!(p.forward(&[vec![0, 1], vec![2]], &state).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = init_params(tiny(), 2);
        let ids = vec![vec![0, 1, 2], vec![4, 3, 2]];
        let fw = p.forward(&ids, &HiddenState::zeros(&tiny(), 2)).unwrap();
        let zeros = vec![Matrix::zeros(2, 4); 3];
        let bw = backward(&p, &fw.tape, &zeros, None).unwrap();
        assert_eq!(bw.grads.global_norm(), 0.0);
        assert!(bw.grad_state.h.iter().all(|m| m.frobenius_sq() == 0.0));
    }
}
