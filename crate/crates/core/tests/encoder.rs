mod common;

use common::{assert_fd, weighted_sum, FD_STEP, FD_TOLERANCE};
use mosr::encoder::*;
use mosr::linalg::Matrix;
use mosr::params::Parameters;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 5,
        embed_dim: 3,
        hidden_dim: 4,
        num_layers: 2,
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn random_state(cfg: &EncoderConfig, batch: usize, rng: &mut ChaCha8Rng) -> HiddenState {
    let mut s = HiddenState::zeros(cfg, batch);
    for m in s.h.iter_mut().chain(s.c.iter_mut()) {
        *m = gaussian(batch, cfg.hidden_dim, rng).scale(0.5);
    }
    s
}

fn random_ids(batch: usize, len: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|_| (0..len).map(|_| rng.random_range(0..vocab)).collect())
        .collect()
}

/// Weights of a linear probe on the outputs and final state.
struct Probe {
    outputs: Vec<Matrix>,
    last: HiddenState,
}

impl Probe {
    fn random(cfg: &EncoderConfig, batch: usize, len: usize, rng: &mut ChaCha8Rng) -> Self {
        Probe {
            outputs: (0..len).map(|_| gaussian(batch, cfg.hidden_dim, rng)).collect(),
            last: random_state(cfg, batch, rng),
        }
    }

    fn loss(&self, fw: &ForwardPass) -> f64 {
        let outs: f64 = fw
            .outputs
            .iter()
            .zip(&self.outputs)
            .map(|(o, w)| weighted_sum(o, w))
            .sum();
        let fin: f64 = fw
            .state
            .h
            .iter()
            .zip(&self.last.h)
            .chain(fw.state.c.iter().zip(&self.last.c))
            .map(|(s, w)| weighted_sum(s, w))
            .sum();
        outs + fin
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn scalar_cell_matches_hand_computation() {
    let cfg = EncoderConfig {
        vocab_size: 2,
        embed_dim: 1,
        hidden_dim: 1,
        num_layers: 1,
    };
    let mut p = LstmParams::zeros(cfg, true);
    p.embedding = Some(Matrix::from_vec(2, 1, vec![0.7, -1.3]).unwrap());
    let a = [0.5, -0.4, 0.9, 0.3];
    let u = [-0.2, 0.6, 0.1, -0.8];
    let bias = [0.05, 1.0, -0.1, 0.2];
    p.layers[0].w_ih = Matrix::from_vec(4, 1, a.to_vec()).unwrap();
    p.layers[0].w_hh = Matrix::from_vec(4, 1, u.to_vec()).unwrap();
    p.layers[0].bias = bias.to_vec();

    let mut state = HiddenState::zeros(&cfg, 1);
    state.h[0][(0, 0)] = 0.25;
    state.c[0][(0, 0)] = -0.6;
    let seq = [1usize, 0, 1];
    let fw = p.forward(&[seq.to_vec()], &state).unwrap();

    let (mut h, mut c) = (0.25f64, -0.6f64);
    for (t, &id) in seq.iter().enumerate() {
        let x = [0.7, -1.3][id];
        let i = sigmoid(a[0] * x + u[0] * h + bias[0]);
        let f = sigmoid(a[1] * x + u[1] * h + bias[1]);
        let g = (a[2] * x + u[2] * h + bias[2]).tanh();
        let o = sigmoid(a[3] * x + u[3] * h + bias[3]);
        c = f * c + i * g;
        h = o * c.tanh();
        assert!((fw.outputs[t][(0, 0)] - h).abs() < 1e-12, "step {t}");
    }
    assert!((fw.state.h[0][(0, 0)] - h).abs() < 1e-12);
    assert!((fw.state.c[0][(0, 0)] - c).abs() < 1e-12);
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = LstmParams::init(cfg, true, &mut rng);
    let (batch, len) = (2, 3);
    let ids = random_ids(batch, len, cfg.vocab_size, &mut rng);
    let state = random_state(&cfg, batch, &mut rng);
    let probe = Probe::random(&cfg, batch, len, &mut rng);

    let fw = params.forward(&ids, &state).unwrap();
    let bw = backward(&params, &fw.tape, &probe.outputs, Some(&probe.last)).unwrap();
    assert_eq!(bw.grads.views().len(), params.views().len());
    assert_fd("encoder", &params, &bw.grads, |p| {
        probe.loss(&p.forward(&ids, &state).unwrap())
    });
}

#[test]
fn initial_state_gradient_matches_finite_differences() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = LstmParams::init(cfg, true, &mut rng);
    let (batch, len) = (2, 3);
    let ids = random_ids(batch, len, cfg.vocab_size, &mut rng);
    let state = random_state(&cfg, batch, &mut rng);
    let probe = Probe::random(&cfg, batch, len, &mut rng);

    let fw = params.forward(&ids, &state).unwrap();
    let bw = backward(&params, &fw.tape, &probe.outputs, Some(&probe.last)).unwrap();
    let loss = |s: &HiddenState| probe.loss(&params.forward(&ids, s).unwrap());

    for l in 0..cfg.num_layers {
        for which in 0..2 {
            let analytic = if which == 0 { &bw.grad_state.h[l] } else { &bw.grad_state.c[l] };
            let mut numeric = Matrix::zeros(batch, cfg.hidden_dim);
            for b in 0..batch {
                for j in 0..cfg.hidden_dim {
                    let mut plus = state.clone();
                    let mut minus = state.clone();
                    let (p, m) = if which == 0 {
                        (&mut plus.h[l], &mut minus.h[l])
                    } else {
                        (&mut plus.c[l], &mut minus.c[l])
                    };
                    p[(b, j)] += FD_STEP;
                    m[(b, j)] -= FD_STEP;
                    numeric[(b, j)] = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
                }
            }
            let diff = numeric.max_abs_diff(analytic);
            let scale = numeric.frobenius_sq().sqrt().max(1e-12);
            assert!(diff / scale < FD_TOLERANCE, "layer {l} part {which}: {diff:e}");
        }
    }
}

#[test]
fn carried_windows_equal_one_long_window() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = LstmParams::init(cfg, true, &mut rng);
    let ids = random_ids(2, 7, cfg.vocab_size, &mut rng);
    let state = random_state(&cfg, 2, &mut rng);
    let first: Vec<Vec<usize>> = ids.iter().map(|s| s[..3].to_vec()).collect();
    let second: Vec<Vec<usize>> = ids.iter().map(|s| s[3..].to_vec()).collect();

    let full = params.forward(&ids, &state).unwrap();
    let a = params.forward(&first, &state).unwrap();
    let b = params.forward(&second, &a.state).unwrap();
    for (t, out) in a.outputs.iter().chain(&b.outputs).enumerate() {
        assert!(out.max_abs_diff(&full.outputs[t]) < 1e-12, "step {t}");
    }
    for l in 0..cfg.num_layers {
        assert!(b.state.h[l].max_abs_diff(&full.state.h[l]) < 1e-12);
        assert!(b.state.c[l].max_abs_diff(&full.state.c[l]) < 1e-12);
    }
}

#[test]
fn chained_window_gradients_equal_full_sequence_gradient() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = LstmParams::init(cfg, true, &mut rng);
    let (batch, len, split) = (2, 6, 2);
    let ids = random_ids(batch, len, cfg.vocab_size, &mut rng);
    let state = random_state(&cfg, batch, &mut rng);
    let probe = Probe::random(&cfg, batch, len, &mut rng);

    let full_fw = params.forward(&ids, &state).unwrap();
    let full = backward(&params, &full_fw.tape, &probe.outputs, Some(&probe.last)).unwrap();

    let first: Vec<Vec<usize>> = ids.iter().map(|s| s[..split].to_vec()).collect();
    let second: Vec<Vec<usize>> = ids.iter().map(|s| s[split..].to_vec()).collect();
    let fa = params.forward(&first, &state).unwrap();
    let fb = params.forward(&second, &fa.state).unwrap();
    let gb = backward(&params, &fb.tape, &probe.outputs[split..], Some(&probe.last)).unwrap();
    let ga = backward(&params, &fa.tape, &probe.outputs[..split], Some(&gb.grad_state)).unwrap();

    for ((va, vb), vf) in ga.grads.views().iter().zip(gb.grads.views()).zip(full.grads.views()) {
        for i in 0..vf.data.len() {
            let joined = va.data[i] + vb.data[i];
            assert!((joined - vf.data[i]).abs() < 1e-12, "{} [{i}]", vf.name);
        }
    }
    for l in 0..cfg.num_layers {
        assert!(ga.grad_state.h[l].max_abs_diff(&full.grad_state.h[l]) < 1e-12);
        assert!(ga.grad_state.c[l].max_abs_diff(&full.grad_state.c[l]) < 1e-12);
    }
}

#[test]
fn seeds_control_initialization() {
    let cfg = tiny_config();
    let a = init_params(cfg, 1);
    let b = init_params(cfg, 1);
    let c = init_params(cfg, 2);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn malformed_inputs_are_rejected() {
    let cfg = tiny_config();
    let p = init_params(cfg, 1);
    let s = HiddenState::zeros(&cfg, 2);
    assert!(p.forward(&[vec![0, 1], vec![2]], &s).is_err());
    assert!(p.forward(&[vec![0], vec![5]], &s).is_err());
    assert!(p.forward(&[vec![0]], &s).is_err());
    assert!(p.forward(&[], &s).is_err());
}
