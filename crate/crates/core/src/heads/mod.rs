//! Output heads: Softmax, Mixture of Softmaxes (MoS) and Mixture of
//! Contexts (MoC).
//!
//! All heads map encoder outputs `g` (one row per position) to a matrix of
//! next-token log-probabilities and back-propagate an arbitrary gradient on
//! that matrix. The single-vector functions at the bottom of this module are
//! thin wrappers over the batched forms and agree with them bitwise.

pub mod explicit;
mod mixture;
mod softmax;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use explicit::mos_logprob_matrix;
pub use mixture::{MixtureCache, MixtureHead, MixtureKind};
pub use softmax::{Projection, SoftmaxCache, SoftmaxHead};

use crate::error::{contract, Error, Result};
use crate::linalg::Matrix;
use crate::params::{Parameters, View, ViewMut};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HeadKind {
    Softmax,
    Moc,
    Mos,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Softmax, HeadKind::Moc, HeadKind::Mos];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Softmax => "softmax",
            HeadKind::Moc => "moc",
            HeadKind::Mos => "mos",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(HeadKind::Softmax),
            "moc" => Ok(HeadKind::Moc),
            "mos" => Ok(HeadKind::Mos),
            other => Err(Error::Contract(format!(
                "unknown head {other:?} (expected softmax, moc or mos)"
            ))),
        }
    }
}

impl serde::Serialize for HeadKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

/// Projection in front of the plain softmax head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionKind {
    /// Identity when `d == d_g`, otherwise linear.
    Auto,
    Identity,
    Linear,
    Tanh,
}

impl ProjectionKind {
    pub fn resolve(self, d: usize, d_g: usize) -> ProjectionKind {
        match self {
            ProjectionKind::Auto if d == d_g => ProjectionKind::Identity,
            ProjectionKind::Auto => ProjectionKind::Linear,
            other => other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProjectionKind::Auto => "auto",
            ProjectionKind::Identity => "identity",
            ProjectionKind::Linear => "linear",
            ProjectionKind::Tanh => "tanh",
        }
    }
}

impl FromStr for ProjectionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ProjectionKind::Auto),
            "identity" => Ok(ProjectionKind::Identity),
            "linear" => Ok(ProjectionKind::Linear),
            "tanh" => Ok(ProjectionKind::Tanh),
            other => Err(Error::Contract(format!("unknown projection {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Width of the context vectors and output embeddings.
    pub d: usize,
    /// Mixture components; ignored by the softmax head.
    pub k: usize,
    /// Per-token output bias on the softmax head.
    pub output_bias: bool,
    /// Biases on the context and prior projections (and on a tanh
    /// projection of the softmax head).
    pub projection_bias: bool,
    pub projection: ProjectionKind,
}

impl HeadConfig {
    pub fn new(kind: HeadKind, d: usize, k: usize) -> Self {
        HeadConfig {
            kind,
            d,
            k: if kind == HeadKind::Softmax { 1 } else { k },
            output_bias: true,
            projection_bias: true,
            projection: ProjectionKind::Auto,
        }
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.d > 0, "head width d must be positive");
        contract!(self.k >= 1, "K must be at least 1");
        Ok(())
    }

    /// Exact learnable scalar count of the head.
    pub fn param_count(&self, vocab: usize, d_g: usize) -> usize {
        let (m, d, k) = (vocab, self.d, self.k);
        match self.kind {
            HeadKind::Softmax => {
                let proj = match self.projection.resolve(d, d_g) {
                    ProjectionKind::Identity => 0,
                    ProjectionKind::Linear => d * d_g,
                    _ => d * d_g + if self.projection_bias { d } else { 0 },
                };
                m * d + if self.output_bias { m } else { 0 } + proj
            }
            HeadKind::Moc | HeadKind::Mos => {
                let bias = if self.projection_bias { k * d + k } else { 0 };
                m * d + k * d * d_g + k * d_g + bias
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Softmax(SoftmaxHead),
    Mixture(MixtureHead),
}

pub enum HeadCache {
    Softmax(SoftmaxCache),
    Mixture(MixtureCache),
}

impl HeadCache {
    pub fn logprobs(&self) -> &Matrix {
        match self {
            HeadCache::Softmax(c) => &c.logprobs,
            HeadCache::Mixture(c) => &c.logprobs,
        }
    }
}

impl Head {
    pub fn init<R: Rng>(config: &HeadConfig, vocab: usize, d_g: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(match config.kind {
            HeadKind::Softmax => Head::Softmax(SoftmaxHead::init(
                vocab,
                config.d,
                d_g,
                config.output_bias,
                config.projection,
                config.projection_bias,
                rng,
            )?),
            HeadKind::Mos | HeadKind::Moc => {
                let kind = if config.kind == HeadKind::Mos {
                    MixtureKind::Mos
                } else {
                    MixtureKind::Moc
                };
                Head::Mixture(MixtureHead::init(
                    kind,
                    vocab,
                    config.d,
                    d_g,
                    config.k,
                    config.projection_bias,
                    rng,
                )?)
            }
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Softmax(_) => HeadKind::Softmax,
            Head::Mixture(m) => match m.kind {
                MixtureKind::Mos => HeadKind::Mos,
                MixtureKind::Moc => HeadKind::Moc,
            },
        }
    }

    /// Output embedding matrix `W` (`M × d`).
    pub fn output_embedding(&self) -> &Matrix {
        match self {
            Head::Softmax(h) => &h.w,
            Head::Mixture(h) => &h.w,
        }
    }

    pub fn output_embedding_mut(&mut self) -> &mut Matrix {
        match self {
            Head::Softmax(h) => &mut h.w,
            Head::Mixture(h) => &mut h.w,
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Head::Softmax(h) => Head::Softmax(h.zeros_like()),
            Head::Mixture(h) => Head::Mixture(h.zeros_like()),
        }
    }

    pub fn forward(&self, g: &Matrix) -> Result<HeadCache> {
        Ok(match self {
            Head::Softmax(h) => HeadCache::Softmax(h.forward(g)?),
            Head::Mixture(h) => HeadCache::Mixture(h.forward(g)?),
        })
    }

    /// Returns parameter gradients and the gradient with respect to `g`.
    pub fn backward(&self, cache: &HeadCache, grad_lp: &Matrix) -> Result<(Head, Matrix)> {
        match (self, cache) {
            (Head::Softmax(h), HeadCache::Softmax(c)) => {
                h.backward(c, grad_lp).map(|(g, d)| (Head::Softmax(g), d))
            }
            (Head::Mixture(h), HeadCache::Mixture(c)) => {
                h.backward(c, grad_lp).map(|(g, d)| (Head::Mixture(g), d))
            }
            _ => Err(Error::Contract("cache belongs to a different head".into())),
        }
    }
}

impl Parameters for Head {
    fn views(&self) -> Vec<View<'_>> {
        match self {
            Head::Softmax(h) => h.views(),
            Head::Mixture(h) => h.views(),
        }
    }

    fn views_mut(&mut self) -> Vec<ViewMut<'_>> {
        match self {
            Head::Softmax(h) => h.views_mut(),
            Head::Mixture(h) => h.views_mut(),
        }
    }
}

/// `−onehot(targets)/scale`, the log-prob gradient of a mean NLL.
pub fn nll_grad(targets: &[usize], vocab: usize, scale: f64) -> Matrix {
    let mut g = Matrix::zeros(targets.len(), vocab);
    for (r, &t) in targets.iter().enumerate() {
        g[(r, t)] = -1.0 / scale;
    }
    g
}

fn row(g: &[f64]) -> Result<Matrix> {
    Matrix::from_vec(1, g.len(), g.to_vec())
}

/// Next-token log-probabilities of the softmax head for one input vector.
pub fn softmax_forward(g: &[f64], head: &SoftmaxHead) -> Result<Vec<f64>> {
    Ok(head.forward(&row(g)?)?.logprobs.into_vec())
}

/// Mixture weights `π` for one input vector.
pub fn mixture_priors(g: &[f64], head: &MixtureHead) -> Result<Vec<f64>> {
    Ok(head.priors(&row(g)?)?.into_vec())
}

/// Component contexts for one input vector, as a `K × d` matrix.
pub fn mixture_contexts(g: &[f64], head: &MixtureHead) -> Result<Matrix> {
    let ctx = head.contexts(&row(g)?)?;
    Matrix::vstack(&ctx)
}

pub fn mos_forward(g: &[f64], head: &MixtureHead) -> Result<Vec<f64>> {
    Ok(head.forward_as(MixtureKind::Mos, &row(g)?)?.logprobs.into_vec())
}

pub fn moc_forward(g: &[f64], head: &MixtureHead) -> Result<Vec<f64>> {
    Ok(head.forward_as(MixtureKind::Moc, &row(g)?)?.logprobs.into_vec())
}

/// Gradients of `−log P(target | g)` for any head.
pub fn head_backward(head: &Head, g: &[f64], target: usize) -> Result<(Head, Vec<f64>)> {
    let vocab = head.output_embedding().rows();
    contract!(
        target < vocab,
        "target {target} out of range for vocabulary of {vocab}"
    );
    let cache = head.forward(&row(g)?)?;
    let (grads, gg) = head.backward(&cache, &nll_grad(&[target], vocab, 1.0))?;
    Ok((grads, gg.into_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{log_sum_exp, row_log_softmax};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn mixture(kind: HeadKind, m: usize, d: usize, d_g: usize, k: usize) -> MixtureHead {
        match Head::init(&HeadConfig::new(kind, d, k), m, d_g, &mut rng()).unwrap() {
            Head::Mixture(h) => h,
            _ => unreachable!(),
        }
    }

    #[test]
    fn zero_softmax_is_uniform() {
        let mut cfg = HeadConfig::new(HeadKind::Softmax, 3, 1);
        cfg.projection = ProjectionKind::Linear;
        let Head::Softmax(mut h) = Head::init(&cfg, 7, 4, &mut rng()).unwrap() else {
            unreachable!()
        };
        h.w.fill(0.0);
        let lp = softmax_forward(&[0.3, -1.0, 2.0, 0.5], &h).unwrap();
        for v in lp {
            assert!((v + 7f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_two_token_analytic() {
        let h = SoftmaxHead {
            w: Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap(),
            bias: None,
            projection: Projection::Identity,
        };
        let lp = softmax_forward(&[LN_2], &h).unwrap();
        assert!((lp[0] - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((lp[1] - (2.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn softmax_logit_gradient_identity() {
        let h = SoftmaxHead {
            w: Matrix::identity(4),
            bias: Some(vec![0.1, -0.2, 0.3, 0.0]),
            projection: Projection::Identity,
        };
        let g = [0.5, -0.25, 1.5, 0.0];
        let (grads, _) = head_backward(&Head::Softmax(h.clone()), &g, 2).unwrap();
        let Head::Softmax(grads) = grads else { unreachable!() };
        // logits = g + bias and W = I, so the bias gradient is the logit gradient
        let p: Vec<f64> = softmax_forward(&g, &h).unwrap().iter().map(|v| v.exp()).collect();
        for (j, (&gb, &pj)) in grads.bias.as_ref().unwrap().iter().zip(&p).enumerate() {
            let expect = pj - if j == 2 { 1.0 } else { 0.0 };
            assert!((gb - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn priors_cases() {
        let h = mixture(HeadKind::Mos, 5, 3, 4, 1);
        assert_eq!(mixture_priors(&[0.1, 0.2, 0.3, 0.4], &h).unwrap(), vec![1.0]);
        let mut h = mixture(HeadKind::Mos, 5, 3, 4, 4);
        let p = mixture_priors(&[0.1, -0.2, 0.3, 0.9], &h).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0));
        h.w_pi.fill(0.0);
        let p = mixture_priors(&[0.1, -0.2, 0.3, 0.9], &h).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn contexts_cases() {
        let mut h = mixture(HeadKind::Mos, 5, 3, 4, 2);
        let c = mixture_contexts(&[5.0, -7.0, 9.0, 3.0], &h).unwrap();
        assert_eq!(c.shape(), (2, 3));
        assert!(c.as_slice().iter().all(|v| v.abs() < 1.0));
        for m in &mut h.w_h {
            m.fill(0.0);
        }
        let c = mixture_contexts(&[5.0, -7.0, 9.0, 3.0], &h).unwrap();
        assert!(c.as_slice().iter().all(|&v| v == 0.0));

        let scalar = MixtureHead {
            kind: MixtureKind::Mos,
            w: Matrix::from_rows(&[vec![1.0]]).unwrap(),
            w_h: vec![Matrix::from_rows(&[vec![0.5]]).unwrap()],
            b_h: Some(Matrix::zeros(1, 1)),
            w_pi: Matrix::zeros(1, 1),
            b_pi: None,
        };
        let c = mixture_contexts(&[2.0], &scalar).unwrap();
        assert_eq!(c[(0, 0)], 1f64.tanh());
    }

    #[test]
    fn mos_weighted_average_by_hand() {
        // Component log-probs and priors are set through explicit contexts.
        let comp = [[0.5, 0.3, 0.2], [0.1, 0.1, 0.8]];
        let w = Matrix::identity(3);
        let contexts: Vec<Matrix> = comp
            .iter()
            .map(|p| Matrix::from_rows(&[p.iter().map(|v: &f64| v.ln()).collect()]).unwrap())
            .collect();
        let priors = Matrix::from_rows(&[vec![0.25, 0.75]]).unwrap();
        let lp = mos_logprob_matrix(&contexts, &priors, &w).unwrap();
        for (got, want) in lp.row(0).iter().zip([0.2, 0.15, 0.65]) {
            assert!((got - f64::ln(want)).abs() < 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn mos_rejects_unnormalized_priors() {
        let ctx = vec![Matrix::zeros(1, 2), Matrix::zeros(1, 2)];
        let priors = Matrix::from_rows(&[vec![0.5, 0.6]]).unwrap();
        assert!(mos_logprob_matrix(&ctx, &priors, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn mos_k1_reduces_to_tanh_softmax() {
        let h = mixture(HeadKind::Mos, 6, 3, 4, 1);
        let s = SoftmaxHead {
            w: h.w.clone(),
            bias: None,
            projection: Projection::Tanh {
                weight: h.w_h[0].clone(),
                bias: h.b_h.as_ref().map(|b| b.row(0).to_vec()),
            },
        };
        let g = [0.3, -0.6, 1.2, 0.05];
        let a = mos_forward(&g, &h).unwrap();
        let b = softmax_forward(&g, &s).unwrap();
        let c = moc_forward(&g, &h).unwrap();
        for ((x, y), z) in a.iter().zip(&b).zip(&c) {
            assert!((x - y).abs() < 1e-12);
            assert!((x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_components_collapse() {
        let mut h = mixture(HeadKind::Mos, 6, 3, 4, 3);
        let first = h.w_h[0].clone();
        for m in &mut h.w_h {
            *m = first.clone();
        }
        let mut single = h.clone();
        single.w_h.truncate(1);
        single.w_pi = Matrix::zeros(1, 4);
        single.b_h = h.b_h.as_ref().map(|b| Matrix::from_rows(&[b.row(0).to_vec()]).unwrap());
        single.b_pi = Some(vec![0.0]);
        let g = [0.9, -0.1, 0.4, -2.0];
        let a = mos_forward(&g, &h).unwrap();
        let b = mos_forward(&g, &single).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_are_normalized() {
        for kind in HeadKind::ALL {
            let head = Head::init(&HeadConfig::new(kind, 3, 3), 9, 5, &mut rng()).unwrap();
            let g = Matrix::from_fn(4, 5, |r, c| (r as f64 - c as f64) * 0.7);
            let lp = head.forward(&g).unwrap();
            for row in lp.logprobs().row_iter() {
                assert!(log_sum_exp(row).unwrap().abs() < 1e-9, "{kind}");
            }
        }
    }

    #[test]
    fn batch_matches_per_row_bitwise() {
        for kind in HeadKind::ALL {
            let head = Head::init(&HeadConfig::new(kind, 3, 2), 6, 4, &mut rng()).unwrap();
            let g = Matrix::from_fn(5, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.6);
            let batch = head.forward(&g).unwrap();
            for r in 0..5 {
                let one = head.forward(&Matrix::from_rows(&[g.row(r).to_vec()]).unwrap()).unwrap();
                assert_eq!(one.logprobs().row(0), batch.logprobs().row(r), "{kind}");
            }
        }
    }

    #[test]
    fn param_counts() {
        let mut sm = HeadConfig::new(HeadKind::Softmax, 4, 1);
        assert_eq!(sm.param_count(10, 4), 50);
        sm.output_bias = false;
        assert_eq!(sm.param_count(10, 4), 40);
        let mos = HeadConfig::new(HeadKind::Mos, 4, 2);
        assert_eq!(mos.param_count(10, 6), 110);
        for kind in HeadKind::ALL {
            for (d, d_g, k) in [(3, 3, 1), (3, 5, 2), (6, 4, 3)] {
                let cfg = HeadConfig::new(kind, d, k);
                let head = Head::init(&cfg, 11, d_g, &mut rng()).unwrap();
                assert_eq!(head.num_scalars(), cfg.param_count(11, d_g), "{kind} {d} {d_g}");
            }
        }
    }

    #[test]
    fn invalid_target_rejected() {
        let head = Head::init(&HeadConfig::new(HeadKind::Mos, 3, 2), 5, 4, &mut rng()).unwrap();
        assert!(head_backward(&head, &[0.0; 4], 5).is_err());
    }

    #[test]
    fn moc_is_softmax_of_mixed_context() {
        let h = mixture(HeadKind::Moc, 7, 3, 4, 3);
        let g = [0.2, 1.1, -0.7, 0.4];
        let pri = mixture_priors(&g, &h).unwrap();
        let ctx = mixture_contexts(&g, &h).unwrap();
        let mixed: Vec<f64> = (0..3)
            .map(|j| (0..3).map(|k| pri[k] * ctx[(k, j)]).sum())
            .collect();
        let direct = row_log_softmax(&crate::linalg::matmul_nt(&Matrix::from_rows(&[mixed]).unwrap(), &h.w).unwrap());
        let moc = moc_forward(&g, &h).unwrap();
        for (a, b) in moc.iter().zip(direct.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
