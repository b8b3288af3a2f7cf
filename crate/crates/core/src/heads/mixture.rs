use rand::Rng;

use super::explicit::{
    moc_logprobs, moc_logprobs_backward, mos_logprobs, mos_logprobs_backward, MixtureGrads,
    MocCache, MosCache,
};
use crate::error::{contract, Result};
use crate::linalg::{add_matmul_tn, matmul, matmul_nt, softmax_in_place, Matrix};
use crate::params::{
    matrix_view, matrix_view_mut, uniform_matrix, vector_view, vector_view_mut, Parameters, View,
    ViewMut,
};

/// Where the mixture happens: over output distributions (MoS) or over
/// context vectors ahead of a single softmax (MoC).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixtureKind {
    Mos,
    Moc,
}

/// Parameters shared by the MoS and MoC heads.
///
/// Component `k` has context `hₖ = tanh(W_h[k] g + b_h[k])` and prior logit
/// `w_pi[k]·g + b_pi[k]`; all components share the output embedding `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureHead {
    pub kind: MixtureKind,
    /// `M × d`
    pub w: Matrix,
    /// `K` matrices of `d × d_g`
    pub w_h: Vec<Matrix>,
    /// `K × d`
    pub b_h: Option<Matrix>,
    /// `K × d_g`
    pub w_pi: Matrix,
    /// `K`
    pub b_pi: Option<Vec<f64>>,
}

pub struct MixtureCache {
    g: Matrix,
    contexts: Vec<Matrix>,
    inner: Inner,
    pub logprobs: Matrix,
}

enum Inner {
    Mos(MosCache),
    Moc(MocCache),
}

impl MixtureHead {
    pub(crate) fn init<R: Rng>(
        kind: MixtureKind,
        vocab: usize,
        d: usize,
        d_g: usize,
        k: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        contract!(k >= 1, "mixture needs K >= 1");
        Ok(MixtureHead {
            kind,
            w: uniform_matrix(vocab, d, rng),
            w_h: (0..k).map(|_| uniform_matrix(d, d_g, rng)).collect(),
            b_h: with_bias.then(|| Matrix::zeros(k, d)),
            w_pi: uniform_matrix(k, d_g, rng),
            b_pi: with_bias.then(|| vec![0.0; k]),
        })
    }

    pub fn k(&self) -> usize {
        self.w_h.len()
    }

    pub fn d(&self) -> usize {
        self.w.cols()
    }

    pub fn d_g(&self) -> usize {
        self.w_pi.cols()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.scale_all(0.0);
        z
    }

    fn check_input(&self, g: &Matrix) -> Result<()> {
        contract!(
            g.cols() == self.d_g(),
            "input width {} does not match head input width {}",
            g.cols(),
            self.d_g()
        );
        Ok(())
    }

    /// Prior logits `N × K`.
    pub fn prior_logits(&self, g: &Matrix) -> Result<Matrix> {
        self.check_input(g)?;
        let mut u = matmul_nt(g, &self.w_pi)?;
        if let Some(b) = &self.b_pi {
            for r in 0..u.rows() {
                for (x, bv) in u.row_mut(r).iter_mut().zip(b) {
                    *x += bv;
                }
            }
        }
        Ok(u)
    }

    /// Mixture weights `N × K`; every row sums to one.
    pub fn priors(&self, g: &Matrix) -> Result<Matrix> {
        let mut p = self.prior_logits(g)?;
        for r in 0..p.rows() {
            softmax_in_place(p.row_mut(r));
        }
        Ok(p)
    }

    /// Component contexts, one `N × d` matrix per component.
    pub fn contexts(&self, g: &Matrix) -> Result<Vec<Matrix>> {
        self.check_input(g)?;
        self.w_h
            .iter()
            .enumerate()
            .map(|(k, wh)| {
                let mut z = matmul_nt(g, wh)?;
                for r in 0..z.rows() {
                    let row = z.row_mut(r);
                    if let Some(b) = &self.b_h {
                        for (x, bv) in row.iter_mut().zip(b.row(k)) {
                            *x += bv;
                        }
                    }
                    row.iter_mut().for_each(|x| *x = x.tanh());
                }
                Ok(z)
            })
            .collect()
    }

    /// Evaluates with the given mixture semantics, ignoring `self.kind`.
    pub fn forward_as(&self, kind: MixtureKind, g: &Matrix) -> Result<MixtureCache> {
        let contexts = self.contexts(g)?;
        let u = self.prior_logits(g)?;
        let (inner, logprobs) = match kind {
            MixtureKind::Mos => {
                let c = mos_logprobs(&contexts, &u, &self.w)?;
                let lp = c.logprobs.clone();
                (Inner::Mos(c), lp)
            }
            MixtureKind::Moc => {
                let c = moc_logprobs(&contexts, &u, &self.w)?;
                let lp = c.logprobs.clone();
                (Inner::Moc(c), lp)
            }
        };
        Ok(MixtureCache {
            g: g.clone(),
            contexts,
            inner,
            logprobs,
        })
    }

    pub fn forward(&self, g: &Matrix) -> Result<MixtureCache> {
        self.forward_as(self.kind, g)
    }

    pub fn backward(&self, cache: &MixtureCache, grad_lp: &Matrix) -> Result<(MixtureHead, Matrix)> {
        let MixtureGrads {
            contexts: dctx,
            prior_logits: du,
            w: dw,
        } = match &cache.inner {
            Inner::Mos(c) => mos_logprobs_backward(&cache.contexts, &self.w, c, grad_lp)?,
            Inner::Moc(c) => moc_logprobs_backward(&cache.contexts, &self.w, c, grad_lp)?,
        };
        let mut grads = self.zeros_like();
        grads.w = dw;
        let mut grad_g = matmul(&du, &self.w_pi)?;
        add_matmul_tn(&mut grads.w_pi, &du, &cache.g)?;
        if let Some(b) = &mut grads.b_pi {
            for row in du.row_iter() {
                for (x, d) in b.iter_mut().zip(row) {
                    *x += d;
                }
            }
        }
        for (k, (mut dz, h)) in dctx.into_iter().zip(&cache.contexts).enumerate() {
            for (d, hv) in dz.as_mut_slice().iter_mut().zip(h.as_slice()) {
                *d *= 1.0 - hv * hv;
            }
            add_matmul_tn(&mut grads.w_h[k], &dz, &cache.g)?;
            if let Some(b) = &mut grads.b_h {
                let brow = b.row_mut(k);
                for row in dz.row_iter() {
                    for (x, d) in brow.iter_mut().zip(row) {
                        *x += d;
                    }
                }
            }
            grad_g.axpy(1.0, &matmul(&dz, &self.w_h[k])?);
        }
        Ok((grads, grad_g))
    }
}

impl Parameters for MixtureHead {
    fn views(&self) -> Vec<View<'_>> {
        let mut out = vec![matrix_view("w", &self.w)];
        for (k, m) in self.w_h.iter().enumerate() {
            out.push(matrix_view(format!("w_h.{k}"), m));
        }
        if let Some(b) = &self.b_h {
            out.push(matrix_view("b_h", b));
        }
        out.push(matrix_view("w_pi", &self.w_pi));
        if let Some(b) = &self.b_pi {
            out.push(vector_view("b_pi", b));
        }
        out
    }

    fn views_mut(&mut self) -> Vec<ViewMut<'_>> {
        let mut out = vec![matrix_view_mut("w", &mut self.w)];
        for (k, m) in self.w_h.iter_mut().enumerate() {
            out.push(matrix_view_mut(format!("w_h.{k}"), m));
        }
        if let Some(b) = &mut self.b_h {
            out.push(matrix_view_mut("b_h", b));
        }
        out.push(matrix_view_mut("w_pi", &mut self.w_pi));
        if let Some(b) = &mut self.b_pi {
            out.push(vector_view_mut("b_pi", b));
        }
        out
    }
}
