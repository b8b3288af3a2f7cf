use rand::Rng;

use super::explicit::{softmax_logprobs, softmax_logprobs_backward};
use crate::error::{contract, Result};
use crate::linalg::{add_matmul_tn, matmul, matmul_nt, Matrix};
use crate::params::{
    matrix_view, matrix_view_mut, uniform_matrix, vector_view, vector_view_mut, Parameters, View,
    ViewMut,
};

/// How the encoder output `g` becomes the context vector `h`.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    /// `h = g`; requires `d == d_g`.
    Identity,
    /// `h = P g` with `P: d × d_g`.
    Linear(Matrix),
    /// `h = tanh(P g + b)`, the single-component form of the mixture heads.
    Tanh { weight: Matrix, bias: Option<Vec<f64>> },
}

/// Plain softmax output layer: `log P(·|g) = log_softmax(W h + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead {
    /// `M × d` output embeddings.
    pub w: Matrix,
    pub bias: Option<Vec<f64>>,
    pub projection: Projection,
}

pub struct SoftmaxCache {
    g: Matrix,
    h: Matrix,
    pub logprobs: Matrix,
}

impl SoftmaxHead {
    pub(crate) fn init<R: Rng>(
        vocab: usize,
        d: usize,
        d_g: usize,
        output_bias: bool,
        projection: super::ProjectionKind,
        projection_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        use super::ProjectionKind as P;
        let w = uniform_matrix(vocab, d, rng);
        let projection = match projection.resolve(d, d_g) {
            P::Identity => {
                contract!(d == d_g, "identity projection needs d == d_g ({d} vs {d_g})");
                Projection::Identity
            }
            P::Linear => Projection::Linear(uniform_matrix(d, d_g, rng)),
            P::Tanh => Projection::Tanh {
                weight: uniform_matrix(d, d_g, rng),
                bias: projection_bias.then(|| vec![0.0; d]),
            },
            P::Auto => unreachable!("resolved above"),
        };
        Ok(SoftmaxHead {
            w,
            bias: output_bias.then(|| vec![0.0; vocab]),
            projection,
        })
    }

    pub fn d(&self) -> usize {
        self.w.cols()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.scale_all(0.0);
        z
    }

    fn context(&self, g: &Matrix) -> Result<Matrix> {
        match &self.projection {
            Projection::Identity => {
                contract!(
                    g.cols() == self.d(),
                    "input width {} does not match head width {}",
                    g.cols(),
                    self.d()
                );
                Ok(g.clone())
            }
            Projection::Linear(p) => matmul_nt(g, p),
            Projection::Tanh { weight, bias } => {
                let mut z = matmul_nt(g, weight)?;
                for r in 0..z.rows() {
                    let row = z.row_mut(r);
                    if let Some(b) = bias {
                        for (x, bv) in row.iter_mut().zip(b) {
                            *x += bv;
                        }
                    }
                    row.iter_mut().for_each(|x| *x = x.tanh());
                }
                Ok(z)
            }
        }
    }

    /// Log-probabilities for every row of `g` (`N × d_g`).
    pub fn forward(&self, g: &Matrix) -> Result<SoftmaxCache> {
        let h = self.context(g)?;
        let logprobs = softmax_logprobs(&h, &self.w, self.bias.as_deref())?;
        Ok(SoftmaxCache {
            g: g.clone(),
            h,
            logprobs,
        })
    }

    pub fn backward(&self, cache: &SoftmaxCache, grad_lp: &Matrix) -> Result<(SoftmaxHead, Matrix)> {
        let sg = softmax_logprobs_backward(&cache.h, &self.w, &cache.logprobs, grad_lp)?;
        let mut grads = self.zeros_like();
        grads.w = sg.w;
        if let Some(b) = &mut grads.bias {
            *b = sg.bias;
        }
        let grad_g = match (&self.projection, &mut grads.projection) {
            (Projection::Identity, _) => sg.h,
            (Projection::Linear(p), Projection::Linear(gp)) => {
                add_matmul_tn(gp, &sg.h, &cache.g)?;
                matmul(&sg.h, p)?
            }
            (Projection::Tanh { weight, .. }, Projection::Tanh { weight: gw, bias: gb }) => {
                let mut dz = sg.h;
                for (d, h) in dz.as_mut_slice().iter_mut().zip(cache.h.as_slice()) {
                    *d *= 1.0 - h * h;
                }
                add_matmul_tn(gw, &dz, &cache.g)?;
                if let Some(gb) = gb {
                    for row in dz.row_iter() {
                        for (b, d) in gb.iter_mut().zip(row) {
                            *b += d;
                        }
                    }
                }
                matmul(&dz, weight)?
            }
            _ => unreachable!("gradient layout mirrors parameters"),
        };
        Ok((grads, grad_g))
    }
}

impl Parameters for SoftmaxHead {
    fn views(&self) -> Vec<View<'_>> {
        let mut out = vec![matrix_view("w", &self.w)];
        if let Some(b) = &self.bias {
            out.push(vector_view("bias", b));
        }
        match &self.projection {
            Projection::Identity => {}
            Projection::Linear(p) => out.push(matrix_view("proj", p)),
            Projection::Tanh { weight, bias } => {
                out.push(matrix_view("proj", weight));
                if let Some(b) = bias {
                    out.push(vector_view("proj_bias", b));
                }
            }
        }
        out
    }

    fn views_mut(&mut self) -> Vec<ViewMut<'_>> {
        let mut out = vec![matrix_view_mut("w", &mut self.w)];
        if let Some(b) = &mut self.bias {
            out.push(vector_view_mut("bias", b));
        }
        match &mut self.projection {
            Projection::Identity => {}
            Projection::Linear(p) => out.push(matrix_view_mut("proj", p)),
            Projection::Tanh { weight, bias } => {
                out.push(matrix_view_mut("proj", weight));
                if let Some(b) = bias {
                    out.push(vector_view_mut("proj_bias", b));
                }
            }
        }
        out
    }
}
