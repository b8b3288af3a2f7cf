//! Head arithmetic over explicit context matrices.
//!
//! These functions take the context vectors (one row per context) and the
//! output embedding `W` directly, with no encoder or projection in front.
//! The parameterized heads build their contexts and then call in here; the
//! synthetic fitting lab treats the contexts themselves as free parameters.
//!
//! Every backward takes `grad_lp`, the gradient of a scalar loss with respect
//! to the returned log-probability matrix. For a negative log-likelihood
//! that is `−onehot(target)/N`; for a KL fit it is `−P*/N`.

use crate::error::{contract, Result};
use crate::linalg::{
    add_matmul_tn, log_softmax_in_place, matmul, matmul_nt, softmax_in_place, Matrix,
};

/// `row_log_softmax(H Wᵀ + 1 biasᵀ)`.
pub fn softmax_logprobs(h: &Matrix, w: &Matrix, bias: Option<&[f64]>) -> Result<Matrix> {
    let mut out = matmul_nt(h, w)?;
    if let Some(b) = bias {
        contract!(
            b.len() == w.rows(),
            "output bias has length {}, vocabulary is {}",
            b.len(),
            w.rows()
        );
    }
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        if let Some(b) = bias {
            for (x, bv) in row.iter_mut().zip(b) {
                *x += bv;
            }
        }
        log_softmax_in_place(row);
    }
    Ok(out)
}

pub struct SoftmaxGrads {
    pub h: Matrix,
    pub w: Matrix,
    pub bias: Vec<f64>,
}

/// Gradient of the logits, `γ − p·Σγ` per row.
fn logit_grad(logprobs: &Matrix, grad_lp: &Matrix) -> Matrix {
    let mut g = grad_lp.clone();
    for r in 0..g.rows() {
        let total: f64 = grad_lp.row(r).iter().sum();
        for (x, &lp) in g.row_mut(r).iter_mut().zip(logprobs.row(r)) {
            *x -= lp.exp() * total;
        }
    }
    g
}

pub fn softmax_logprobs_backward(
    h: &Matrix,
    w: &Matrix,
    logprobs: &Matrix,
    grad_lp: &Matrix,
) -> Result<SoftmaxGrads> {
    contract!(
        grad_lp.shape() == logprobs.shape(),
        "log-prob gradient is {}x{}, expected {}x{}",
        grad_lp.rows(),
        grad_lp.cols(),
        logprobs.rows(),
        logprobs.cols()
    );
    let dlogits = logit_grad(logprobs, grad_lp);
    let gh = matmul(&dlogits, w)?;
    let mut gw = Matrix::zeros(w.rows(), w.cols());
    add_matmul_tn(&mut gw, &dlogits, h)?;
    let mut gb = vec![0.0; w.rows()];
    for row in dlogits.row_iter() {
        for (b, d) in gb.iter_mut().zip(row) {
            *b += d;
        }
    }
    Ok(SoftmaxGrads {
        h: gh,
        w: gw,
        bias: gb,
    })
}

fn check_mixture_shapes(contexts: &[Matrix], prior: &Matrix, w: &Matrix) -> Result<()> {
    contract!(!contexts.is_empty(), "mixture needs at least one component");
    let (n, d) = contexts[0].shape();
    contract!(
        contexts.iter().all(|h| h.shape() == (n, d)),
        "mixture components have different shapes"
    );
    contract!(
        prior.shape() == (n, contexts.len()),
        "prior matrix is {}x{}, expected {n}x{}",
        prior.rows(),
        prior.cols(),
        contexts.len()
    );
    contract!(
        w.cols() == d,
        "context width {d} does not match embedding width {}",
        w.cols()
    );
    Ok(())
}

fn row_log_softmax_owned(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        log_softmax_in_place(out.row_mut(r));
    }
    out
}

/// Intermediate values of a mixture-of-softmaxes evaluation.
pub struct MosCache {
    pub log_priors: Matrix,
    /// Per-component log-probabilities, each `N × M`.
    pub component_logprobs: Vec<Matrix>,
    pub logprobs: Matrix,
}

/// `log Σₖ πₖ softmax(Hₖ Wᵀ)` evaluated in log space, with `log π` given
/// directly (`N × K`).
pub fn mos_logprobs_from_log_priors(
    contexts: &[Matrix],
    log_priors: &Matrix,
    w: &Matrix,
) -> Result<MosCache> {
    check_mixture_shapes(contexts, log_priors, w)?;
    let k = contexts.len();
    let component_logprobs: Vec<Matrix> = contexts
        .iter()
        .map(|h| matmul_nt(h, w).map(|a| row_log_softmax_owned(&a)))
        .collect::<Result<_>>()?;
    let (n, m) = component_logprobs[0].shape();
    let mut out = Matrix::zeros(n, m);
    let mut terms = vec![0.0; k];
    for r in 0..n {
        let lp = log_priors.row(r);
        let orow = out.row_mut(r);
        for (j, o) in orow.iter_mut().enumerate() {
            let mut top = f64::NEG_INFINITY;
            for c in 0..k {
                terms[c] = lp[c] + component_logprobs[c][(r, j)];
                top = top.max(terms[c]);
            }
            let s: f64 = terms.iter().map(|t| (t - top).exp()).sum();
            *o = top + s.ln();
        }
    }
    Ok(MosCache {
        log_priors: log_priors.clone(),
        component_logprobs,
        logprobs: out,
    })
}

/// Mixture of softmaxes with priors given as logits (`N × K`).
pub fn mos_logprobs(contexts: &[Matrix], prior_logits: &Matrix, w: &Matrix) -> Result<MosCache> {
    mos_logprobs_from_log_priors(contexts, &row_log_softmax_owned(prior_logits), w)
}

pub struct MixtureGrads {
    pub contexts: Vec<Matrix>,
    pub prior_logits: Matrix,
    pub w: Matrix,
}

pub fn mos_logprobs_backward(
    contexts: &[Matrix],
    w: &Matrix,
    cache: &MosCache,
    grad_lp: &Matrix,
) -> Result<MixtureGrads> {
    contract!(
        grad_lp.shape() == cache.logprobs.shape(),
        "log-prob gradient shape mismatch"
    );
    let k = contexts.len();
    let (n, m) = cache.logprobs.shape();
    let mut dlogits = vec![Matrix::zeros(n, m); k];
    let mut dprior = Matrix::zeros(n, k);
    let mut s = vec![0.0; k];
    let mut resp = vec![0.0; m];
    for r in 0..n {
        let gamma = grad_lp.row(r);
        let out = cache.logprobs.row(r);
        let lpri = cache.log_priors.row(r);
        for c in 0..k {
            let lpk = cache.component_logprobs[c].row(r);
            let mut sc = 0.0;
            for j in 0..m {
                // posterior responsibility of component c for token j
                resp[j] = (lpri[c] + lpk[j] - out[j]).exp();
                sc += gamma[j] * resp[j];
            }
            s[c] = sc;
            let drow = dlogits[c].row_mut(r);
            for j in 0..m {
                drow[j] = gamma[j] * resp[j] - lpk[j].exp() * sc;
            }
        }
        let total: f64 = s.iter().sum();
        for c in 0..k {
            dprior[(r, c)] = s[c] - lpri[c].exp() * total;
        }
    }
    let mut gw = Matrix::zeros(w.rows(), w.cols());
    let mut gctx = Vec::with_capacity(k);
    for (dl, h) in dlogits.iter().zip(contexts) {
        gctx.push(matmul(dl, w)?);
        add_matmul_tn(&mut gw, dl, h)?;
    }
    Ok(MixtureGrads {
        contexts: gctx,
        prior_logits: dprior,
        w: gw,
    })
}

/// Intermediate values of a mixture-of-contexts evaluation.
pub struct MocCache {
    pub priors: Matrix,
    /// `h′ = Σₖ πₖ hₖ`, one row per context.
    pub mixed: Matrix,
    pub logprobs: Matrix,
}

/// Mixes the context vectors with the priors, then applies one softmax.
pub fn moc_logprobs(contexts: &[Matrix], prior_logits: &Matrix, w: &Matrix) -> Result<MocCache> {
    check_mixture_shapes(contexts, prior_logits, w)?;
    let mut priors = prior_logits.clone();
    for r in 0..priors.rows() {
        softmax_in_place(priors.row_mut(r));
    }
    let mixed = mix_contexts(contexts, &priors);
    let logprobs = softmax_logprobs(&mixed, w, None)?;
    Ok(MocCache {
        priors,
        mixed,
        logprobs,
    })
}

pub(crate) fn mix_contexts(contexts: &[Matrix], priors: &Matrix) -> Matrix {
    let (n, d) = contexts[0].shape();
    let mut mixed = Matrix::zeros(n, d);
    for r in 0..n {
        let row = mixed.row_mut(r);
        for (c, h) in contexts.iter().enumerate() {
            let p = priors[(r, c)];
            for (x, v) in row.iter_mut().zip(h.row(r)) {
                *x += p * v;
            }
        }
    }
    mixed
}

pub fn moc_logprobs_backward(
    contexts: &[Matrix],
    w: &Matrix,
    cache: &MocCache,
    grad_lp: &Matrix,
) -> Result<MixtureGrads> {
    let sg = softmax_logprobs_backward(&cache.mixed, w, &cache.logprobs, grad_lp)?;
    let k = contexts.len();
    let n = cache.mixed.rows();
    let mut gctx = vec![Matrix::zeros(n, w.cols()); k];
    let mut dprior = Matrix::zeros(n, k);
    for r in 0..n {
        let gm = sg.h.row(r);
        let pri = cache.priors.row(r);
        let mut dpi = vec![0.0; k];
        for c in 0..k {
            dpi[c] = crate::linalg::dot(contexts[c].row(r), gm);
            for (x, g) in gctx[c].row_mut(r).iter_mut().zip(gm) {
                *x = pri[c] * g;
            }
        }
        let weighted: f64 = pri.iter().zip(&dpi).map(|(p, d)| p * d).sum();
        for c in 0..k {
            dprior[(r, c)] = pri[c] * (dpi[c] - weighted);
        }
    }
    Ok(MixtureGrads {
        contexts: gctx,
        prior_logits: dprior,
        w: sg.w,
    })
}

/// Batch mixture-of-softmaxes log-probability matrix from explicit context
/// matrices and prior probabilities whose rows must sum to one.
pub fn mos_logprob_matrix(contexts: &[Matrix], priors: &Matrix, w: &Matrix) -> Result<Matrix> {
    for (r, row) in priors.row_iter().enumerate() {
        let s: f64 = row.iter().sum();
        contract!(
            (s - 1.0).abs() <= 1e-9 && row.iter().all(|&p| p >= 0.0),
            "prior row {r} sums to {s}, not 1"
        );
    }
    let log_priors = priors.map(f64::ln);
    Ok(mos_logprobs_from_log_priors(contexts, &log_priors, w)?.logprobs)
}
