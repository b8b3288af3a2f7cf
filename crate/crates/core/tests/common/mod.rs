#![allow(dead_code)]

use mosr::params::Parameters;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Per-tensor relative error `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)` between the
/// analytic gradient `grads` and central differences of `loss` at `params`.
pub fn fd_errors<P: Parameters + Clone>(
    params: &P,
    grads: &P,
    loss: impl Fn(&P) -> f64,
) -> Vec<(String, f64)> {
    let names: Vec<String> = params.views().into_iter().map(|v| v.name).collect();
    let analytic: Vec<Vec<f64>> = grads.views().into_iter().map(|v| v.data.to_vec()).collect();
    let mut out = Vec::new();
    for (t, name) in names.iter().enumerate() {
        let len = analytic[t].len();
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        for i in 0..len {
            let mut plus = params.clone();
            plus.views_mut()[t].data[i] += FD_STEP;
            let mut minus = params.clone();
            minus.views_mut()[t].data[i] -= FD_STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            let a = analytic[t][i];
            diff_sq += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
        }
        let rel = diff_sq.sqrt() / (a_sq.sqrt() + n_sq.sqrt()).max(1e-12);
        out.push((name.clone(), rel));
    }
    out
}

pub fn assert_fd<P: Parameters + Clone>(label: &str, params: &P, grads: &P, loss: impl Fn(&P) -> f64) {
    for (name, rel) in fd_errors(params, grads, loss) {
        assert!(rel < FD_TOLERANCE, "{label}: {name} relative error {rel:e}");
    }
}

/// `Σ w ⊙ m` over matching shapes.
pub fn weighted_sum(m: &mosr::linalg::Matrix, w: &mosr::linalg::Matrix) -> f64 {
    m.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
}
