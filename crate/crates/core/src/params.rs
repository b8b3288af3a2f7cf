//! Named views over learnable tensors.
//!
//! Every parameter container exposes its tensors in one fixed order. The
//! optimizer, gradient clipping, checkpoint I/O and finite-difference checks
//! all walk that order, and gradient containers share their parameters'
//! type, so `params.views()` and `grads.views()` line up index by index.

use rand::Rng;

use crate::linalg::Matrix;

pub struct View<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ViewMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

pub trait Parameters {
    fn views(&self) -> Vec<View<'_>>;
    fn views_mut(&mut self) -> Vec<ViewMut<'_>>;

    fn num_scalars(&self) -> usize {
        self.views().iter().map(|v| v.data.len()).sum()
    }

    fn global_norm(&self) -> f64 {
        self.views()
            .iter()
            .flat_map(|v| v.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    fn scale_all(&mut self, s: f64) {
        for v in self.views_mut() {
            v.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    fn all_finite(&self) -> bool {
        self.views()
            .iter()
            .all(|v| v.data.iter().all(|x| x.is_finite()))
    }

    /// `self += alpha * other`; both must have identical layout.
    fn add_scaled(&mut self, alpha: f64, other: &Self)
    where
        Self: Sized,
    {
        let src = other.views();
        let dst = self.views_mut();
        assert_eq!(src.len(), dst.len(), "parameter layouts differ");
        for (d, s) in dst.into_iter().zip(src) {
            assert_eq!(d.shape, s.shape, "shape mismatch for {}", d.name);
            for (x, y) in d.data.iter_mut().zip(s.data) {
                *x += alpha * y;
            }
        }
    }
}

pub(crate) fn matrix_view<'a>(name: impl Into<String>, m: &'a Matrix) -> View<'a> {
    View {
        name: name.into(),
        shape: vec![m.rows(), m.cols()],
        data: m.as_slice(),
    }
}

pub(crate) fn matrix_view_mut<'a>(name: impl Into<String>, m: &'a mut Matrix) -> ViewMut<'a> {
    ViewMut {
        name: name.into(),
        shape: vec![m.rows(), m.cols()],
        data: m.as_mut_slice(),
    }
}

pub(crate) fn vector_view<'a>(name: impl Into<String>, v: &'a [f64]) -> View<'a> {
    View {
        name: name.into(),
        shape: vec![v.len()],
        data: v,
    }
}

pub(crate) fn vector_view_mut<'a>(name: impl Into<String>, v: &'a mut [f64]) -> ViewMut<'a> {
    ViewMut {
        name: name.into(),
        shape: vec![v.len()],
        data: v,
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, views: Vec<View<'a>>) -> impl Iterator<Item = View<'a>> + 'a {
    let prefix = prefix.to_owned();
    views.into_iter().map(move |mut v| {
        v.name = format!("{prefix}.{}", v.name);
        v
    })
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &str,
    views: Vec<ViewMut<'a>>,
) -> impl Iterator<Item = ViewMut<'a>> + 'a {
    let prefix = prefix.to_owned();
    views.into_iter().map(move |mut v| {
        v.name = format!("{prefix}.{}", v.name);
        v
    })
}

/// Half-width of the uniform initializer used for every weight.
pub const INIT_RANGE: f64 = 0.1;

pub(crate) fn uniform_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-INIT_RANGE..=INIT_RANGE))
}
