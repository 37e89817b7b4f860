use nalgebra::{Matrix2, Vector2};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Bivariate normal density with a cached Cholesky factor.
#[derive(Clone, Debug)]
pub(crate) struct Gaussian2 {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    /// Lower Cholesky factor of `cov`.
    chol: Matrix2<f64>,
    log_norm: f64,
}

impl Gaussian2 {
    /// `None` unless `cov` is symmetric positive-definite.
    pub fn new(mean: Vector2<f64>, cov: Matrix2<f64>) -> Option<Self> {
        let a = cov[(0, 0)];
        let b = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
        let d = cov[(1, 1)];
        if !(a > 0.0) {
            return None;
        }
        let l00 = a.sqrt();
        let l10 = b / l00;
        let r = d - l10 * l10;
        if !(r > 0.0) || !r.is_finite() {
            return None;
        }
        let l11 = r.sqrt();
        Some(Gaussian2 {
            mean,
            cov: Matrix2::new(a, b, b, d),
            chol: Matrix2::new(l00, 0.0, l10, l11),
            log_norm: -LN_2PI - (l00 * l11).ln(),
        })
    }

    pub fn ln_pdf(&self, x: &Vector2<f64>) -> f64 {
        let d = x - self.mean;
        // solve L u = d by forward substitution
        let u0 = d.x / self.chol[(0, 0)];
        let u1 = (d.y - self.chol[(1, 0)] * u0) / self.chol[(1, 1)];
        self.log_norm - 0.5 * (u0 * u0 + u1 * u1)
    }

    /// `mean + L z` for a standard normal pair `z`.
    pub fn transform(&self, z: &Vector2<f64>) -> Vector2<f64> {
        self.mean + self.chol * z
    }
}

/// Eigenvalues of a symmetric 2×2 matrix, largest first.
pub(crate) fn eigenvalues(cov: &Matrix2<f64>) -> [f64; 2] {
    let e = cov.symmetric_eigenvalues();
    [e[0].max(e[1]), e[0].min(e[1])]
}

pub(crate) fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
