//! Small dense linear-algebra helpers shared by the GP code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter for the first retry; later retries go up by a decade each.
pub const JITTER_REL: f64 = 1e-8;
/// Number of decade increases after the first jittered attempt.
pub const JITTER_RETRIES: usize = 3;

/// Cholesky factor together with the diagonal jitter that made it succeed.
#[derive(Clone, Debug)]
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factor {
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `L^{-1} b` for the lower Cholesky factor `L`.
    pub fn whiten_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("Cholesky diagonal is positive")
    }

    pub fn whiten_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("Cholesky diagonal is positive")
    }

    /// `A^{-1} = L^{-T} L^{-1}`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.chol.l_dirty().nrows();
        let linv = self.whiten_mat(&DMatrix::identity(n, n));
        linv.tr_mul(&linv)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }
}

/// Factorizes a symmetric matrix, adding `1e-8 * mean(diag)` and up to three
/// decade increases of it when the plain factorization fails.
pub fn cholesky_jittered(mat: &DMatrix<f64>) -> Result<Factor> {
    if let Some(chol) = Cholesky::new(mat.clone()) {
        return Ok(Factor { chol, jitter: 0.0 });
    }
    let n = mat.nrows().max(1);
    let mean_diag = (mat.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = JITTER_REL * mean_diag;
    for _ in 0..=JITTER_RETRIES {
        let mut m = mat.clone();
        for i in 0..mat.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(Factor { chol, jitter });
        }
        jitter *= 10.0;
    }
    Err(Error::Factorization { jitter: jitter / 10.0 })
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn add_diagonal(m: &mut DMatrix<f64>, v: f64) {
    for i in 0..m.nrows() {
        m[(i, i)] += v;
    }
}

/// `log(sum(exp(xs)))`, tolerant of `-inf` entries.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights into probabilities in place and returns their log-normalizer.
pub fn softmax_in_place(xs: &mut [f64]) -> f64 {
    let lse = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x = (*x - lse).exp();
    }
    // exact renormalization so rows sum to one to the last ulp we can get
    let total: f64 = xs.iter().sum();
    for x in xs.iter_mut() {
        *x /= total;
    }
    lse
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
