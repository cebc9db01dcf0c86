//! Gaussian-process regression primitives built on Cholesky solves.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelModel;
use crate::linalg::{add_diagonal, cholesky_jittered, symmetrize, Factor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Variances more negative than this are treated as logic errors, not roundoff.
pub const NEGATIVE_VARIANCE_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// The factorization of `K + noise_var * I` shared by all GP computations on one set of inputs.
#[derive(Clone, Debug)]
pub struct NoisyKernel {
    pub k: DMatrix<f64>,
    pub noise_var: f64,
    pub factor: Factor,
}

impl NoisyKernel {
    pub fn new(k: &DMatrix<f64>, noise_var: f64) -> Result<Self> {
        if !(noise_var >= 0.0) {
            return Err(Error::Config(format!("noise variance must be nonnegative, got {noise_var}")));
        }
        let mut a = k.clone();
        add_diagonal(&mut a, noise_var);
        symmetrize(&mut a);
        let factor = cholesky_jittered(&a)?;
        Ok(NoisyKernel {
            k: k.clone(),
            noise_var,
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    /// Log density of `N(0, K + noise_var I)` at `r`, together with `(K + noise_var I)^{-1} r`.
    pub fn log_density(&self, r: &DVector<f64>) -> (f64, DVector<f64>) {
        let alpha = self.factor.solve_vec(r);
        let n = r.len() as f64;
        let ll = -0.5 * r.dot(&alpha) - 0.5 * self.factor.log_det() - 0.5 * n * LN_2PI;
        (ll, alpha)
    }

    /// Posterior mean of the latent function given `alpha = (K + noise_var I)^{-1} r`.
    pub fn posterior_mean(&self, r: &DVector<f64>, alpha: &DVector<f64>) -> DVector<f64> {
        if self.noise_var == 0.0 {
            return r.clone();
        }
        r - alpha * self.noise_var
    }

    /// `K - K (K + noise_var I)^{-1} K`, symmetrized with a nonnegative diagonal.
    pub fn posterior_cov(&self) -> DMatrix<f64> {
        let n = self.dim();
        if self.noise_var == 0.0 {
            return DMatrix::zeros(n, n);
        }
        let sol = self.factor.solve_mat(&self.k);
        let mut c = &self.k - &self.k * sol;
        symmetrize(&mut c);
        for i in 0..n {
            if c[(i, i)] < 0.0 {
                c[(i, i)] = 0.0;
            }
        }
        c
    }
}

/// Posterior moments of the latent function given `residual = latent + noise`.
pub fn posterior_moments(
    k: &DMatrix<f64>,
    noise_var: f64,
    residual: &DVector<f64>,
) -> Result<PosteriorMoments> {
    if k.nrows() != residual.len() || k.ncols() != residual.len() {
        return Err(Error::Dimension(format!(
            "kernel {}x{} vs residual {}",
            k.nrows(),
            k.ncols(),
            residual.len()
        )));
    }
    let nk = NoisyKernel::new(k, noise_var)?;
    let alpha = nk.factor.solve_vec(residual);
    Ok(PosteriorMoments {
        mean: nk.posterior_mean(residual, &alpha),
        cov: nk.posterior_cov(),
    })
}

/// `log N(y; mean, K + noise_var I)`.
pub fn log_marginal(
    mean: &DVector<f64>,
    k: &DMatrix<f64>,
    noise_var: f64,
    y: &DVector<f64>,
) -> Result<f64> {
    if mean.len() != y.len() || k.nrows() != y.len() {
        return Err(Error::Dimension("log_marginal inputs disagree in length".into()));
    }
    let nk = NoisyKernel::new(k, noise_var)?;
    let (ll, _) = nk.log_density(&(y - mean));
    if !ll.is_finite() {
        return Err(Error::NonFinite("log marginal"));
    }
    Ok(ll)
}

/// Predictive mean and variance of the latent function at `test_time`.
pub fn predictive(
    train_times: &[f64],
    residual: &DVector<f64>,
    k_train: &DMatrix<f64>,
    noise_var: f64,
    kernel: &KernelModel,
    test_time: f64,
) -> Result<(f64, f64)> {
    let nk = NoisyKernel::new(k_train, noise_var)?;
    predictive_with(&nk, train_times, residual, kernel, test_time)
}

/// As [`predictive`] with a precomputed factorization.
pub fn predictive_with(
    nk: &NoisyKernel,
    train_times: &[f64],
    residual: &DVector<f64>,
    kernel: &KernelModel,
    test_time: f64,
) -> Result<(f64, f64)> {
    let kx = kernel.cross(test_time, train_times)?;
    let prior = kernel
        .eval(test_time, test_time)
        .ok_or_else(|| Error::Contract(format!("time {test_time} is off the fixed kernel's grid")))?;
    let alpha = nk.factor.solve_vec(residual);
    let mean = kx.dot(&alpha);
    let v = nk.factor.solve_vec(&kx);
    let mut var = prior - kx.dot(&v);
    if var < 0.0 {
        if var < -NEGATIVE_VARIANCE_TOL * prior.abs().max(1.0) {
            return Err(Error::Contract(format!("negative predictive variance {var:e}")));
        }
        var = 0.0;
    }
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::RbfParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn posterior_scalar_example() {
        let k = DMatrix::from_element(1, 1, 1.0);
        let p = posterior_moments(&k, 1.0, &DVector::from_vec(vec![2.0])).unwrap();
        assert!((p.mean[0] - 1.0).abs() < 1e-15);
        assert!((p.cov[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn posterior_zero_residual_and_large_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random_spd(&mut rng, 4);
        let p = posterior_moments(&k, 0.3, &DVector::zeros(4)).unwrap();
        assert_eq!(p.mean, DVector::zeros(4));
        let k1 = DMatrix::from_element(1, 1, 1.0);
        let p = posterior_moments(&k1, 1e12, &DVector::from_vec(vec![1.0])).unwrap();
        assert!(p.mean[0].abs() < 1e-10);
        assert!((p.cov[(0, 0)] - 1.0).abs() < 1e-10);
    }

    // oracle: explicit dense inverse
    #[test]
    fn posterior_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.random_range(1..=8);
            let k = random_spd(&mut rng, n);
            let s2 = rng.random_range(0.05..2.0);
            let r = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let inv = (&k + DMatrix::identity(n, n) * s2).try_inverse().unwrap();
            let mu = &k * &inv * &r;
            let c = &k - &k * &inv * &k;
            let p = posterior_moments(&k, s2, &r).unwrap();
            assert!((p.mean - mu).amax() < 1e-10);
            assert!((p.cov - c).amax() < 1e-10);
        }
    }

    #[test]
    fn log_marginal_examples() {
        let k = DMatrix::from_element(1, 1, 1.0);
        let y = DVector::from_vec(vec![0.3]);
        let v = log_marginal(&y, &k, 1.0, &y).unwrap();
        assert!((v + 0.5 * (4.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((v + 1.26551).abs() < 1e-5);
        let off = log_marginal(&y, &k, 1.0, &DVector::from_vec(vec![0.5])).unwrap();
        assert!(v > off);

        let z = DMatrix::zeros(3, 3);
        let y = DVector::from_vec(vec![0.1, -0.4, 1.2]);
        let m = DVector::from_vec(vec![0.0, 0.2, 0.2]);
        let direct: f64 = (&y - &m)
            .iter()
            .map(|d| -0.5 * d * d - 0.5 * LN_2PI)
            .sum();
        assert!((log_marginal(&m, &z, 1.0, &y).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn log_marginal_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = random_spd(&mut rng, 4);
        let y = DVector::from_fn(4, |_, _| rng.random::<f64>());
        let m = DVector::from_fn(4, |_, _| rng.random::<f64>());
        let perm = [2usize, 0, 3, 1];
        let kp = k.select_rows(&perm).select_columns(&perm);
        let yp = DVector::from_fn(4, |i, _| y[perm[i]]);
        let mp = DVector::from_fn(4, |i, _| m[perm[i]]);
        let a = log_marginal(&m, &k, 0.2, &y).unwrap();
        let b = log_marginal(&mp, &kp, 0.2, &yp).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn predictive_examples() {
        let kern = KernelModel::Rbf(RbfParams::new(1.0, 0.1).unwrap());
        let k = DMatrix::from_element(1, 1, 1.0);
        let r = DVector::from_vec(vec![0.7]);
        let (m, v) = predictive(&[0.3], &r, &k, 1e-12, &kern, 0.3).unwrap();
        assert!((m - 0.7).abs() < 1e-9);
        assert!(v.abs() < 1e-9);
        let (m, v) = predictive(&[0.3], &r, &k, 0.01, &kern, 1e6).unwrap();
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn predictive_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let p = RbfParams::new(rng.random_range(0.5..2.0), rng.random_range(0.05..0.5)).unwrap();
            let kern = KernelModel::Rbf(p);
            let times: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let k = kern.entries(&times).unwrap();
            let r = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let s2 = 0.1;
            let x = rng.random::<f64>();
            let kx = DVector::from_fn(3, |i, _| p.eval(times[i], x));
            let inv = (&k + DMatrix::identity(3, 3) * s2).try_inverse().unwrap();
            let m = kx.dot(&(&inv * &r));
            let v = p.amplitude - kx.dot(&(&inv * &kx));
            let (pm, pv) = predictive(&times, &r, &k, s2, &kern, x).unwrap();
            assert!((pm - m).abs() < 1e-10);
            assert!((pv - v).abs() < 1e-10);
            assert!(pv <= p.amplitude + 1e-10);
        }
    }
}
