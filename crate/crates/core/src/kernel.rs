//! Covariance functions: the RBF kernel, fixed (empirical) kernel matrices,
//! their gradients and the M-step updates of the individual-effect kernel.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::em::EStepState;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, softmax_in_place, symmetrize, Factor};

/// `K(t1, t2) = amplitude * exp(-(t1 - t2)^2 / denom)`.
///
/// `denom` is the squared-length denominator itself; the textbook form
/// `exp(-d^2 / (2 s^2))` corresponds to `denom = 2 s^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfParams {
    pub amplitude: f64,
    pub denom: f64,
}

impl RbfParams {
    pub fn new(amplitude: f64, denom: f64) -> Result<Self> {
        if !(amplitude > 0.0 && denom > 0.0 && amplitude.is_finite() && denom.is_finite()) {
            return Err(Error::Config(format!(
                "RBF parameters must be positive, got a={amplitude}, denom={denom}"
            )));
        }
        Ok(RbfParams { amplitude, denom })
    }

    pub fn from_lengthscale(amplitude: f64, lengthscale: f64) -> Result<Self> {
        Self::new(amplitude, 2.0 * lengthscale * lengthscale)
    }

    pub fn lengthscale(&self) -> f64 {
        (self.denom / 2.0).sqrt()
    }

    #[inline]
    pub fn eval(&self, t1: f64, t2: f64) -> f64 {
        let d = t1 - t2;
        self.amplitude * (-d * d / self.denom).exp()
    }
}

pub fn rbf_eval(params: &RbfParams, t1: f64, t2: f64) -> f64 {
    params.eval(t1, t2)
}

/// A kernel known only through its values on a fixed set of points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedKernel {
    pub points: Vec<f64>,
    pub matrix: DMatrix<f64>,
}

impl FixedKernel {
    pub fn new(points: Vec<f64>, mut matrix: DMatrix<f64>) -> Result<Self> {
        let n = points.len();
        if matrix.nrows() != n || matrix.ncols() != n {
            return Err(Error::Dimension(format!(
                "fixed kernel matrix is {}x{}, expected {n}x{n}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let asym = (&matrix - matrix.transpose()).abs().max();
        if asym > 1e-10 {
            return Err(Error::Contract(format!("fixed kernel asymmetric by {asym:e}")));
        }
        symmetrize(&mut matrix);
        if n > 0 {
            let min_eig = matrix.clone().symmetric_eigenvalues().min();
            if min_eig < -1e-8 {
                return Err(Error::Contract(format!(
                    "fixed kernel not PSD, min eigenvalue {min_eig:e}"
                )));
            }
        }
        Ok(FixedKernel { points, matrix })
    }

    pub fn identity(points: Vec<f64>) -> Self {
        let n = points.len();
        FixedKernel {
            points,
            matrix: DMatrix::identity(n, n),
        }
    }

    /// Index of a time on this kernel's point set.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.points.binary_search_by(|p| p.total_cmp(&t)).ok()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum KernelModel {
    Rbf(RbfParams),
    Fixed(FixedKernel),
}

impl KernelModel {
    pub fn is_parametric(&self) -> bool {
        matches!(self, KernelModel::Rbf(_))
    }

    /// Covariance between two times; `None` when a fixed kernel is queried off its points.
    pub fn eval(&self, t1: f64, t2: f64) -> Option<f64> {
        match self {
            KernelModel::Rbf(p) => Some(p.eval(t1, t2)),
            KernelModel::Fixed(f) => Some(f.matrix[(f.index_of(t1)?, f.index_of(t2)?)]),
        }
    }

    /// Raw kernel entries for the given times, no jitter.
    pub fn entries(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        match self {
            KernelModel::Rbf(p) => Ok(rbf_entries(p, times)),
            KernelModel::Fixed(f) => {
                let idx = times
                    .iter()
                    .map(|&t| {
                        f.index_of(t).ok_or_else(|| {
                            Error::Contract(format!("time {t} is not on the fixed kernel's grid"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(f.matrix.select_rows(&idx).select_columns(&idx))
            }
        }
    }

    /// Cross-covariances `k(t, times)` as a column vector.
    pub fn cross(&self, t: f64, times: &[f64]) -> Result<DVector<f64>> {
        let vals = times
            .iter()
            .map(|&s| {
                self.eval(s, t).ok_or_else(|| {
                    Error::Contract(format!("time {t} is off the fixed kernel's grid"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(vals))
    }

    pub fn param_count(&self) -> usize {
        match self {
            KernelModel::Rbf(_) => 2,
            KernelModel::Fixed(f) => f.points.len() * (f.points.len() + 1) / 2,
        }
    }
}

fn rbf_entries(p: &RbfParams, times: &[f64]) -> DMatrix<f64> {
    let n = times.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = p.amplitude;
        for l in 0..i {
            let v = p.eval(times[i], times[l]);
            m[(i, l)] = v;
            m[(l, i)] = v;
        }
    }
    m
}

/// A symmetric kernel matrix that is Cholesky-factorizable once `jitter_applied`
/// has been added to its diagonal (`entries` already include it).
#[derive(Clone, Debug)]
pub struct KernelMatrix {
    pub entries: DMatrix<f64>,
    pub jitter_applied: f64,
    factor: Factor,
}

impl KernelMatrix {
    pub fn from_entries(mut entries: DMatrix<f64>) -> Result<Self> {
        symmetrize(&mut entries);
        let factor = cholesky_jittered(&entries)?;
        let jitter = factor.jitter;
        if jitter > 0.0 {
            crate::linalg::add_diagonal(&mut entries, jitter);
        }
        Ok(KernelMatrix {
            entries,
            jitter_applied: jitter,
            factor,
        })
    }

    pub fn factor(&self) -> &Factor {
        &self.factor
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }
}

/// Where to evaluate a kernel matrix.
#[derive(Clone, Copy, Debug)]
pub enum KernelInputs<'a> {
    Times(&'a [f64]),
    /// Indices into a fixed kernel's point set.
    Indices(&'a [usize]),
}

pub fn kernel_matrix(kernel: &KernelModel, inputs: KernelInputs<'_>) -> Result<KernelMatrix> {
    let entries = match (kernel, inputs) {
        (_, KernelInputs::Times(t)) => kernel.entries(t)?,
        (KernelModel::Fixed(f), KernelInputs::Indices(idx)) => {
            if let Some(&bad) = idx.iter().find(|&&i| i >= f.points.len()) {
                return Err(Error::Dimension(format!("grid index {bad} out of range")));
            }
            f.matrix.select_rows(idx).select_columns(idx)
        }
        (KernelModel::Rbf(_), KernelInputs::Indices(_)) => {
            return Err(Error::Contract("parametric kernels need times, not grid indices".into()))
        }
    };
    KernelMatrix::from_entries(entries)
}

/// Entrywise derivatives of the RBF matrix w.r.t. `(amplitude, denom)`.
pub fn kernel_grad(params: &RbfParams, times: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = times.len();
    let mut da = DMatrix::zeros(n, n);
    let mut dd = DMatrix::zeros(n, n);
    for i in 0..n {
        for l in 0..n {
            let d2 = (times[i] - times[l]).powi(2);
            let e = (-d2 / params.denom).exp();
            da[(i, l)] = e;
            dd[(i, l)] = params.amplitude * e * d2 / (params.denom * params.denom);
        }
    }
    (da, dd)
}

/// Per-task expected second moments `S_j = C_j + sum_s gamma_js mu_js mu_js^T`,
/// the sufficient statistics of the individual-kernel M-step.
pub fn second_moments(estep: &EStepState) -> Vec<DMatrix<f64>> {
    (0..estep.resp.nrows())
        .map(|j| {
            let mut s = estep.post_covs[j].clone();
            for (k, mu) in estep.post_means[j].iter().enumerate() {
                let g = estep.resp[(j, k)];
                if g > 0.0 {
                    s.ger(g, mu, mu, 1.0);
                }
            }
            symmetrize(&mut s);
            s
        })
        .collect()
}

/// The part of the EM objective that depends on the individual kernel:
/// `-1/2 sum_j log|K_j| - 1/2 sum_j tr(K_j^{-1} S_j)`.
pub fn kernel_objective(
    kernel: &KernelModel,
    task_times: &[&[f64]],
    moments: &[DMatrix<f64>],
) -> Result<f64> {
    let mut total = 0.0;
    for (times, s) in task_times.iter().zip(moments) {
        let k = kernel_matrix(kernel, KernelInputs::Times(times))?;
        let sol = k.factor().solve_mat(s);
        total += -0.5 * k.factor().log_det() - 0.5 * sol.trace();
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("kernel objective"));
    }
    Ok(total)
}

/// Value and gradient (w.r.t. `amplitude`, `denom`) of [`kernel_objective`] for an RBF kernel.
///
/// Uses the log-determinant derivative `tr(K^{-1} dK)`.
pub fn kernel_objective_grad(
    params: &RbfParams,
    task_times: &[&[f64]],
    moments: &[DMatrix<f64>],
) -> Result<(f64, [f64; 2])> {
    let kernel = KernelModel::Rbf(*params);
    let mut value = 0.0;
    let mut grad = [0.0; 2];
    for (times, s) in task_times.iter().zip(moments) {
        let k = kernel_matrix(&kernel, KernelInputs::Times(times))?;
        let n = times.len();
        let inv = k.factor().solve_mat(&DMatrix::identity(n, n));
        let inv_s = k.factor().solve_mat(s);
        value += -0.5 * k.factor().log_det() - 0.5 * inv_s.trace();
        // W = K^{-1} S K^{-1} - K^{-1}
        let w = &inv_s * &inv - &inv;
        let (da, dd) = kernel_grad(params, times);
        grad[0] += 0.5 * w.component_mul(&da).sum();
        grad[1] += 0.5 * w.component_mul(&dd).sum();
    }
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("kernel objective"));
    }
    Ok((value, grad))
}

const LOG_BOUNDS: (f64, f64) = (-40.0, 40.0);

/// Maximizes the kernel objective over `(log a, log denom)` with BFGS and a
/// backtracking line search. The result is never worse than `init`.
pub fn optimize_rbf(
    task_times: &[&[f64]],
    moments: &[DMatrix<f64>],
    init: RbfParams,
    max_iters: usize,
) -> Result<RbfParams> {
    let x = maximize_log([init.amplitude, init.denom], [LOG_BOUNDS.0; 2], max_iters, |v| {
        kernel_objective_grad(&RbfParams { amplitude: v[0], denom: v[1] }, task_times, moments).ok()
    })?;
    Ok(RbfParams {
        amplitude: x[0],
        denom: x[1],
    })
}

/// BFGS ascent over the logs of positive parameters, for a function given in
/// natural parameters with its gradient. Returns `init` when no step improves.
fn maximize_log<const N: usize, F>(init: [f64; N], lower: [f64; N], max_iters: usize, f: F) -> Result<[f64; N]>
where
    F: Fn(&[f64; N]) -> Option<(f64, [f64; N])>,
{
    let eval = |x: &[f64; N]| -> Option<(f64, [f64; N])> {
        if x.iter().zip(&lower).any(|(v, lo)| !(*lo..=LOG_BOUNDS.1).contains(v)) {
            return None;
        }
        let nat: [f64; N] = std::array::from_fn(|i| x[i].exp());
        let (v, g) = f(&nat)?;
        let g: [f64; N] = std::array::from_fn(|i| g[i] * nat[i]);
        (v.is_finite() && g.iter().all(|x| x.is_finite())).then_some((v, g))
    };
    let dot = |a: &[f64; N], b: &[f64; N]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let identity = || -> [[f64; N]; N] { std::array::from_fn(|i| std::array::from_fn(|j| if i == j { 1.0 } else { 0.0 })) };
    let mut x: [f64; N] = std::array::from_fn(|i| init[i].ln());
    let (mut fx, mut gx) = eval(&x).ok_or(Error::NonFinite("kernel objective at initial parameters"))?;
    // inverse Hessian approximation of the negated objective
    let mut h = identity();
    let mut moved = false;
    for _ in 0..max_iters {
        let gnorm = dot(&gx, &gx).sqrt();
        if gnorm < 1e-6 * (1.0 + fx.abs()) {
            break;
        }
        // ascent direction d = H g
        let mut d: [f64; N] = std::array::from_fn(|i| dot(&h[i], &gx));
        let mut slope = dot(&d, &gx);
        if !(slope > 0.0) {
            h = identity();
            d = gx;
            slope = gnorm * gnorm;
        }
        // keep steps in log space modest
        let dn = dot(&d, &d).sqrt();
        let mut step = if dn > 2.0 { 2.0 / dn } else { 1.0 };
        let mut accepted = None;
        for _ in 0..40 {
            let xn: [f64; N] = std::array::from_fn(|i| x[i] + step * d[i]);
            let trial = eval(&xn);
            if let Some((fnew, gnew)) = trial {
                if fnew >= fx + 1e-4 * step * slope {
                    accepted = Some((xn, fnew, gnew));
                    break;
                }
            }
            // backtrack to the maximizer of the quadratic through f(0), f'(0), f(step)
            step *= match trial {
                Some((fnew, _)) => {
                    let curv = fnew - fx - slope * step;
                    (-0.5 * slope * step / curv).clamp(0.1, 0.5)
                }
                None => 0.5,
            };
        }
        let Some((xn, fnew, gnew)) = accepted else {
            break;
        };
        let s: [f64; N] = std::array::from_fn(|i| xn[i] - x[i]);
        // gradient of the negated objective changes by -(gnew - gx)
        let y: [f64; N] = std::array::from_fn(|i| gx[i] - gnew[i]);
        let sy = dot(&s, &y);
        let improvement = fnew - fx;
        moved = true;
        x = xn;
        fx = fnew;
        gx = gnew;
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let hy: [f64; N] = std::array::from_fn(|i| dot(&h[i], &y));
            let yhy = dot(&y, &hy);
            for i in 0..N {
                for j in 0..N {
                    h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        if improvement.abs() < 1e-9 * (1.0 + fx.abs()) {
            break;
        }
    }
    if !moved {
        return Ok(init);
    }
    Ok(std::array::from_fn(|i| x[i].exp()))
}

/// How the per-cluster marginal densities of a task are combined.
#[derive(Clone, Copy, Debug)]
pub enum MarginalWeights<'a> {
    /// `log sum_s exp(lw_s) N_js`: the observed mixture likelihood.
    Mixture(&'a [f64]),
    /// `sum_s w_js log N_js` with weights held fixed.
    Fixed(&'a DMatrix<f64>),
}

/// Value and gradient (w.r.t. `amplitude`, `denom`, `noise_var`) of the
/// individual-effect marginal likelihood with group effects and shifts held fixed.
/// `residuals[j][s]` is task `j`'s data minus cluster `s`'s shifted group curve,
/// and `N_js = N(residuals[j][s]; 0, K_j + noise I)`.
pub fn marginal_objective_grad(
    params: &RbfParams,
    noise_var: f64,
    task_times: &[&[f64]],
    residuals: &[Vec<DVector<f64>>],
    weights: MarginalWeights<'_>,
) -> Result<(f64, [f64; 3])> {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let (amp, den) = (params.amplitude, params.denom);
    let mut value = 0.0;
    let mut grad = [0.0; 3];
    for (j, (times, rs)) in task_times.iter().zip(residuals).enumerate() {
        let n = times.len();
        // e = exp(-d^2 / denom), and d^2 kept for the denom derivative
        let mut e = DMatrix::zeros(n, n);
        let mut d2 = DMatrix::zeros(n, n);
        for i in 0..n {
            e[(i, i)] = 1.0;
            for l in 0..i {
                let d = (times[i] - times[l]).powi(2);
                let v = (-d / den).exp();
                e[(i, l)] = v;
                e[(l, i)] = v;
                d2[(i, l)] = d;
                d2[(l, i)] = d;
            }
        }
        let mut a = &e * amp;
        for i in 0..n {
            a[(i, i)] += noise_var;
        }
        let fac = cholesky_jittered(&a)?;
        let log_det = fac.log_det();
        let alphas: Vec<DVector<f64>> = rs.iter().map(|r| fac.solve_vec(r)).collect();
        let lls: Vec<f64> = rs
            .iter()
            .zip(&alphas)
            .map(|(r, al)| -0.5 * r.dot(al) - 0.5 * log_det - 0.5 * n as f64 * ln2pi)
            .collect();
        let w: Vec<f64> = match weights {
            MarginalWeights::Mixture(lw) => {
                let mut v: Vec<f64> = lls.iter().zip(lw).map(|(l, w)| l + w).collect();
                value += softmax_in_place(&mut v);
                v
            }
            MarginalWeights::Fixed(m) => {
                let v: Vec<f64> = (0..rs.len()).map(|s| m[(j, s)]).collect();
                value += v.iter().zip(&lls).filter(|(w, _)| **w > 0.0).map(|(w, l)| w * l).sum::<f64>();
                v
            }
        };
        // W = sum_s w_s a_s a_s^T - (sum_s w_s) A^{-1}
        let total: f64 = w.iter().sum();
        let mut wm = fac.inverse() * (-total);
        for (ws, al) in w.iter().zip(&alphas) {
            if *ws > 0.0 {
                wm.ger(*ws, al, al, 1.0);
            }
        }
        let we = wm.component_mul(&e);
        grad[0] += 0.5 * we.sum();
        grad[1] += 0.5 * amp / (den * den) * we.component_mul(&d2).sum();
        grad[2] += 0.5 * wm.trace();
    }
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("marginal kernel objective"));
    }
    Ok((value, grad))
}

/// Maximizes [`marginal_objective_grad`] from `(init, noise_var)`. With
/// `noise_floor`, the noise variance is optimized jointly (kept at or above
/// the floor); otherwise it stays fixed. Never returns a worse point.
pub fn optimize_rbf_marginal(
    init: RbfParams,
    noise_var: f64,
    noise_floor: Option<f64>,
    task_times: &[&[f64]],
    residuals: &[Vec<DVector<f64>>],
    weights: MarginalWeights<'_>,
    max_iters: usize,
) -> Result<(RbfParams, f64)> {
    match noise_floor {
        Some(floor) => {
            let lower = [LOG_BOUNDS.0, LOG_BOUNDS.0, floor.ln().max(LOG_BOUNDS.0)];
            let x = maximize_log([init.amplitude, init.denom, noise_var.max(floor)], lower, max_iters, |v| {
                marginal_objective_grad(&RbfParams { amplitude: v[0], denom: v[1] }, v[2], task_times, residuals, weights).ok()
            })?;
            Ok((RbfParams { amplitude: x[0], denom: x[1] }, x[2].max(floor)))
        }
        None => {
            let x = maximize_log([init.amplitude, init.denom], [LOG_BOUNDS.0; 2], max_iters, |v| {
                marginal_objective_grad(&RbfParams { amplitude: v[0], denom: v[1] }, noise_var, task_times, residuals, weights)
                    .ok()
                    .map(|(f, g)| (f, [g[0], g[1]]))
            })?;
            Ok((RbfParams { amplitude: x[0], denom: x[1] }, noise_var))
        }
    }
}

/// M-step for a parametric individual kernel.
pub fn optimize_kernel_params(
    estep: &EStepState,
    dataset: &Dataset,
    init: RbfParams,
    max_iters: usize,
) -> Result<RbfParams> {
    if estep.resp.nrows() != dataset.len() {
        return Err(Error::Dimension("E-step and dataset disagree on task count".into()));
    }
    let moments = second_moments(estep);
    let times: Vec<&[f64]> = dataset.tasks().iter().map(|t| t.times.as_slice()).collect();
    optimize_rbf(&times, &moments, init, max_iters)
}

/// Closed-form M-step for a kernel matrix on synchronous data:
/// `(1/M) sum_j sum_s gamma_js (C_j + mu_js mu_js^T)`.
pub fn empirical_kernel_update(estep: &EStepState, dataset: &Dataset) -> Result<FixedKernel> {
    if !dataset.is_synchronous() {
        return Err(Error::Contract(
            "empirical kernel update needs synchronously sampled tasks".into(),
        ));
    }
    let moments = second_moments(estep);
    Ok(average_moments(&moments, dataset.grid().points.clone()))
}

pub(crate) fn average_moments(moments: &[DMatrix<f64>], points: Vec<f64>) -> FixedKernel {
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for s in moments {
        k += s;
    }
    k /= moments.len() as f64;
    symmetrize(&mut k);
    FixedKernel { points, matrix: k }
}
