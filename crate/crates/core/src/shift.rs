//! Circular phase shifts: group-effect bases, shifted kernel sections and
//! best-shift search by brute force or FFT cross-correlation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::{lattice_point, DistinctGrid};
use crate::error::{Error, Result};
use crate::kernel::KernelModel;
use crate::linalg::cholesky_jittered;

/// Eigenvalues below this fraction of the largest are dropped from the basis.
pub const EIGEN_CUTOFF: f64 = 1e-10;

/// A cluster's group effect `f(x) = sum_i c_i K0(x, support_i)`.
///
/// `beta` is the coordinate in the whitened eigenbasis of the support Gram
/// matrix; `coefficients` and `values` are derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEffect {
    pub coefficients: DVector<f64>,
    pub values: DVector<f64>,
    pub beta: DVector<f64>,
}

impl GroupEffect {
    /// RKHS penalty `1/2 c^T K c`.
    pub fn penalty(&self) -> f64 {
        0.5 * self.beta.norm_squared()
    }
}

/// Whitened representer basis of the group-effect kernel over its support points.
#[derive(Clone, Debug)]
pub struct GroupBasis {
    pub(crate) kernel: KernelModel,
    pub(crate) support: Vec<f64>,
    /// Penalty dropped (flat prior).
    pub(crate) flat: bool,
    /// `U Lambda^{-1/2}`, support x rank.
    pub(crate) whiten: DMatrix<f64>,
    /// `U Lambda^{1/2}`: values on the support per unit of `beta`.
    pub(crate) embed: DMatrix<f64>,
    pub(crate) lattice: Option<usize>,
    /// Feature rows at every lattice point, lattice x rank.
    pub(crate) table: Option<Arc<DMatrix<f64>>>,
}

impl GroupBasis {
    pub fn new(kernel: KernelModel, support: Vec<f64>, flat: bool, lattice: Option<usize>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Empty("group-effect support"));
        }
        let gram = kernel.entries(&support)?;
        let eig = gram.symmetric_eigen();
        let lmax = eig.eigenvalues.max();
        if !(lmax > 0.0) {
            return Err(Error::Contract("group kernel has no positive eigenvalue".into()));
        }
        let mut order: Vec<usize> = (0..support.len())
            .filter(|&i| eig.eigenvalues[i] > EIGEN_CUTOFF * lmax)
            .collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let n = support.len();
        let r = order.len();
        let mut whiten = DMatrix::zeros(n, r);
        let mut embed = DMatrix::zeros(n, r);
        for (col, &i) in order.iter().enumerate() {
            let lam = eig.eigenvalues[i];
            let u = eig.eigenvectors.column(i);
            // fix the sign for reproducibility
            let sign = if u.iter().fold(0.0, |acc: f64, &x| if x.abs() > acc.abs() { x } else { acc }) < 0.0 {
                -1.0
            } else {
                1.0
            };
            whiten.set_column(col, &(u * (sign / lam.sqrt())));
            embed.set_column(col, &(u * (sign * lam.sqrt())));
        }
        let mut basis = GroupBasis {
            kernel,
            support,
            flat,
            whiten,
            embed,
            lattice,
            table: None,
        };
        if let Some(res) = lattice {
            let mut table = DMatrix::zeros(res, r);
            for p in 0..res {
                let row = basis.features(lattice_point(p, res))?;
                table.set_row(p, &row.transpose());
            }
            basis.table = Some(Arc::new(table));
        }
        Ok(basis)
    }

    pub fn rank(&self) -> usize {
        self.whiten.ncols()
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn kernel(&self) -> &KernelModel {
        &self.kernel
    }

    pub fn is_flat(&self) -> bool {
        self.flat
    }

    pub fn lattice(&self) -> Option<usize> {
        self.lattice
    }

    /// Feature vector `W^T k(support, phase)`; `f(phase) = features . beta`.
    pub fn features(&self, phase: f64) -> Result<DVector<f64>> {
        let k = self.kernel.cross(phase, &self.support)?;
        Ok(self.whiten.tr_mul(&k))
    }

    pub fn zero_effect(&self) -> GroupEffect {
        self.effect(DVector::zeros(self.rank()))
    }

    pub fn effect(&self, beta: DVector<f64>) -> GroupEffect {
        GroupEffect {
            coefficients: &self.whiten * &beta,
            values: &self.embed * &beta,
            beta,
        }
    }

    /// Group curve on the lattice, if the basis has one.
    pub fn lattice_curve(&self, beta: &DVector<f64>) -> Option<DVector<f64>> {
        self.table.as_ref().map(|t| t.as_ref() * beta)
    }

    /// `f((t - shift) mod 1)` for each time, evaluated through the kernel expansion.
    pub fn eval_shifted(&self, effect: &GroupEffect, times: &[f64], shift: f64) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(times.len());
        for (i, &t) in times.iter().enumerate() {
            let p = (t - shift).rem_euclid(1.0);
            let k = self.kernel.cross(p, &self.support)?;
            out[i] = k.dot(&effect.coefficients);
        }
        Ok(out)
    }

    /// Feature rows at `(t - shift) mod 1`, one row per time.
    pub fn design(&self, times: &[f64], shift: f64) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(times.len(), self.rank());
        for (i, &t) in times.iter().enumerate() {
            let row = self.features((t - shift).rem_euclid(1.0))?;
            m.set_row(i, &row.transpose());
        }
        Ok(m)
    }

    /// Solves `(G + noise_var I) beta = rhs`, or `G beta = rhs` under a flat prior.
    pub fn solve(&self, gram: &DMatrix<f64>, rhs: &DVector<f64>, noise_var: f64) -> Result<DVector<f64>> {
        let mut a = gram.clone();
        if !self.flat {
            for i in 0..a.nrows() {
                a[(i, i)] += noise_var;
            }
        }
        if a.iter().all(|&x| x == 0.0) {
            return Ok(DVector::zeros(rhs.len()));
        }
        let f = cholesky_jittered(&a)?;
        Ok(f.solve_vec(rhs))
    }
}

/// Entry `(i, l) = K0(x_i, (x_l - shift) mod period)` over the grid points.
pub fn shifted_kernel_section(
    group_kernel: &KernelModel,
    grid: &DistinctGrid,
    shift: f64,
    period: f64,
) -> Result<DMatrix<f64>> {
    let KernelModel::Rbf(p) = group_kernel else {
        return Err(Error::Contract(
            "shifted kernel sections need a parametric group kernel".into(),
        ));
    };
    let x = &grid.points;
    let n = x.len();
    Ok(DMatrix::from_fn(n, n, |i, l| {
        p.eval(x[i], (x[l] - shift).rem_euclid(period))
    }))
}

/// Rotates right by `steps`: `out[i] = values[(i - steps) mod n]`.
pub fn circular_shift<T: Copy>(values: &[T], steps: i64) -> Vec<T> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    let s = steps.rem_euclid(n as i64) as usize;
    (0..n).map(|i| values[(i + n - s) % n]).collect()
}

/// Index of the candidate prediction closest to `target` in (weighted) squared error.
pub fn best_shift_brute(
    candidates: &[DVector<f64>],
    target: &DVector<f64>,
    weights: Option<&DVector<f64>>,
) -> usize {
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for (i, pred) in candidates.iter().enumerate() {
        let err: f64 = match weights {
            Some(w) => target
                .iter()
                .zip(pred.iter())
                .zip(w.iter())
                .map(|((t, p), w)| w * (t - p) * (t - p))
                .sum(),
            None => (target - pred).norm_squared(),
        };
        if err < best_err {
            best_err = err;
            best = i;
        }
    }
    best
}

/// Circular cross-correlation `c[tau] = sum_i u[(i - tau) mod n] v[i]` via FFT.
pub fn cross_correlation_fft(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let n = u.len();
    if n == 0 || v.len() != n {
        return Err(Error::Dimension(format!(
            "cross-correlation needs equal nonzero lengths, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex<f64>> = u.iter().map(|&x| Complex::new(x, 0.0)).collect();
    let mut b: Vec<Complex<f64>> = v.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fwd.process(&mut a);
    fwd.process(&mut b);
    let mut c: Vec<Complex<f64>> = a.iter().zip(&b).map(|(x, y)| x.conj() * y).collect();
    inv.process(&mut c);
    Ok(c.iter().map(|z| z.re / n as f64).collect())
}

/// Shift maximizing `<circular_shift(u, tau), v>`, smallest index on (near) ties.
pub fn best_shift_fft(u: &[f64], v: &[f64]) -> Result<usize> {
    let c = cross_correlation_fft(u, v)?;
    let max = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = (u.iter().map(|x| x * x).sum::<f64>() * v.iter().map(|x| x * x).sum::<f64>()).sqrt();
    let tol = 1e-9 * scale;
    Ok(c.iter().position(|&x| x >= max - tol).unwrap_or(0))
}

/// Brute-force reference for [`best_shift_fft`].
pub fn best_shift_correlation_brute(u: &[f64], v: &[f64]) -> usize {
    let n = u.len();
    let mut best = 0;
    let mut best_c = f64::NEG_INFINITY;
    for tau in 0..n {
        let c: f64 = (0..n).map(|i| u[(i + n - tau) % n] * v[i]).sum();
        if c > best_c {
            best_c = c;
            best = tau;
        }
    }
    best
}
