//! EM fitting of the shift-invariant grouped mixed-effect GP model.
//!
//! The E-step computes responsibilities and per-(task, cluster) posteriors of the
//! individual effect; the M-step updates, in order, the mixture proportions, each
//! cluster's group effect and shifts (cyclically), the noise variance and the
//! individual-effect kernel.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{lattice_index, lattice_point, Dataset, ShiftGrid, TaskSeries};
use crate::error::{Error, Result};
use crate::gp::NoisyKernel;
use crate::kernel::{
    average_moments, empirical_kernel_update, kernel_matrix, optimize_rbf_marginal, FixedKernel,
    KernelInputs, KernelModel, MarginalWeights, RbfParams,
};
use crate::linalg::{cholesky_jittered, log_sum_exp, softmax_in_place, symmetrize, Factor};
use crate::shift::{best_shift_fft, circular_shift, GroupBasis, GroupEffect};

/// Responsibilities at or below this are skipped inside the cyclic inner loop;
/// such tasks still get their shifts refreshed once the loop ends.
const ACTIVE_RESP: f64 = 1e-12;
/// A cluster whose responsibilities sum below this is empty.
pub const EMPTY_CLUSTER_MASS: f64 = 1e-8;
/// Allowed decrease of the objective between iterations.
pub const MONOTONE_SLACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelMode {
    /// RBF individual kernel with optimized hyperparameters.
    Parametric,
    /// Free kernel matrix on the grid (synchronous data only).
    Nonparametric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub restarts: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Cap on cyclic shift/coefficient iterations per cluster and M-step.
    pub inner_max: usize,
    /// Number of candidate shifts `L`; 1 disables shifts.
    pub shift_grid_size: usize,
    pub noise_floor: f64,
    pub seed: u64,
    /// Group-effect prior kernel, assumed known.
    pub group_kernel: KernelModel,
    /// Drop the group-effect penalty.
    pub flat_prior: bool,
    /// Absorb the noise into a single nonparametric covariance (noise fixed at 0).
    pub absorbed_noise: bool,
    pub init_indiv: RbfParams,
    pub kernel_iters: usize,
    pub kmeans_iters: usize,
    /// Abort a restart when the objective drops by more than the slack.
    pub strict_monotone: bool,
    pub max_reseeds: usize,
    /// Keep shifts at their initial values (zero unless initialized otherwise).
    pub freeze_shifts: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 5,
            tol: 1e-5,
            max_iter: 200,
            inner_max: 20,
            shift_grid_size: 1,
            noise_floor: 1e-8,
            seed: 0,
            group_kernel: KernelModel::Rbf(RbfParams {
                amplitude: 1.0,
                denom: 0.01,
            }),
            flat_prior: false,
            absorbed_noise: false,
            init_indiv: RbfParams {
                amplitude: 1.0,
                denom: 0.04,
            },
            kernel_iters: 100,
            kmeans_iters: 20,
            strict_monotone: true,
            max_reseeds: 10,
            freeze_shifts: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.restarts == 0 {
            return bad("restarts must be positive");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if self.max_iter == 0 || self.inner_max == 0 || self.shift_grid_size == 0 {
            return bad("iteration caps and shift grid size must be positive");
        }
        if !(self.noise_floor > 0.0) {
            return bad("noise floor must be positive");
        }
        if self.absorbed_noise && !self.flat_prior {
            return bad("absorbed noise requires a flat group prior");
        }
        Ok(())
    }
}

/// Fitted model parameters. Shifts are kept per (task, cluster) as shift-grid indices.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmtModel {
    pub mixture: Vec<f64>,
    pub groups: Vec<GroupEffect>,
    pub shifts: Vec<Vec<usize>>,
    pub shift_grid: ShiftGrid,
    pub noise_var: f64,
    pub indiv_kernel: KernelModel,
    pub group_kernel: KernelModel,
    pub flat_prior: bool,
    pub absorbed_noise: bool,
    /// Representer points of the group effects.
    pub support: Vec<f64>,
    pub lattice: Option<usize>,
    #[serde(skip)]
    basis: Option<Arc<GroupBasis>>,
}

impl PartialEq for GmtModel {
    fn eq(&self, other: &Self) -> bool {
        self.mixture == other.mixture
            && self.groups == other.groups
            && self.shifts == other.shifts
            && self.shift_grid == other.shift_grid
            && self.noise_var == other.noise_var
            && self.indiv_kernel == other.indiv_kernel
            && self.group_kernel == other.group_kernel
            && self.flat_prior == other.flat_prior
            && self.absorbed_noise == other.absorbed_noise
            && self.support == other.support
            && self.lattice == other.lattice
    }
}

impl GmtModel {
    /// A model with zero group effects, uniform mixture and zero shifts.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        k: usize,
        n_tasks: usize,
        support: Vec<f64>,
        lattice: Option<usize>,
        group_kernel: KernelModel,
        flat_prior: bool,
        indiv_kernel: KernelModel,
        noise_var: f64,
        shift_grid: ShiftGrid,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let basis = GroupBasis::new(group_kernel.clone(), support.clone(), flat_prior, lattice)?;
        Ok(GmtModel {
            mixture: vec![1.0 / k as f64; k],
            groups: vec![basis.zero_effect(); k],
            shifts: vec![vec![0; k]; n_tasks],
            shift_grid,
            noise_var,
            indiv_kernel,
            group_kernel,
            flat_prior,
            absorbed_noise: false,
            support,
            lattice,
            basis: Some(Arc::new(basis)),
        })
    }

    pub fn k(&self) -> usize {
        self.mixture.len()
    }

    pub fn basis(&self) -> &GroupBasis {
        self.basis
            .as_ref()
            .expect("group basis is built on construction and on load")
    }

    /// Rebuilds the group basis after deserialization and checks stored effects against it.
    pub fn rebuild_basis(&mut self) -> Result<()> {
        let basis = GroupBasis::new(
            self.group_kernel.clone(),
            self.support.clone(),
            self.flat_prior,
            self.lattice,
        )?;
        for g in &self.groups {
            if g.beta.len() != basis.rank() || g.coefficients.len() != self.support.len() {
                return Err(Error::Schema("group effect does not match its basis".into()));
            }
        }
        self.basis = Some(Arc::new(basis));
        Ok(())
    }

    pub fn shift_value(&self, j: usize, s: usize) -> f64 {
        self.shift_grid.shifts[self.shifts[j][s]]
    }

    /// Total penalty `1/2 sum_s c_s^T K c_s`, zero under a flat prior.
    pub fn penalty(&self) -> f64 {
        if self.flat_prior {
            0.0
        } else {
            self.groups.iter().map(|g| g.penalty()).sum()
        }
    }

    /// Lattice steps per shift-grid index, when shifted evaluations can use the lattice table.
    pub fn lattice_step(&self) -> Option<(usize, usize)> {
        let r = self.lattice?;
        let l = self.shift_grid.count();
        (r % l == 0).then_some((r, r / l))
    }

    pub fn predictor(&self) -> Predictor<'_> {
        let curves = match self.lattice_step() {
            Some(_) => self
                .groups
                .iter()
                .map(|g| self.basis().lattice_curve(&g.beta))
                .collect(),
            None => vec![None; self.k()],
        };
        Predictor {
            model: self,
            curves,
        }
    }

    /// Group curve of cluster `s` at a phase.
    pub fn group_value(&self, s: usize, phase: f64) -> Result<f64> {
        let f = self.basis().features(phase)?;
        Ok(f.dot(&self.groups[s].beta))
    }
}

/// Lattice positions of a task's times, when every time is a lattice point.
pub fn lattice_positions(times: &[f64], resolution: usize) -> Option<Vec<usize>> {
    times
        .iter()
        .map(|&t| {
            let i = lattice_index(t, resolution);
            (lattice_point(i, resolution) == t).then_some(i)
        })
        .collect()
}

/// Evaluates shifted group effects, through cached lattice curves when possible.
pub struct Predictor<'a> {
    model: &'a GmtModel,
    curves: Vec<Option<DVector<f64>>>,
}

impl Predictor<'_> {
    pub fn lattice_curve(&self, s: usize) -> Option<&DVector<f64>> {
        self.curves[s].as_ref()
    }

    /// `f_s((t - shift) mod 1)` at each time; `positions` are the times' lattice indices.
    pub fn predict(
        &self,
        s: usize,
        times: &[f64],
        positions: Option<&[usize]>,
        shift_idx: usize,
    ) -> Result<DVector<f64>> {
        if let (Some(curve), Some(pos), Some((r, step))) =
            (&self.curves[s], positions, self.model.lattice_step())
        {
            let off = (shift_idx * step) % r;
            return Ok(DVector::from_iterator(
                pos.len(),
                pos.iter().map(|&p| curve[(p + r - off) % r]),
            ));
        }
        let shift = self.model.shift_grid.shifts[shift_idx];
        self.model
            .basis()
            .eval_shifted(&self.model.groups[s], times, shift)
    }

    /// Squared error of `target` against every candidate shift of cluster `s`.
    pub fn shift_errors(
        &self,
        s: usize,
        times: &[f64],
        positions: Option<&[usize]>,
        target: &DVector<f64>,
    ) -> Result<Vec<f64>> {
        let l = self.model.shift_grid.count();
        if let (Some(curve), Some(pos), Some((r, step))) =
            (&self.curves[s], positions, self.model.lattice_step())
        {
            return Ok((0..l)
                .map(|tau| {
                    let off = (tau * step) % r;
                    pos.iter()
                        .zip(target.iter())
                        .map(|(&p, &y)| {
                            let d = y - curve[(p + r - off) % r];
                            d * d
                        })
                        .sum()
                })
                .collect());
        }
        (0..l)
            .map(|tau| Ok((target - self.predict(s, times, positions, tau)?).norm_squared()))
            .collect()
    }

    /// Best shift of cluster `s` for `target`, smallest index on ties.
    pub fn best_shift(
        &self,
        s: usize,
        times: &[f64],
        positions: Option<&[usize]>,
        target: &DVector<f64>,
    ) -> Result<usize> {
        // a task covering the whole lattice with one shift per point: the
        // prediction norm is shift-invariant, so correlation decides
        if let (Some(curve), Some(pos), Some((r, 1))) =
            (&self.curves[s], positions, self.model.lattice_step())
        {
            if pos.len() == r && pos.iter().enumerate().all(|(i, &p)| i == p) {
                return best_shift_fft(curve.as_slice(), target.as_slice());
            }
        }
        let errs = self.shift_errors(s, times, positions, target)?;
        let mut best = 0;
        for (i, &e) in errs.iter().enumerate() {
            if e < errs[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EStepState {
    /// Responsibilities, tasks x clusters.
    pub resp: DMatrix<f64>,
    /// Posterior means of the individual effect per task and cluster.
    pub post_means: Vec<Vec<DVector<f64>>>,
    /// Posterior covariance per task (the same for every cluster).
    pub post_covs: Vec<DMatrix<f64>>,
    /// `log N(y_j; shifted f_s, K_j + noise I)`, tasks x clusters.
    pub log_dens: DMatrix<f64>,
    /// `log sum_s w_s N(...)` with the weights used in the E-step.
    pub per_task_loglik: Vec<f64>,
}

impl EStepState {
    /// Hard assignments with zero individual-effect posteriors.
    pub fn from_assignments(dataset: &Dataset, resp: DMatrix<f64>) -> Self {
        let k = resp.ncols();
        EStepState {
            post_means: dataset
                .tasks()
                .iter()
                .map(|t| vec![DVector::zeros(t.len()); k])
                .collect(),
            post_covs: dataset
                .tasks()
                .iter()
                .map(|t| DMatrix::zeros(t.len(), t.len()))
                .collect(),
            log_dens: DMatrix::zeros(resp.nrows(), k),
            per_task_loglik: vec![0.0; resp.nrows()],
            resp,
        }
    }

    /// MAP cluster of task `j`, lowest index on ties.
    pub fn map_cluster(&self, j: usize) -> usize {
        let row: Vec<f64> = self.resp.row(j).iter().copied().collect();
        crate::linalg::argmax(&row)
    }

    pub fn cluster_mass(&self, s: usize) -> f64 {
        self.resp.column(s).sum()
    }
}

/// Per-dataset precomputation shared by all iterations.
pub(crate) struct Layout {
    pub positions: Option<Vec<Vec<usize>>>,
    pub synchronous: bool,
}

impl Layout {
    pub fn new(dataset: &Dataset, model: &GmtModel) -> Self {
        let positions = model.lattice.and_then(|r| {
            dataset
                .tasks()
                .iter()
                .map(|t| lattice_positions(&t.times, r))
                .collect::<Option<Vec<_>>>()
        });
        Layout {
            positions,
            synchronous: dataset.is_synchronous(),
        }
    }

    pub fn pos(&self, j: usize) -> Option<&[usize]> {
        self.positions.as_ref().map(|p| p[j].as_slice())
    }
}

fn check_shapes(model: &GmtModel, dataset: &Dataset) -> Result<()> {
    if model.shifts.len() != dataset.len() {
        return Err(Error::Dimension(format!(
            "model has shifts for {} tasks, dataset has {}",
            model.shifts.len(),
            dataset.len()
        )));
    }
    if model.groups.len() != model.k() || model.shifts.iter().any(|r| r.len() != model.k()) {
        return Err(Error::Dimension("model cluster count is inconsistent".into()));
    }
    Ok(())
}

/// Individual-effect kernel matrix of one task's times.
fn task_kernel(kernel: &KernelModel, times: &[f64]) -> Result<DMatrix<f64>> {
    Ok(kernel_matrix(kernel, KernelInputs::Times(times))?.entries)
}

/// E-step with arbitrary per-cluster log prior weights.
pub fn e_step_weighted(model: &GmtModel, dataset: &Dataset, log_weights: &[f64]) -> Result<EStepState> {
    check_shapes(model, dataset)?;
    let layout = Layout::new(dataset, model);
    e_step_inner(model, dataset, &layout, log_weights)
}

/// E-step with the model's mixture proportions as prior weights.
pub fn e_step(model: &GmtModel, dataset: &Dataset) -> Result<EStepState> {
    let lw: Vec<f64> = model.mixture.iter().map(|a| a.ln()).collect();
    e_step_weighted(model, dataset, &lw)
}

pub(crate) fn e_step_inner(
    model: &GmtModel,
    dataset: &Dataset,
    layout: &Layout,
    log_weights: &[f64],
) -> Result<EStepState> {
    let k = model.k();
    if log_weights.len() != k {
        return Err(Error::Dimension("log weights vs cluster count".into()));
    }
    let pred = model.predictor();
    let shared = if layout.synchronous && dataset.len() > 1 {
        let k0 = task_kernel(&model.indiv_kernel, &dataset.task(0).times)?;
        Some(NoisyKernel::new(&k0, model.noise_var)?)
    } else {
        None
    };
    let shared_cov = shared.as_ref().map(|nk| nk.posterior_cov());

    type TaskOut = (Vec<f64>, Vec<f64>, Vec<DVector<f64>>, DMatrix<f64>, f64);
    let per_task: Vec<Result<TaskOut>> = (0..dataset.len())
        .into_par_iter()
        .map(|j| {
            let task = dataset.task(j);
            let own;
            let (nk, cov) = match (&shared, &shared_cov) {
                (Some(nk), Some(c)) => (nk, c.clone()),
                _ => {
                    let kj = task_kernel(&model.indiv_kernel, &task.times)?;
                    own = NoisyKernel::new(&kj, model.noise_var)?;
                    let c = own.posterior_cov();
                    (&own, c)
                }
            };
            let y = DVector::from_column_slice(&task.values);
            let mut dens = Vec::with_capacity(k);
            let mut means = Vec::with_capacity(k);
            for s in 0..k {
                let f = pred.predict(s, &task.times, layout.pos(j), model.shifts[j][s])?;
                let r = &y - f;
                let (ll, alpha) = nk.log_density(&r);
                if !ll.is_finite() {
                    return Err(Error::NonFinite("component log density"));
                }
                means.push(nk.posterior_mean(&r, &alpha));
                dens.push(ll);
            }
            let mut w: Vec<f64> = dens.iter().zip(log_weights).map(|(d, lw)| d + lw).collect();
            let lse = softmax_in_place(&mut w);
            if !lse.is_finite() {
                return Err(Error::NonFinite("task log likelihood"));
            }
            Ok((w, dens, means, cov, lse))
        })
        .collect();

    let m = dataset.len();
    let mut resp = DMatrix::zeros(m, k);
    let mut log_dens = DMatrix::zeros(m, k);
    let mut post_means = Vec::with_capacity(m);
    let mut post_covs = Vec::with_capacity(m);
    let mut per_task_loglik = Vec::with_capacity(m);
    for (j, out) in per_task.into_iter().enumerate() {
        let (w, dens, means, cov, lse) = out?;
        for s in 0..k {
            resp[(j, s)] = w[s];
            log_dens[(j, s)] = dens[s];
        }
        post_means.push(means);
        post_covs.push(cov);
        per_task_loglik.push(lse);
    }
    Ok(EStepState {
        resp,
        post_means,
        post_covs,
        log_dens,
        per_task_loglik,
    })
}

pub fn update_mixture(resp: &DMatrix<f64>) -> Vec<f64> {
    let m = resp.nrows() as f64;
    let mut a: Vec<f64> = (0..resp.ncols()).map(|s| resp.column(s).sum() / m).collect();
    let total: f64 = a.iter().sum();
    for x in &mut a {
        *x /= total;
    }
    a
}

/// Penalized observed-data log-likelihood.
pub fn penalized_objective(model: &GmtModel, estep: &EStepState) -> f64 {
    estep.per_task_loglik.iter().sum::<f64>() - model.penalty()
}

/// Inputs of one cluster's group-effect subproblem.
pub struct GroupProblem<'a> {
    pub times: Vec<&'a [f64]>,
    pub positions: Option<Vec<&'a [usize]>>,
    /// Responsibilities of this cluster.
    pub weights: Vec<f64>,
    /// Residual targets `y_j - mu_js`, or the raw data with `metric`.
    pub targets: Vec<DVector<f64>>,
    pub noise_var: f64,
    /// Per-task Cholesky factors of `K_j + noise I`. When present the data term
    /// is the marginal (generalized least-squares) form
    /// `1/2 sum_j g_j (y_j - f)^T (K_j + noise I)^{-1} (y_j - f)`.
    pub metric: Option<Vec<&'a Factor>>,
    /// `(K_j + noise I)^{-1}` for each task, alongside `metric` on lattice data.
    pub precision: Option<Vec<&'a DMatrix<f64>>>,
    pub inner_max: usize,
    pub tol: f64,
    pub coef_first: bool,
    pub freeze_shifts: bool,
}

/// A one-cluster model sharing `model`'s basis, used to evaluate trial coefficients.
fn one_cluster(model: &GmtModel, beta: &DVector<f64>) -> GmtModel {
    GmtModel {
        mixture: vec![1.0],
        groups: vec![model.basis().effect(beta.clone())],
        shifts: Vec::new(),
        shift_grid: model.shift_grid.clone(),
        noise_var: model.noise_var,
        indiv_kernel: model.indiv_kernel.clone(),
        group_kernel: model.group_kernel.clone(),
        flat_prior: model.flat_prior,
        absorbed_noise: model.absorbed_noise,
        support: Vec::new(),
        lattice: model.lattice,
        basis: model.basis.clone(),
    }
}

impl GroupProblem<'_> {
    fn data_scale(&self) -> f64 {
        if self.noise_var > 0.0 {
            0.5 / self.noise_var
        } else {
            0.5
        }
    }

    fn pos(&self, j: usize) -> Option<&[usize]> {
        self.positions.as_ref().map(|p| p[j])
    }

    /// Squared whitened norm of task `j`'s residual, without the 1/2.
    fn task_error(&self, j: usize, e: &DVector<f64>) -> f64 {
        if let Some(prec) = &self.precision {
            return (prec[j] * e).dot(e);
        }
        match &self.metric {
            Some(m) => m[j].whiten_vec(e).norm_squared(),
            None => 2.0 * self.data_scale() * e.norm_squared(),
        }
    }

    /// Inner objective: weighted squared error plus penalty.
    fn objective(&self, one: &GmtModel, shifts: &[usize]) -> Result<f64> {
        let pred = one.predictor();
        let mut total = 0.0;
        for (j, &g) in self.weights.iter().enumerate() {
            if g > 0.0 {
                let f = pred.predict(0, self.times[j], self.pos(j), shifts[j])?;
                total += g * self.task_error(j, &(&self.targets[j] - f));
            }
        }
        Ok(0.5 * total + one.penalty())
    }

    /// Feature rows of task `j` at its shift, from the lattice table when possible.
    fn design(&self, basis: &GroupBasis, model: &GmtModel, j: usize, shift: usize) -> Result<DMatrix<f64>> {
        if let (Some((res, step)), Some(table), Some(pos)) = (model.lattice_step(), basis.table.as_ref(), self.pos(j)) {
            let off = (shift * step) % res;
            let rows: Vec<usize> = pos.iter().map(|&p| (p + res - off) % res).collect();
            return Ok(table.select_rows(&rows));
        }
        basis.design(self.times[j], model.shift_grid.shifts[shift])
    }

    fn coefficient_step(&self, basis: &GroupBasis, model: &GmtModel, shifts: &[usize]) -> Result<DVector<f64>> {
        if let (Some(prec), Some(((res, step), table)), Some(pos)) =
            (&self.precision, model.lattice_step().zip(basis.table.as_ref()), &self.positions)
        {
            // Phi_j^T B_j Phi_j summed on the lattice, then mapped through the table once.
            let mut m = DMatrix::zeros(res, res);
            let mut c = DVector::zeros(res);
            let mut used = vec![false; res];
            let mut q = Vec::new();
            for (j, &g) in self.weights.iter().enumerate() {
                if g <= 0.0 {
                    continue;
                }
                let off = (shifts[j] * step) % res;
                q.clear();
                q.extend(pos[j].iter().map(|&p| (p + res - off) % res));
                let b = prec[j];
                let y = &self.targets[j];
                for (a, &qa) in q.iter().enumerate() {
                    used[qa] = true;
                    let mut by = 0.0;
                    for (bi, &qb) in q.iter().enumerate() {
                        let v = b[(bi, a)];
                        m[(qb, qa)] += g * v;
                        by += v * y[bi];
                    }
                    c[qa] += g * by;
                }
            }
            let rows: Vec<usize> = (0..res).filter(|&i| used[i]).collect();
            let sub = table.select_rows(&rows);
            let msub = DMatrix::from_fn(rows.len(), rows.len(), |a, b| m[(rows[a], rows[b])]);
            let csub = DVector::from_iterator(rows.len(), rows.iter().map(|&i| c[i]));
            let mut gram = sub.tr_mul(&(&msub * &sub));
            symmetrize(&mut gram);
            return basis.solve(&gram, &sub.tr_mul(&csub), 1.0);
        }
        if let Some(metric) = &self.metric {
            let r = basis.rank();
            let mut gram = DMatrix::zeros(r, r);
            let mut rhs = DVector::zeros(r);
            for (j, &g) in self.weights.iter().enumerate() {
                if g <= 0.0 {
                    continue;
                }
                let phi = metric[j].whiten_mat(&self.design(basis, model, j, shifts[j])?);
                let y = metric[j].whiten_vec(&self.targets[j]);
                gram += phi.tr_mul(&phi) * g;
                rhs += phi.tr_mul(&y) * g;
            }
            symmetrize(&mut gram);
            return basis.solve(&gram, &rhs, 1.0);
        }
        let r = basis.rank();
        let mut gram = DMatrix::zeros(r, r);
        let mut rhs = DVector::zeros(r);
        let lattice = model.lattice_step().zip(basis.table.as_ref());
        match (lattice, &self.positions) {
            (Some(((res, step), table)), Some(pos)) => {
                let mut w = DVector::zeros(res);
                let mut b = DVector::zeros(res);
                for (j, &g) in self.weights.iter().enumerate() {
                    if g <= 0.0 {
                        continue;
                    }
                    let off = (shifts[j] * step) % res;
                    for (&p, &y) in pos[j].iter().zip(self.targets[j].iter()) {
                        let q = (p + res - off) % res;
                        w[q] += g;
                        b[q] += g * y;
                    }
                }
                let rows: Vec<usize> = (0..res).filter(|&q| w[q] > 0.0).collect();
                let sub = table.select_rows(&rows);
                let mut scaled = sub.clone();
                for (i, &q) in rows.iter().enumerate() {
                    scaled.row_mut(i).scale_mut(w[q]);
                }
                gram = sub.tr_mul(&scaled);
                let bsub = DVector::from_iterator(rows.len(), rows.iter().map(|&q| b[q]));
                rhs = sub.tr_mul(&bsub);
            }
            _ => {
                for (j, &g) in self.weights.iter().enumerate() {
                    if g <= 0.0 {
                        continue;
                    }
                    let phi = basis.design(self.times[j], model.shift_grid.shifts[shifts[j]])?;
                    gram += phi.tr_mul(&phi) * g;
                    rhs += phi.tr_mul(&self.targets[j]) * g;
                }
            }
        }
        symmetrize(&mut gram);
        let ridge = if self.noise_var > 0.0 { self.noise_var } else { 1.0 };
        basis.solve(&gram, &rhs, ridge)
    }

    fn shift_step(&self, one: &GmtModel, shifts: &mut [usize], active: bool) -> Result<()> {
        if self.freeze_shifts || one.shift_grid.count() == 1 {
            return Ok(());
        }
        let pred = one.predictor();
        let lattice = pred.lattice_curve(0).zip(one.lattice_step());
        let mut f: Vec<f64> = Vec::new();
        for (j, &g) in self.weights.iter().enumerate() {
            if (g > ACTIVE_RESP) != active {
                continue;
            }
            shifts[j] = match &self.metric {
                None => pred.best_shift(0, self.times[j], self.pos(j), &self.targets[j])?,
                Some(_) if self.precision.is_some() && lattice.is_some() => {
                    let (curve, (res, step)) = lattice.unwrap();
                    let b = self.precision.as_ref().unwrap()[j];
                    let pos = self.pos(j).expect("lattice precision comes with positions");
                    let y = &self.targets[j];
                    let w = b * y;
                    let n = pos.len();
                    f.resize(n, 0.0);
                    let mut best = (f64::INFINITY, 0);
                    for tau in 0..one.shift_grid.count() {
                        let off = (tau * step) % res;
                        for (fi, &p) in f.iter_mut().zip(pos) {
                            *fi = curve[(p + res - off) % res];
                        }
                        // (y - f)^T B (y - f) up to the constant y^T B y
                        let mut e = 0.0;
                        for a in 0..n {
                            let col = b.column(a);
                            let bf: f64 = (0..n).map(|i| col[i] * f[i]).sum();
                            e += f[a] * (bf - 2.0 * w[a]);
                        }
                        if e < best.0 {
                            best = (e, tau);
                        }
                    }
                    best.1
                }
                Some(_) => {
                    let mut best = (f64::INFINITY, 0);
                    for tau in 0..one.shift_grid.count() {
                        let f = pred.predict(0, self.times[j], self.pos(j), tau)?;
                        let e = self.task_error(j, &(&self.targets[j] - f));
                        if e < best.0 {
                            best = (e, tau);
                        }
                    }
                    best.1
                }
            };
        }
        Ok(())
    }
}

/// Fits one cluster's group effect and shifts by alternating exact shift
/// searches with the penalized least-squares coefficient solve.
pub fn fit_group_effect(
    model: &GmtModel,
    s: usize,
    problem: &GroupProblem<'_>,
) -> Result<(GroupEffect, Vec<usize>)> {
    let basis = model.basis();
    let mut shifts: Vec<usize> = model.shifts.iter().map(|row| row[s]).collect();
    if problem.weights.iter().all(|&g| g <= 0.0) {
        return Ok((basis.zero_effect(), shifts));
    }
    let mut beta = model.groups[s].beta.clone();
    let mut one = one_cluster(model, &beta);
    let mut current = problem.objective(&one, &shifts)?;
    for it in 0..problem.inner_max {
        let before = current;
        if it > 0 || !problem.coef_first {
            problem.shift_step(&one, &mut shifts, true)?;
        }
        let candidate = problem.coefficient_step(basis, &one, &shifts)?;
        let trial = one_cluster(model, &candidate);
        let after_shift = problem.objective(&one, &shifts)?;
        let value = problem.objective(&trial, &shifts)?;
        if value <= after_shift {
            beta = candidate;
            one = trial;
            current = value;
        } else {
            current = after_shift;
        }
        if before - current < problem.tol {
            break;
        }
    }
    problem.shift_step(&one, &mut shifts, false)?;
    Ok((basis.effect(beta), shifts))
}

/// Closed-form noise update `R / sum_j n_j`, clamped at the floor.
pub fn update_noise(estep: &EStepState, model: &GmtModel, dataset: &Dataset, noise_floor: f64) -> Result<f64> {
    check_shapes(model, dataset)?;
    let layout = Layout::new(dataset, model);
    let pred = model.predictor();
    let mut r = 0.0;
    for (j, task) in dataset.tasks().iter().enumerate() {
        r += estep.post_covs[j].trace();
        let y = DVector::from_column_slice(&task.values);
        for s in 0..model.k() {
            let g = estep.resp[(j, s)];
            if g > 0.0 {
                let f = pred.predict(s, &task.times, layout.pos(j), model.shifts[j][s])?;
                r += g * (&y - f - &estep.post_means[j][s]).norm_squared();
            }
        }
    }
    Ok((r / dataset.total_samples() as f64).max(noise_floor))
}

/// Which M-step blocks to run.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MStepPlan {
    pub mixture: bool,
    pub noise_and_kernel: bool,
    pub coef_first: bool,
    /// Weight the kernel step's cluster densities by the E-step responsibilities
    /// instead of the mixture proportions.
    pub fixed_weights: bool,
}

pub(crate) fn m_step(
    model: &mut GmtModel,
    estep: &EStepState,
    dataset: &Dataset,
    layout: &Layout,
    config: &FitConfig,
    mode: KernelMode,
    plan: MStepPlan,
) -> Result<()> {
    let k = model.k();
    if plan.mixture {
        model.mixture = update_mixture(&estep.resp);
    }
    let times: Vec<&[f64]> = dataset.tasks().iter().map(|t| t.times.as_slice()).collect();
    let positions: Option<Vec<&[usize]>> = layout
        .positions
        .as_ref()
        .map(|p| p.iter().map(|v| v.as_slice()).collect());
    // Parametric fits take the group step on the marginal likelihood directly.
    let marginal = plan.noise_and_kernel && matches!(mode, KernelMode::Parametric) && !model.absorbed_noise;
    let factors: Vec<Factor> = if marginal {
        let build = |t: &[f64]| -> Result<Factor> {
            let mut a = task_kernel(&model.indiv_kernel, t)?;
            for i in 0..a.nrows() {
                a[(i, i)] += model.noise_var;
            }
            cholesky_jittered(&a)
        };
        if dataset.is_synchronous() {
            vec![build(&dataset.tasks()[0].times)?]
        } else {
            times.par_iter().map(|t| build(t)).collect::<Result<_>>()?
        }
    } else {
        Vec::new()
    };
    let inverses: Vec<DMatrix<f64>> = if marginal && layout.positions.is_some() && model.lattice_step().is_some() {
        factors.par_iter().map(|f| f.inverse()).collect()
    } else {
        Vec::new()
    };
    let precision: Option<Vec<&DMatrix<f64>>> = (!inverses.is_empty()).then(|| {
        (0..dataset.len())
            .map(|j| &inverses[if inverses.len() == 1 { 0 } else { j }])
            .collect()
    });
    let metric: Option<Vec<&Factor>> = marginal.then(|| {
        (0..dataset.len())
            .map(|j| &factors[if factors.len() == 1 { 0 } else { j }])
            .collect()
    });
    let fits: Vec<Result<(GroupEffect, Vec<usize>)>> = (0..k)
        .into_par_iter()
        .map(|s| {
            let targets = dataset
                .tasks()
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    let y = DVector::from_column_slice(&t.values);
                    if model.absorbed_noise || marginal {
                        y
                    } else {
                        y - &estep.post_means[j][s]
                    }
                })
                .collect();
            let problem = GroupProblem {
                times: times.clone(),
                positions: positions.clone(),
                weights: estep.resp.column(s).iter().copied().collect(),
                targets,
                noise_var: model.noise_var,
                metric: metric.clone(),
                precision: precision.clone(),
                inner_max: config.inner_max,
                tol: config.tol,
                coef_first: plan.coef_first,
                freeze_shifts: config.freeze_shifts,
            };
            fit_group_effect(model, s, &problem)
        })
        .collect();
    for (s, fit) in fits.into_iter().enumerate() {
        let (effect, shifts) = fit?;
        model.groups[s] = effect;
        for (j, t) in shifts.into_iter().enumerate() {
            model.shifts[j][s] = t;
        }
    }
    if !plan.noise_and_kernel {
        return Ok(());
    }
    if !model.absorbed_noise && !marginal {
        model.noise_var = update_noise(estep, model, dataset, config.noise_floor)?;
    }

    match (mode, &model.indiv_kernel) {
        (KernelMode::Parametric, KernelModel::Rbf(p)) => {
            let pred = model.predictor();
            let residuals = dataset
                .tasks()
                .iter()
                .enumerate()
                .map(|(j, task)| {
                    let y = DVector::from_column_slice(&task.values);
                    (0..k)
                        .map(|s| Ok(&y - pred.predict(s, &task.times, layout.pos(j), model.shifts[j][s])?))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let lw: Vec<f64> = model.mixture.iter().map(|a| a.ln()).collect();
            let weights = if plan.fixed_weights {
                MarginalWeights::Fixed(&estep.resp)
            } else {
                MarginalWeights::Mixture(&lw)
            };
            let (p, noise) = optimize_rbf_marginal(
                *p,
                model.noise_var,
                Some(config.noise_floor),
                &times,
                &residuals,
                weights,
                config.kernel_iters,
            )?;
            model.indiv_kernel = KernelModel::Rbf(p);
            model.noise_var = noise;
        }
        (KernelMode::Nonparametric, _) if model.absorbed_noise => {
            model.indiv_kernel = KernelModel::Fixed(absorbed_kernel_update(estep, model, dataset, layout)?);
        }
        (KernelMode::Nonparametric, _) => {
            model.indiv_kernel = KernelModel::Fixed(empirical_kernel_update(estep, dataset)?);
        }
        (KernelMode::Parametric, KernelModel::Fixed(_)) => {
            return Err(Error::Contract("parametric mode needs an RBF individual kernel".into()))
        }
    }
    Ok(())
}

/// `(1/M) sum_j sum_s gamma_js (y_j - f_s)(y_j - f_s)^T` with the updated means.
fn absorbed_kernel_update(
    estep: &EStepState,
    model: &GmtModel,
    dataset: &Dataset,
    layout: &Layout,
) -> Result<FixedKernel> {
    let pred = model.predictor();
    let n = dataset.grid().len();
    let moments: Vec<DMatrix<f64>> = dataset
        .tasks()
        .iter()
        .enumerate()
        .map(|(j, task)| {
            let y = DVector::from_column_slice(&task.values);
            let mut s_j = DMatrix::zeros(n, n);
            for s in 0..model.k() {
                let g = estep.resp[(j, s)];
                if g > 0.0 {
                    let d = &y - pred.predict(s, &task.times, layout.pos(j), model.shifts[j][s])?;
                    s_j.ger(g, &d, &d, 1.0);
                }
            }
            Ok(s_j)
        })
        .collect::<Result<_>>()?;
    Ok(average_moments(&moments, dataset.grid().points.clone()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub restart: usize,
    pub final_objective: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
    /// Iterations whose change from the previous one is not an EM step (reseeds).
    pub unaudited: Vec<usize>,
    pub reseeds: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub k: usize,
    pub best_restart: usize,
    pub final_objective: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
    pub restarts: Vec<RestartSummary>,
}

/// Result of one EM run.
pub struct RunOutput {
    pub model: GmtModel,
    pub estep: EStepState,
    pub summary: RestartSummary,
}

/// Initial model for a dataset: support, kernels and noise per the config.
pub fn initial_model(dataset: &Dataset, k: usize, config: &FitConfig, mode: KernelMode) -> Result<GmtModel> {
    let lattice = dataset.lattice();
    let support: Vec<f64> = match lattice {
        Some(r) => (0..r).map(|i| lattice_point(i, r)).collect(),
        None => dataset.grid().points.clone(),
    };
    let group_kernel = match &config.group_kernel {
        KernelModel::Fixed(f) if f.points != support => {
            return Err(Error::Config("fixed group kernel must live on the model support".into()))
        }
        g => g.clone(),
    };
    let shift_grid = if config.shift_grid_size > 1 {
        ShiftGrid::uniform(config.shift_grid_size)?
    } else {
        ShiftGrid::zero()
    };
    let pooled = dataset.pooled_variance();
    let indiv_kernel = match mode {
        KernelMode::Parametric => {
            if config.absorbed_noise {
                return Err(Error::Config("absorbed noise needs the nonparametric kernel".into()));
            }
            KernelModel::Rbf(config.init_indiv)
        }
        KernelMode::Nonparametric => {
            if !dataset.is_synchronous() {
                return Err(Error::Contract(
                    "nonparametric kernel mode needs synchronously sampled tasks".into(),
                ));
            }
            let pts = dataset.grid().points.clone();
            let mut m = KernelModel::Rbf(config.init_indiv).entries(&pts)?;
            if config.absorbed_noise {
                // the combined covariance starts as kernel plus noise
                for i in 0..pts.len() {
                    m[(i, i)] += 0.1 * pooled.max(config.noise_floor);
                }
            }
            KernelModel::Fixed(FixedKernel { points: pts, matrix: m })
        }
    };
    let noise = if config.absorbed_noise {
        0.0
    } else {
        (0.1 * pooled).max(config.noise_floor)
    };
    let mut model = GmtModel::new(
        k,
        dataset.len(),
        support,
        lattice,
        group_kernel,
        config.flat_prior,
        indiv_kernel,
        noise,
        shift_grid,
    )?;
    model.absorbed_noise = config.absorbed_noise;
    Ok(model)
}

/// Circular linear interpolation of a task onto `r` uniform phases.
pub fn interpolate_task(task: &TaskSeries, r: usize) -> Vec<f64> {
    let n = task.len();
    if n == 1 {
        return vec![task.values[0]; r];
    }
    let mut out = Vec::with_capacity(r);
    let mut hi = 0;
    for i in 0..r {
        let x = lattice_point(i, r);
        while hi < n && task.times[hi] < x {
            hi += 1;
        }
        let (t0, v0, t1, v1) = if hi == 0 || hi == n {
            // wrap between the last and first sample
            let t0 = task.times[n - 1] - if hi == 0 { 1.0 } else { 0.0 };
            let t1 = task.times[0] + if hi == n { 1.0 } else { 0.0 };
            (t0, task.values[n - 1], t1, task.values[0])
        } else {
            (task.times[hi - 1], task.values[hi - 1], task.times[hi], task.values[hi])
        };
        let w = if t1 > t0 { (x - t0) / (t1 - t0) } else { 0.0 };
        out.push(v0 + w * (v1 - v0));
    }
    out
}

/// GP posterior mean of a task under an RBF prior, on `r` uniform phases.
pub fn smooth_task(task: &TaskSeries, kernel: &RbfParams, noise_var: f64, r: usize) -> Result<Vec<f64>> {
    let n = task.len();
    let mut a = DMatrix::from_fn(n, n, |i, l| kernel.eval(task.times[i], task.times[l]));
    for i in 0..n {
        a[(i, i)] += noise_var;
    }
    let alpha = cholesky_jittered(&a)?.solve_vec(&DVector::from_column_slice(&task.values));
    Ok((0..r)
        .map(|i| {
            let x = lattice_point(i, r);
            task.times.iter().zip(alpha.iter()).map(|(&t, w)| w * kernel.eval(x, t)).sum()
        })
        .collect())
}

/// k-means++ seeding followed by Lloyd iterations. With `shifts`, distances are
/// minimized over circular shifts. Returns assignments and per-(task, cluster) shifts.
pub fn shift_kmeans(
    series: &[Vec<f64>],
    k: usize,
    shifts: bool,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    let m = series.len();
    if m == 0 {
        return Err(Error::Empty("k-means input"));
    }
    let r = series[0].len();
    let dist = |center: &[f64], u: &[f64]| -> Result<(f64, usize)> {
        let tau = if shifts { best_shift_fft(center, u)? } else { 0 };
        let c = circular_shift(center, tau as i64);
        Ok((c.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), tau))
    };
    let mut centers: Vec<Vec<f64>> = vec![series[rng.random_range(0..m)].clone()];
    let mut d2: Vec<f64> = series
        .iter()
        .map(|u| dist(&centers[0], u).map(|d| d.0))
        .collect::<Result<_>>()?;
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut x = rng.random::<f64>() * total;
            let mut idx = m - 1;
            for (i, &d) in d2.iter().enumerate() {
                if x < d {
                    idx = i;
                    break;
                }
                x -= d;
            }
            idx
        } else {
            rng.random_range(0..m)
        };
        centers.push(series[pick].clone());
        for (i, u) in series.iter().enumerate() {
            d2[i] = d2[i].min(dist(centers.last().unwrap(), u)?.0);
        }
    }
    let mut assign = vec![usize::MAX; m];
    let mut tau = vec![vec![0usize; k]; m];
    for _ in 0..iters.max(1) {
        let mut changed = false;
        let mut best_d = vec![0.0; m];
        for (i, u) in series.iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (s, c) in centers.iter().enumerate() {
                let (d, t) = dist(c, u)?;
                tau[i][s] = t;
                if d < best.0 {
                    best = (d, s);
                }
            }
            best_d[i] = best.0;
            if assign[i] != best.1 {
                assign[i] = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (s, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..m).filter(|&i| assign[i] == s).collect();
            if members.is_empty() {
                // move an empty center onto the worst-fitted task
                let far = (0..m).fold(0, |b, i| if best_d[i] > best_d[b] { i } else { b });
                *center = series[far].clone();
                best_d[far] = 0.0;
                continue;
            }
            let mut acc = vec![0.0; r];
            for &i in &members {
                let aligned = circular_shift(&series[i], -(tau[i][s] as i64));
                for (a, v) in acc.iter_mut().zip(aligned) {
                    *a += v;
                }
            }
            *center = acc.into_iter().map(|v| v / members.len() as f64).collect();
        }
    }
    Ok((assign, tau))
}

/// Initial responsibilities and shifts for one restart.
pub(crate) fn initialize(
    model: &mut GmtModel,
    dataset: &Dataset,
    config: &FitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    let k = model.k();
    let l = model.shift_grid.count();
    let shifts_on = l > 1 && !config.freeze_shifts;
    let r = if shifts_on { l } else { dataset.lattice().unwrap_or(100) };
    let series: Vec<Vec<f64>> = match &model.group_kernel {
        KernelModel::Rbf(p) => {
            let noise = (0.1 * dataset.pooled_variance()).max(config.noise_floor);
            dataset
                .tasks()
                .iter()
                .map(|t| smooth_task(t, p, noise, r))
                .collect::<Result<_>>()?
        }
        KernelModel::Fixed(_) => dataset.tasks().iter().map(|t| interpolate_task(t, r)).collect(),
    };
    let (assign, tau) = shift_kmeans(&series, k, shifts_on, config.kmeans_iters, rng)?;
    let mut resp = DMatrix::zeros(dataset.len(), k);
    for (j, &s) in assign.iter().enumerate() {
        resp[(j, s)] = 1.0;
        if shifts_on {
            model.shifts[j] = tau[j].clone();
        }
    }
    Ok(resp)
}

/// Options for a single EM run beyond the config.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Hold responsibilities at the initial values (known labels).
    pub clamp_resp: bool,
}

/// One full M-step (mixture, group effects and shifts, noise and kernel) from
/// the given E-step.
pub fn update_model(
    model: &mut GmtModel,
    estep: &EStepState,
    dataset: &Dataset,
    config: &FitConfig,
    mode: KernelMode,
) -> Result<()> {
    check_shapes(model, dataset)?;
    let layout = Layout::new(dataset, model);
    m_step(
        model,
        estep,
        dataset,
        &layout,
        config,
        mode,
        MStepPlan {
            mixture: true,
            noise_and_kernel: true,
            coef_first: false,
            fixed_weights: false,
        },
    )
}

/// Runs EM from given initial responsibilities on an initial model.
pub fn run_em(
    mut model: GmtModel,
    dataset: &Dataset,
    init_resp: DMatrix<f64>,
    config: &FitConfig,
    mode: KernelMode,
    options: &RunOptions,
    restart: usize,
) -> Result<RunOutput> {
    check_shapes(&model, dataset)?;
    let layout = Layout::new(dataset, &model);
    let init = EStepState::from_assignments(dataset, init_resp.clone());
    m_step(
        &mut model,
        &init,
        dataset,
        &layout,
        config,
        mode,
        MStepPlan {
            mixture: true,
            noise_and_kernel: false,
            coef_first: true,
            fixed_weights: false,
        },
    )?;
    let mut summary = RestartSummary {
        restart,
        final_objective: None,
        iterations: 0,
        converged: false,
        objective_trace: Vec::new(),
        unaudited: Vec::new(),
        reseeds: 0,
        error: None,
    };
    let mut prev: Option<f64> = None;
    let mut skip_audit = false;
    let mut estep;
    loop {
        let lw: Vec<f64> = model.mixture.iter().map(|a| a.ln()).collect();
        estep = e_step_inner(&model, dataset, &layout, &lw)?;
        let objective = if options.clamp_resp {
            clamped_objective(&model, &estep, &init_resp)
        } else {
            penalized_objective(&model, &estep)
        };
        if !objective.is_finite() {
            return Err(Error::NonFinite("penalized objective"));
        }
        let it = summary.objective_trace.len();
        summary.objective_trace.push(objective);
        if skip_audit {
            summary.unaudited.push(it);
        }
        if let (Some(p), false) = (prev, skip_audit) {
            if objective < p - MONOTONE_SLACK && config.strict_monotone {
                return Err(Error::Monotonicity {
                    iteration: it,
                    before: p,
                    after: objective,
                });
            }
        }
        if let (Some(p), false) = (prev, skip_audit) {
            if (objective - p).abs() < config.tol {
                summary.converged = true;
                break;
            }
        }
        if summary.iterations >= config.max_iter {
            break;
        }
        skip_audit = false;
        prev = Some(objective);
        if options.clamp_resp {
            estep.resp = init_resp.clone();
        } else if summary.reseeds < config.max_reseeds && reseed_empty(&mut estep) {
            summary.reseeds += 1;
            skip_audit = true;
        }
        m_step(
            &mut model,
            &estep,
            dataset,
            &layout,
            config,
            mode,
            MStepPlan {
                mixture: true,
                noise_and_kernel: true,
                coef_first: false,
                fixed_weights: options.clamp_resp,
            },
        )?;
        summary.iterations += 1;
    }
    summary.final_objective = summary.objective_trace.last().copied();
    Ok(RunOutput {
        model,
        estep,
        summary,
    })
}

/// Complete-data objective for fixed labels.
fn clamped_objective(model: &GmtModel, estep: &EStepState, labels: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for j in 0..labels.nrows() {
        for s in 0..labels.ncols() {
            let g = labels[(j, s)];
            if g > 0.0 {
                total += g * (model.mixture[s].ln() + estep.log_dens[(j, s)]);
            }
        }
    }
    total - model.penalty()
}

/// Hands each empty cluster the worst-explained task. Returns whether anything changed.
fn reseed_empty(estep: &mut EStepState) -> bool {
    let k = estep.resp.ncols();
    let mut used: Vec<usize> = Vec::new();
    let mut changed = false;
    for s in 0..k {
        if estep.cluster_mass(s) >= EMPTY_CLUSTER_MASS {
            continue;
        }
        let cand = (0..estep.resp.nrows())
            .filter(|j| !used.contains(j))
            .min_by(|&a, &b| {
                estep.per_task_loglik[a]
                    .total_cmp(&estep.per_task_loglik[b])
                    .then(a.cmp(&b))
            });
        if let Some(j) = cand {
            used.push(j);
            for t in 0..k {
                estep.resp[(j, t)] = if t == s { 1.0 } else { 0.0 };
            }
            changed = true;
        }
    }
    changed
}

/// Per-restart RNG: one ChaCha stream per restart index.
pub fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

/// Fits a `k`-cluster model with `config.restarts` seeded restarts and keeps the best.
pub fn fit(dataset: &Dataset, k: usize, config: &FitConfig, mode: KernelMode) -> Result<(GmtModel, FitReport)> {
    let (out, report) = fit_full(dataset, k, config, mode, &RunOptions::default(), None)?;
    let _ = out.estep;
    Ok((out.model, report))
}

/// As [`fit`], returning the final E-step of the best run as well. With
/// `init_resp`, every restart starts from those responsibilities.
pub fn fit_full(
    dataset: &Dataset,
    k: usize,
    config: &FitConfig,
    mode: KernelMode,
    options: &RunOptions,
    init_resp: Option<&DMatrix<f64>>,
) -> Result<(RunOutput, FitReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let base = initial_model(dataset, k, config, mode)?;
    let runs: Vec<Result<RunOutput>> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = restart_rng(config.seed, r);
            let mut model = base.clone();
            let resp = match init_resp {
                Some(g) => {
                    if g.nrows() != dataset.len() || g.ncols() != k {
                        return Err(Error::Dimension("initial responsibilities shape".into()));
                    }
                    if model.shift_grid.count() > 1 && !config.freeze_shifts {
                        initialize(&mut model, dataset, config, &mut rng)?;
                    }
                    g.clone()
                }
                None => initialize(&mut model, dataset, config, &mut rng)?,
            };
            run_em(model, dataset, resp, config, mode, options, r)
        })
        .collect();
    pick_best(runs, k)
}

pub(crate) fn pick_best(runs: Vec<Result<RunOutput>>, k: usize) -> Result<(RunOutput, FitReport)> {
    let n = runs.len();
    let mut summaries = Vec::with_capacity(n);
    let mut best: Option<RunOutput> = None;
    let mut last_err = String::new();
    for (r, run) in runs.into_iter().enumerate() {
        match run {
            Ok(out) => {
                summaries.push(out.summary.clone());
                let better = match &best {
                    None => true,
                    Some(b) => out.summary.final_objective > b.summary.final_objective,
                };
                if better {
                    best = Some(out);
                }
            }
            Err(e) => {
                last_err = e.to_string();
                summaries.push(RestartSummary {
                    restart: r,
                    final_objective: None,
                    iterations: 0,
                    converged: false,
                    objective_trace: Vec::new(),
                    unaudited: Vec::new(),
                    reseeds: 0,
                    error: Some(last_err.clone()),
                });
            }
        }
    }
    let best = best.ok_or(Error::AllRestartsFailed(n, last_err))?;
    let report = FitReport {
        k,
        best_restart: best.summary.restart,
        final_objective: best.summary.final_objective.unwrap_or(f64::NAN),
        log_likelihood: best.estep.per_task_loglik.iter().sum(),
        iterations: best.summary.iterations,
        converged: best.summary.converged,
        objective_trace: best.summary.objective_trace.clone(),
        restarts: summaries,
    };
    Ok((best, report))
}

/// Log-sum-exp of a task's weighted component densities; used for held-out scoring.
pub fn mixture_loglik(log_dens: &[f64], log_weights: &[f64]) -> f64 {
    let v: Vec<f64> = log_dens.iter().zip(log_weights).map(|(a, b)| a + b).collect();
    log_sum_exp(&v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::RbfParams;

    fn task(id: &str, times: &[f64], values: &[f64]) -> TaskSeries {
        TaskSeries {
            id: id.into(),
            times: times.to_vec(),
            values: values.to_vec(),
            label: None,
        }
    }

    fn rbf(a: f64, d: f64) -> KernelModel {
        KernelModel::Rbf(RbfParams::new(a, d).unwrap())
    }

    fn small_dataset() -> Dataset {
        let t = [0.0, 0.25, 0.5, 0.75];
        Dataset::new(
            vec![
                task("a", &t, &[0.3, -0.2, 0.8, 0.1]),
                task("b", &t, &[-0.5, 0.4, 0.0, 1.2]),
                task("c", &t, &[1.0, 0.9, -0.7, 0.2]),
            ],
            1.0,
        )
        .unwrap()
    }

    fn model_for(ds: &Dataset, k: usize) -> GmtModel {
        GmtModel::new(
            k,
            ds.len(),
            ds.grid().points.clone(),
            None,
            rbf(1.0, 0.05),
            false,
            rbf(0.5, 0.1),
            0.2,
            ShiftGrid::zero(),
        )
        .unwrap()
    }

    fn dense_log_normal(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let n = y.len() as f64;
        let d = y - mean;
        let inv = cov.clone().try_inverse().unwrap();
        -0.5 * (d.transpose() * inv * &d)[0] - 0.5 * cov.determinant().ln() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn e_step_single_cluster() {
        let ds = small_dataset();
        let e = e_step(&model_for(&ds, 1), &ds).unwrap();
        for j in 0..ds.len() {
            assert_eq!(e.resp[(j, 0)], 1.0);
        }
    }

    #[test]
    fn e_step_identical_clusters_follow_prior() {
        let ds = small_dataset();
        let mut m = model_for(&ds, 2);
        let e = e_step(&m, &ds).unwrap();
        for j in 0..ds.len() {
            assert!((e.resp[(j, 0)] - 0.5).abs() < 1e-12);
        }
        m.mixture = vec![0.8, 0.2];
        let e = e_step(&m, &ds).unwrap();
        for j in 0..ds.len() {
            assert!((e.resp[(j, 0)] - 0.8).abs() < 1e-12);
            assert!((e.resp[(j, 1)] - 0.2).abs() < 1e-12);
            let s: f64 = e.resp.row(j).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_examples() {
        let a = update_mixture(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]));
        assert_eq!(a, vec![1.0, 0.0]);
        let a = update_mixture(&DMatrix::from_element(4, 3, 1.0 / 3.0));
        for x in a {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = update_mixture(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.5]));
        assert!((a[0] - 0.75).abs() < 1e-15 && (a[1] - 0.25).abs() < 1e-15);
    }

    fn problem<'a>(times: Vec<&'a [f64]>, weights: Vec<f64>, targets: Vec<DVector<f64>>, noise_var: f64) -> GroupProblem<'a> {
        GroupProblem {
            times,
            positions: None,
            weights,
            targets,
            noise_var,
            metric: None,
            precision: None,
            inner_max: 20,
            tol: 1e-12,
            coef_first: true,
            freeze_shifts: true,
        }
    }

    #[test]
    fn group_effect_zero_weights() {
        let ds = small_dataset();
        let m = model_for(&ds, 1);
        let t: Vec<&[f64]> = ds.tasks().iter().map(|t| t.times.as_slice()).collect();
        let y = vec![DVector::from_element(4, 1.0); 3];
        let (g, _) = fit_group_effect(&m, 0, &problem(t, vec![0.0; 3], y, 0.2)).unwrap();
        assert_eq!(g.coefficients, DVector::zeros(4));
    }

    #[test]
    fn group_effect_one_point() {
        let pts = vec![0.0];
        let ds = Dataset::new(vec![task("a", &[0.0], &[3.0])], 1.0).unwrap();
        let m = GmtModel::new(
            1,
            1,
            pts.clone(),
            None,
            KernelModel::Fixed(FixedKernel::identity(pts)),
            false,
            rbf(1.0, 0.1),
            1.0,
            ShiftGrid::zero(),
        )
        .unwrap();
        let t: Vec<&[f64]> = vec![ds.task(0).times.as_slice()];
        let y = vec![DVector::from_element(1, 3.0)];
        let (g, _) = fit_group_effect(&m, 0, &problem(t, vec![1.0], y, 1.0)).unwrap();
        // minimizer of (3 - c)^2 / 2 + c^2 / 2
        assert!((g.coefficients[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn duplicated_task_equals_doubled_weight() {
        let times = [0.1, 0.35, 0.6, 0.9];
        let y = DVector::from_column_slice(&[0.4, -0.3, 1.1, 0.2]);
        let one = Dataset::new(vec![task("a", &times, y.as_slice())], 1.0).unwrap();
        let two = Dataset::new(vec![task("a", &times, y.as_slice()), task("b", &times, y.as_slice())], 1.0).unwrap();
        let m1 = model_for(&one, 1);
        let m2 = model_for(&two, 1);
        let t1: Vec<&[f64]> = vec![&times];
        let t2: Vec<&[f64]> = vec![&times, &times];
        let (g1, _) = fit_group_effect(&m1, 0, &problem(t1, vec![2.0], vec![y.clone()], 0.3)).unwrap();
        let (g2, _) = fit_group_effect(&m2, 0, &problem(t2, vec![1.0, 1.0], vec![y.clone(), y], 0.3)).unwrap();
        assert!((&g1.coefficients - &g2.coefficients).amax() < 1e-10);
    }

    #[test]
    fn metric_one_point() {
        let pts = vec![0.0];
        let ds = Dataset::new(vec![task("a", &[0.0], &[3.0])], 1.0).unwrap();
        let m = GmtModel::new(
            1,
            1,
            pts.clone(),
            None,
            KernelModel::Fixed(FixedKernel::identity(pts)),
            false,
            rbf(1.0, 0.1),
            1.0,
            ShiftGrid::zero(),
        )
        .unwrap();
        let fac = cholesky_jittered(&DMatrix::from_element(1, 1, 2.0)).unwrap();
        let t: Vec<&[f64]> = vec![ds.task(0).times.as_slice()];
        let mut p = problem(t, vec![1.0], vec![DVector::from_element(1, 3.0)], 1.0);
        p.metric = Some(vec![&fac]);
        let (g, _) = fit_group_effect(&m, 0, &p).unwrap();
        // minimizer of (3 - c)^2 / 4 + c^2 / 2
        assert!((g.coefficients[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scaled_identity_metric_matches_euclidean() {
        let times = [0.1, 0.35, 0.6, 0.9];
        let y1 = DVector::from_column_slice(&[0.4, -0.3, 1.1, 0.2]);
        let y2 = DVector::from_column_slice(&[0.1, 0.5, -0.7, 0.3]);
        let ds = Dataset::new(vec![task("a", &times, y1.as_slice()), task("b", &times, y2.as_slice())], 1.0).unwrap();
        let m = model_for(&ds, 1);
        let t: Vec<&[f64]> = vec![&times, &times];
        let plain = problem(t.clone(), vec![0.7, 0.2], vec![y1.clone(), y2.clone()], 0.3);
        let fac = cholesky_jittered(&(DMatrix::identity(4, 4) * 0.3)).unwrap();
        let mut white = problem(t, vec![0.7, 0.2], vec![y1, y2], 0.3);
        white.metric = Some(vec![&fac, &fac]);
        let (a, _) = fit_group_effect(&m, 0, &plain).unwrap();
        let (b, _) = fit_group_effect(&m, 0, &white).unwrap();
        assert!((&a.coefficients - &b.coefficients).amax() < 1e-10);
    }

    #[test]
    fn flat_identity_prior_gives_weighted_mean() {
        let ds = small_dataset();
        let pts = ds.grid().points.clone();
        let m = GmtModel::new(
            1,
            ds.len(),
            pts.clone(),
            None,
            KernelModel::Fixed(FixedKernel::identity(pts)),
            true,
            rbf(1.0, 0.1),
            0.2,
            ShiftGrid::zero(),
        )
        .unwrap();
        let t: Vec<&[f64]> = ds.tasks().iter().map(|t| t.times.as_slice()).collect();
        let w = vec![0.2, 0.5, 0.9];
        let y: Vec<DVector<f64>> = ds.tasks().iter().map(|t| DVector::from_column_slice(&t.values)).collect();
        let (g, _) = fit_group_effect(&m, 0, &problem(t, w.clone(), y.clone(), 0.2)).unwrap();
        let mean = (&y[0] * w[0] + &y[1] * w[1] + &y[2] * w[2]) / w.iter().sum::<f64>();
        assert!((&g.values - mean).amax() < 1e-10);
    }

    #[test]
    fn noise_examples() {
        let ds = Dataset::new(vec![task("a", &[0.0, 0.5], &[0.0, 0.0]), task("b", &[0.0, 0.5], &[0.0, 0.0])], 1.0).unwrap();
        let m = model_for(&ds, 1);
        let e = EStepState::from_assignments(&ds, DMatrix::from_element(2, 1, 1.0));
        assert_eq!(update_noise(&e, &m, &ds, 1e-8).unwrap(), 1e-8);
        // R = 2 over 4 samples
        let ds = Dataset::new(vec![task("a", &[0.0, 0.5], &[1.0, 0.0]), task("b", &[0.0, 0.5], &[0.0, 1.0])], 1.0).unwrap();
        assert!((update_noise(&e, &m, &ds, 1e-8).unwrap() - 0.5).abs() < 1e-15);
        let ds2 = Dataset::new(vec![task("a", &[0.0, 0.5], &[2.0, 0.0]), task("b", &[0.0, 0.5], &[0.0, 2.0])], 1.0).unwrap();
        assert!((update_noise(&e, &m, &ds2, 1e-8).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn penalty_examples() {
        let ds = small_dataset();
        let mut m = model_for(&ds, 1);
        assert_eq!(m.penalty(), 0.0);
        let beta = DVector::from_fn(m.basis().rank(), |i, _| 0.1 * i as f64 - 0.2);
        m.groups[0] = m.basis().effect(beta.clone());
        let p = m.penalty();
        m.groups[0] = m.basis().effect(beta * 2.0);
        assert!((m.penalty() - 4.0 * p).abs() < 1e-12 * p.max(1.0));
    }

    #[test]
    fn objective_matches_dense_oracle() {
        let ds = Dataset::new(
            vec![
                task("a", &[0.05, 0.3, 0.55], &[0.2, -0.4, 0.9]),
                task("b", &[0.1, 0.3, 0.7, 0.8], &[1.0, 0.1, -0.3, 0.5]),
            ],
            1.0,
        )
        .unwrap();
        let gk = rbf(0.8, 0.04);
        let ik = rbf(0.3, 0.2);
        let mut m = GmtModel::new(2, 2, ds.grid().points.clone(), None, gk.clone(), false, ik.clone(), 0.15, ShiftGrid::uniform(4).unwrap()).unwrap();
        m.mixture = vec![0.35, 0.65];
        let r = m.basis().rank();
        m.groups[0] = m.basis().effect(DVector::from_fn(r, |i, _| 0.3 - 0.1 * i as f64));
        m.groups[1] = m.basis().effect(DVector::from_fn(r, |i, _| (i as f64).sin()));
        m.shifts = vec![vec![1, 3], vec![2, 0]];
        let e = e_step(&m, &ds).unwrap();
        let got = penalized_objective(&m, &e);

        let support = &m.support;
        let kg = gk.entries(support).unwrap();
        let mut expect = 0.0;
        for (j, t) in ds.tasks().iter().enumerate() {
            let y = DVector::from_column_slice(&t.values);
            let mut cov = ik.entries(&t.times).unwrap();
            for i in 0..t.len() {
                cov[(i, i)] += 0.15;
            }
            let mut terms = Vec::new();
            for s in 0..2 {
                let shift = m.shift_grid.shifts[m.shifts[j][s]];
                let f = DVector::from_fn(t.len(), |i, _| {
                    let p = (t.times[i] - shift).rem_euclid(1.0);
                    support
                        .iter()
                        .zip(m.groups[s].coefficients.iter())
                        .map(|(&x, c)| c * gk.eval(p, x).unwrap())
                        .sum::<f64>()
                });
                terms.push(m.mixture[s].ln() + dense_log_normal(&y, &f, &cov));
            }
            expect += log_sum_exp(&terms);
        }
        for g in &m.groups {
            expect -= 0.5 * (g.coefficients.transpose() * &kg * &g.coefficients)[0];
        }
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn fit_is_monotone_and_deterministic() {
        let mut tasks = Vec::new();
        let times: Vec<f64> = (0..8).map(|i| i as f64 / 8.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for j in 0..8 {
            let amp = if j % 2 == 0 { 1.0 } else { -1.0 };
            let v: Vec<f64> = times
                .iter()
                .map(|&t| amp * (2.0 * std::f64::consts::PI * t).sin() + 0.1 * (rng.random::<f64>() - 0.5))
                .collect();
            tasks.push(task(&format!("t{j}"), &times, &v));
        }
        let ds = Dataset::new(tasks, 1.0).unwrap().with_lattice(8).unwrap();
        let cfg = FitConfig {
            restarts: 2,
            max_iter: 30,
            seed: 3,
            ..FitConfig::default()
        };
        let (m1, r1) = fit(&ds, 2, &cfg, KernelMode::Parametric).unwrap();
        let (m2, r2) = fit(&ds, 2, &cfg, KernelMode::Parametric).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
        for w in r1.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - MONOTONE_SLACK);
        }
        let (_, r) = fit(&ds, 1, &cfg, KernelMode::Parametric).unwrap();
        assert_eq!(r.k, 1);
    }
}
