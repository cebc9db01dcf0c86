//! Prediction, classification, class discovery, model-order selection and baselines.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskSeries};
use crate::dp::{fit_dp_full, DpConfig};
use crate::em::{fit_full, lattice_positions, EStepState, FitConfig, FitReport, GmtModel, KernelMode, RunOptions};
use crate::error::{Error, Result};
use crate::gp::{predictive_with, NoisyKernel};
use crate::kernel::{kernel_matrix, FixedKernel, KernelInputs, KernelModel, RbfParams};
use crate::linalg::{argmax, log_sum_exp, softmax_in_place};
use crate::shift::circular_shift;

/// Per-cluster log densities of one task under its stored shifts, plus the factorization.
fn task_densities(model: &GmtModel, task: &TaskSeries, shifts: &[usize]) -> Result<(Vec<f64>, Vec<DVector<f64>>, NoisyKernel)> {
    let k = kernel_matrix(&model.indiv_kernel, KernelInputs::Times(&task.times))?.entries;
    let nk = NoisyKernel::new(&k, model.noise_var)?;
    let pred = model.predictor();
    let pos = model.lattice.and_then(|r| lattice_positions(&task.times, r));
    let y = DVector::from_column_slice(&task.values);
    let mut dens = Vec::with_capacity(model.k());
    let mut resid = Vec::with_capacity(model.k());
    for (s, &tau) in shifts.iter().enumerate() {
        let r = &y - pred.predict(s, &task.times, pos.as_deref(), tau)?;
        dens.push(nk.log_density(&r).0);
        resid.push(r);
    }
    Ok((dens, resid, nk))
}

/// Responsibilities of training task `j` under the model.
pub fn task_responsibilities(model: &GmtModel, dataset: &Dataset, j: usize) -> Result<Vec<f64>> {
    let (dens, _, _) = task_densities(model, dataset.task(j), &model.shifts[j])?;
    let mut w: Vec<f64> = dens.iter().zip(&model.mixture).map(|(d, a)| d + a.ln()).collect();
    softmax_in_place(&mut w);
    Ok(w)
}

/// Predicts training task `j` at query phases: shifted MAP group effect plus
/// the individual effect's posterior mean.
pub fn predict_task(model: &GmtModel, dataset: &Dataset, j: usize, query: &[f64]) -> Result<Vec<f64>> {
    if j >= dataset.len() || model.shifts.len() != dataset.len() {
        return Err(Error::Dimension(format!("task {j} not in the fitted dataset")));
    }
    let task = dataset.task(j);
    let (dens, resid, nk) = task_densities(model, task, &model.shifts[j])?;
    let mut w: Vec<f64> = dens.iter().zip(&model.mixture).map(|(d, a)| d + a.ln()).collect();
    softmax_in_place(&mut w);
    let s = argmax(&w);
    let tau = model.shifts[j][s];
    let pred = model.predictor();
    let qpos = model.lattice.and_then(|r| lattice_positions(query, r));
    let group = pred.predict(s, query, qpos.as_deref(), tau)?;
    query
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let (m, _) = predictive_with(&nk, &task.times, &resid[s], &model.indiv_kernel, x)?;
            Ok(group[i] + m)
        })
        .collect()
}

/// Best-shift log density of `series` under each cluster of `model`.
pub fn aligned_log_densities(model: &GmtModel, series: &TaskSeries) -> Result<Vec<(f64, usize)>> {
    let k = kernel_matrix(&model.indiv_kernel, KernelInputs::Times(&series.times))?.entries;
    let nk = NoisyKernel::new(&k, model.noise_var)?;
    let pred = model.predictor();
    let pos = model.lattice.and_then(|r| lattice_positions(&series.times, r));
    let y = DVector::from_column_slice(&series.values);
    (0..model.k())
        .map(|s| {
            let mut best = (f64::NEG_INFINITY, 0);
            for tau in 0..model.shift_grid.count() {
                let r = &y - pred.predict(s, &series.times, pos.as_deref(), tau)?;
                let ll = nk.log_density(&r).0;
                if ll > best.0 {
                    best = (ll, tau);
                }
            }
            Ok(best)
        })
        .collect()
}

/// One fitted model per label plus label priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub labels: Vec<String>,
    pub priors: Vec<f64>,
    pub models: Vec<GmtModel>,
}

impl ClassifierModel {
    pub fn new(labels: Vec<String>, priors: Vec<f64>, models: Vec<GmtModel>) -> Result<Self> {
        if labels.is_empty() || labels.len() != priors.len() || labels.len() != models.len() {
            return Err(Error::Dimension("classifier labels, priors and models differ in count".into()));
        }
        let total: f64 = priors.iter().sum();
        if priors.iter().any(|&p| !(p >= 0.0)) || !(total > 0.0) {
            return Err(Error::Config("label priors must be nonnegative with positive sum".into()));
        }
        let priors = priors.into_iter().map(|p| p / total).collect();
        Ok(ClassifierModel { labels, priors, models })
    }
}

/// How each per-label model is fitted.
#[derive(Clone, Debug)]
pub enum LabelModelSpec {
    Gmt { k: usize, config: FitConfig },
    Dp(DpConfig),
}

/// Fits one model per label of a labeled dataset; priors are label frequencies.
pub fn train_classifier(dataset: &Dataset, spec: &LabelModelSpec, mode: KernelMode) -> Result<ClassifierModel> {
    let labels = dataset.label_set();
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let fitted: Vec<Result<(GmtModel, f64)>> = labels
        .par_iter()
        .map(|l| {
            let idx: Vec<usize> = (0..dataset.len())
                .filter(|&j| dataset.task(j).label.as_deref() == Some(l.as_str()))
                .collect();
            let sub = dataset.subset(&idx)?;
            let model = match spec {
                LabelModelSpec::Gmt { k, config } => fit_full(&sub, (*k).min(idx.len()), config, mode, &RunOptions::default(), None)?.0.model,
                LabelModelSpec::Dp(c) => fit_dp_full(&sub, c, mode)?.0.model,
            };
            Ok((model, idx.len() as f64))
        })
        .collect();
    let mut models = Vec::new();
    let mut priors = Vec::new();
    for f in fitted {
        let (m, n) = f?;
        models.push(m);
        priors.push(n);
    }
    ClassifierModel::new(labels, priors, models)
}

/// MAP label of a new series; returns the label and per-label log scores.
pub fn classify(classifier: &ClassifierModel, series: &TaskSeries) -> Result<(String, Vec<f64>)> {
    if series.is_empty() {
        return Err(Error::Empty("series"));
    }
    let scores: Vec<f64> = classifier
        .models
        .iter()
        .zip(&classifier.priors)
        .map(|(m, &p)| {
            let dens = aligned_log_densities(m, series)?;
            let terms: Vec<f64> = dens.iter().zip(&m.mixture).map(|((d, _), a)| d + a.ln()).collect();
            Ok(log_sum_exp(&terms) + p.ln())
        })
        .collect::<Result<_>>()?;
    Ok((classifier.labels[argmax(&scores)].clone(), scores))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryResult {
    /// Majority reference label of each cluster, `None` when no reference task landed there.
    pub cluster_labels: Vec<Option<String>>,
    /// Predicted labels of the test tasks (`"unknown"` for unmapped clusters).
    pub predictions: Vec<String>,
    pub accuracy: f64,
}

/// How the union is clustered during discovery.
#[derive(Clone, Debug)]
pub enum Clusterer {
    Gmt { k: usize, config: FitConfig },
    Dp(DpConfig),
}

/// Clusters reference and test tasks together, names clusters by the
/// majority reference label and scores the test tasks' implied labels.
pub fn class_discovery(reference: &Dataset, test: &Dataset, clusterer: &Clusterer, mode: KernelMode) -> Result<DiscoveryResult> {
    if reference.tasks().iter().any(|t| t.label.is_none()) {
        return Err(Error::Contract("reference tasks must be labeled".into()));
    }
    let mut tasks: Vec<TaskSeries> = reference.tasks().to_vec();
    tasks.extend(test.tasks().iter().cloned().map(|mut t| {
        t.label = None;
        t
    }));
    let mut union = Dataset::new(tasks, reference.period())?;
    if let (Some(a), Some(b)) = (reference.lattice(), test.lattice()) {
        if a == b {
            union = union.with_lattice(a)?;
        }
    }
    let estep: EStepState = match clusterer {
        Clusterer::Gmt { k, config } => fit_full(&union, *k, config, mode, &RunOptions::default(), None)?.0.estep,
        Clusterer::Dp(c) => fit_dp_full(&union, c, mode)?.0.estep,
    };
    let k = estep.resp.ncols();
    let nref = reference.len();
    let ref_labels = reference.label_set();
    let mut counts = vec![vec![0usize; ref_labels.len()]; k];
    for j in 0..nref {
        let s = estep.map_cluster(j);
        let l = reference.task(j).label.as_ref().expect("checked above");
        let li = ref_labels.iter().position(|x| x == l).expect("label in set");
        counts[s][li] += 1;
    }
    let cluster_labels: Vec<Option<String>> = counts
        .iter()
        .map(|c| {
            let total: usize = c.iter().sum();
            (total > 0).then(|| {
                // majority, first label on ties
                let best = (0..c.len()).fold(0, |b, i| if c[i] > c[b] { i } else { b });
                ref_labels[best].clone()
            })
        })
        .collect();
    let mut correct = 0usize;
    let predictions: Vec<String> = (0..test.len())
        .map(|i| {
            let s = estep.map_cluster(nref + i);
            let p = cluster_labels[s].clone().unwrap_or_else(|| "unknown".to_string());
            if test.task(i).label.as_deref() == Some(p.as_str()) {
                correct += 1;
            }
            p
        })
        .collect();
    let accuracy = if test.is_empty() { 0.0 } else { correct as f64 / test.len() as f64 };
    Ok(DiscoveryResult {
        cluster_labels,
        predictions,
        accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BicScore {
    pub k: usize,
    pub bic: f64,
    pub log_likelihood: f64,
    pub params: usize,
}

/// Parameter count `(k-1) + k*N + M + 1 + |kernel|`.
pub fn bic_param_count(k: usize, grid_size: usize, n_tasks: usize, kernel: &KernelModel) -> usize {
    (k - 1) + k * grid_size + n_tasks + 1 + kernel.param_count()
}

pub fn bic_value(log_likelihood: f64, params: usize, total_samples: usize) -> f64 {
    -2.0 * log_likelihood + params as f64 * (total_samples as f64).ln()
}

/// Index of the smallest BIC, first on ties.
pub fn bic_argmin(scores: &[BicScore]) -> usize {
    (0..scores.len()).fold(0, |b, i| if scores[i].bic < scores[b].bic { i } else { b })
}

/// Fits every `k` in `k_range` and keeps the BIC minimizer (smaller `k` on ties).
pub fn bic_select(
    dataset: &Dataset,
    k_range: &[usize],
    config: &FitConfig,
    mode: KernelMode,
) -> Result<(usize, Vec<BicScore>, GmtModel, FitReport)> {
    if k_range.is_empty() {
        return Err(Error::Empty("k range"));
    }
    let mut ks = k_range.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let fits: Vec<Result<(GmtModel, FitReport, BicScore)>> = ks
        .par_iter()
        .map(|&k| {
            let (out, report) = fit_full(dataset, k, config, mode, &RunOptions::default(), None)?;
            let ll: f64 = out.estep.per_task_loglik.iter().sum();
            let p = bic_param_count(k, dataset.grid().len(), dataset.len(), &out.model.indiv_kernel);
            let score = BicScore {
                k,
                bic: bic_value(ll, p, dataset.total_samples()),
                log_likelihood: ll,
                params: p,
            };
            Ok((out.model, report, score))
        })
        .collect();
    let mut models = Vec::new();
    let mut scores = Vec::new();
    for f in fits {
        let (m, r, s) = f?;
        models.push((m, r));
        scores.push(s);
    }
    let best = bic_argmin(&scores);
    let (model, report) = models.swap_remove(best);
    Ok((scores[best].k, scores, model, report))
}

/// Plain GP regression on one task's own samples.
#[derive(Clone, Debug)]
pub struct SingleTaskGp {
    times: Vec<f64>,
    values: DVector<f64>,
    kernel: KernelModel,
    factor: NoisyKernel,
}

impl SingleTaskGp {
    pub fn predict(&self, t: f64) -> Result<(f64, f64)> {
        predictive_with(&self.factor, &self.times, &self.values, &self.kernel, t)
    }

    pub fn predict_many(&self, ts: &[f64]) -> Result<Vec<f64>> {
        ts.iter().map(|&t| self.predict(t).map(|p| p.0)).collect()
    }
}

pub fn fit_single_task(series: &TaskSeries, kernel: RbfParams, noise_var: f64) -> Result<SingleTaskGp> {
    if series.is_empty() {
        return Err(Error::Empty("series"));
    }
    let kernel = KernelModel::Rbf(kernel);
    let k = kernel.entries(&series.times)?;
    Ok(SingleTaskGp {
        times: series.times.clone(),
        values: DVector::from_column_slice(&series.values),
        factor: NoisyKernel::new(&k, noise_var)?,
        kernel,
    })
}

/// Shared-covariance Gaussian mixture with circular shifts: flat prior on the
/// means, noise absorbed into a free covariance, FFT shift search.
pub fn phased_gmm_fit(dataset: &Dataset, k: usize, config: &FitConfig) -> Result<(GmtModel, FitReport)> {
    if !dataset.is_synchronous() {
        return Err(Error::Contract("phased GMM needs synchronously sampled tasks".into()));
    }
    let ds = match dataset.lattice() {
        Some(_) => dataset.clone(),
        None => dataset.clone().with_lattice(dataset.grid().len())?,
    };
    let r = ds.lattice().expect("set above");
    let support: Vec<f64> = (0..r).map(|i| crate::data::lattice_point(i, r)).collect();
    let mut cfg = config.clone();
    cfg.flat_prior = true;
    cfg.absorbed_noise = true;
    cfg.group_kernel = KernelModel::Fixed(FixedKernel::identity(support));
    let (out, report) = fit_full(&ds, k, &cfg, KernelMode::Nonparametric, &RunOptions::default(), None)?;
    Ok((out.model, report))
}

/// Rotates a uniformly sampled series so the maximum-mean circular window
/// (length `round(window_fraction * n)`, at least 1) starts at index 0.
/// Returns the rotated series and the start index that was moved to 0.
pub fn universal_phasing(values: &[f64], window_fraction: f64) -> (Vec<f64>, usize) {
    let n = values.len();
    if n == 0 {
        return (Vec::new(), 0);
    }
    let w = ((window_fraction * n as f64).round() as usize).clamp(1, n);
    let sum_at = |i: usize| (0..w).map(|d| values[(i + d) % n]).sum::<f64>();
    let mut best = 0;
    let mut best_sum = sum_at(0);
    for i in 1..n {
        let s = sum_at(i);
        if s > best_sum {
            best_sum = s;
            best = i;
        }
    }
    (circular_shift(values, -(best as i64)), best)
}

/// Responsibilities clamped to known labels, one-hot.
pub fn one_hot(labels: &[usize], k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(labels.len(), k);
    for (j, &z) in labels.iter().enumerate() {
        m[(j, z)] = 1.0;
    }
    m
}

/// Fits with responsibilities held at the given labels.
pub fn fit_clamped(dataset: &Dataset, labels: &[usize], k: usize, config: &FitConfig, mode: KernelMode) -> Result<(GmtModel, FitReport)> {
    let resp = one_hot(labels, k);
    let (out, report) = fit_full(dataset, k, config, mode, &RunOptions { clamp_resp: true }, Some(&resp))?;
    Ok((out.model, report))
}
