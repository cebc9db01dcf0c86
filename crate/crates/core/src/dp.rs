//! Truncated stick-breaking (Dirichlet-process) extension fitted by variational EM.
//!
//! The cluster prior is replaced by stick weights `v_t ~ Beta(1, alpha)` with
//! `v_T = 1`. Variational posteriors over `v` are Beta; the model parameters
//! reuse the EM M-step without the mixture update.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::data::Dataset;
use crate::em::{
    e_step_inner, initial_model, initialize, m_step, restart_rng, EStepState, FitConfig, FitReport,
    GmtModel, KernelMode, Layout, MStepPlan, RestartSummary, RunOutput, MONOTONE_SLACK,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub concentration: f64,
    pub truncation: usize,
    pub fit: FitConfig,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            concentration: 1.0,
            truncation: 10,
            fit: FitConfig::default(),
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.truncation < 2 {
            return Err(Error::Config("truncation must be at least 2".into()));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::Config("concentration must be positive".into()));
        }
        self.fit.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpState {
    /// Beta parameters `(gamma_t1, gamma_t2)` of the first `T - 1` sticks.
    pub beta_params: Vec<(f64, f64)>,
    /// Variational responsibilities, tasks x T.
    pub resp: DMatrix<f64>,
    /// `(E log v_t, E log(1 - v_t))` for all `T` components; the last is `(0, -inf)`.
    /// Not serialized; rebuilt from `beta_params`.
    #[serde(skip)]
    pub expected_log_sticks: Vec<(f64, f64)>,
    pub concentration: f64,
}

impl DpState {
    pub fn truncation(&self) -> usize {
        self.resp.ncols()
    }

    /// Expected mixture weights `E[v_t] prod_{i<t} E[1 - v_i]`.
    pub fn expected_weights(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.truncation());
        let mut rest = 1.0;
        for &(a, b) in &self.beta_params {
            let ev = a / (a + b);
            out.push(rest * ev);
            rest *= 1.0 - ev;
        }
        out.push(rest);
        out
    }
}

/// `pi_i = v_i prod_{j<i} (1 - v_j)`; requires the last stick to be 1.
pub fn stick_breaking_weights(v: &[f64]) -> Result<Vec<f64>> {
    match v.last() {
        Some(&last) if last == 1.0 => {}
        _ => return Err(Error::Contract("the last stick must equal 1".into())),
    }
    if v.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Contract("sticks must lie in [0, 1]".into()));
    }
    let mut rest = 1.0;
    Ok(v
        .iter()
        .map(|&vi| {
            let p = vi * rest;
            rest *= 1.0 - vi;
            p
        })
        .collect())
}

/// `gamma_t1 = 1 + sum_j q_jt`, `gamma_t2 = alpha + sum_j sum_{l>t} q_jl` for `t < T`.
pub fn update_beta_params(resp: &DMatrix<f64>, concentration: f64) -> Vec<(f64, f64)> {
    let t = resp.ncols();
    let mass: Vec<f64> = (0..t).map(|c| resp.column(c).sum()).collect();
    let mut tail = vec![0.0; t + 1];
    for c in (0..t).rev() {
        tail[c] = tail[c + 1] + mass[c];
    }
    (0..t.saturating_sub(1))
        .map(|c| (1.0 + mass[c], concentration + tail[c + 1]))
        .collect()
}

/// Digamma expectations of `log v_t` and `log(1 - v_t)`, with the fixed last stick appended.
pub fn expected_log_sticks(beta_params: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = beta_params
        .iter()
        .map(|&(a, b)| {
            let s = digamma(a + b);
            (digamma(a) - s, digamma(b) - s)
        })
        .collect();
    out.push((0.0, f64::NEG_INFINITY));
    out
}

/// `h_t = E log v_t + sum_{i<t} E log(1 - v_i)`.
pub fn log_prior_weights(sticks: &[(f64, f64)]) -> Vec<f64> {
    let mut acc = 0.0;
    sticks
        .iter()
        .map(|&(lv, l1v)| {
            let h = lv + acc;
            acc += l1v;
            h
        })
        .collect()
}

/// Variational E-step: responsibilities from stick expectations and component densities.
pub fn variational_e_step(model: &GmtModel, dataset: &Dataset, state: &DpState) -> Result<EStepState> {
    let h = log_prior_weights(&state.expected_log_sticks);
    crate::em::e_step_weighted(model, dataset, &h)
}

/// Components carrying more than `threshold_fraction` of the tasks' responsibility mass.
pub fn occupied_components(state: &DpState, threshold_fraction: f64) -> usize {
    let m = state.resp.nrows() as f64;
    (0..state.resp.ncols())
        .filter(|&c| state.resp.column(c).sum() > threshold_fraction * m)
        .count()
}

fn beta_entropy(a: f64, b: f64) -> f64 {
    let ln_b = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    ln_b - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b) + (a + b - 2.0) * digamma(a + b)
}

/// Evidence lower bound with the individual effects integrated out exactly.
pub fn surrogate_objective(model: &GmtModel, estep: &EStepState, beta_params: &[(f64, f64)], concentration: f64) -> f64 {
    let sticks = expected_log_sticks(beta_params);
    let h = log_prior_weights(&sticks);
    let mut total = 0.0;
    for j in 0..estep.resp.nrows() {
        for t in 0..estep.resp.ncols() {
            let q = estep.resp[(j, t)];
            if q > 0.0 {
                total += q * (h[t] + estep.log_dens[(j, t)] - q.ln());
            }
        }
    }
    for (&(a, b), &(_, l1v)) in beta_params.iter().zip(&sticks) {
        total += concentration.ln() + (concentration - 1.0) * l1v + beta_entropy(a, b);
    }
    total - model.penalty()
}

struct DpRun {
    out: RunOutput,
    state: DpState,
}

fn run_dp(
    mut model: GmtModel,
    dataset: &Dataset,
    init_resp: DMatrix<f64>,
    config: &DpConfig,
    mode: KernelMode,
    restart: usize,
) -> Result<DpRun> {
    let fc = &config.fit;
    let layout = Layout::new(dataset, &model);
    let init = EStepState::from_assignments(dataset, init_resp.clone());
    m_step(
        &mut model,
        &init,
        dataset,
        &layout,
        fc,
        mode,
        MStepPlan {
            mixture: false,
            noise_and_kernel: false,
            coef_first: true,
            fixed_weights: true,
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
    let mut q = init_resp;
    let mut prev: Option<f64> = None;
    let (estep, beta) = loop {
        let beta = update_beta_params(&q, config.concentration);
        let h = log_prior_weights(&expected_log_sticks(&beta));
        let estep = e_step_inner(&model, dataset, &layout, &h)?;
        let objective = surrogate_objective(&model, &estep, &beta, config.concentration);
        if !objective.is_finite() {
            return Err(Error::NonFinite("variational objective"));
        }
        let it = summary.objective_trace.len();
        summary.objective_trace.push(objective);
        if let Some(p) = prev {
            if objective < p - MONOTONE_SLACK && fc.strict_monotone {
                return Err(Error::Monotonicity {
                    iteration: it,
                    before: p,
                    after: objective,
                });
            }
            if (objective - p).abs() < fc.tol {
                summary.converged = true;
                break (estep, beta);
            }
        }
        if summary.iterations >= fc.max_iter {
            break (estep, beta);
        }
        prev = Some(objective);
        m_step(
            &mut model,
            &estep,
            dataset,
            &layout,
            fc,
            mode,
            MStepPlan {
                mixture: false,
                noise_and_kernel: true,
                coef_first: false,
                fixed_weights: true,
            },
        )?;
        q = estep.resp.clone();
        summary.iterations += 1;
    };
    summary.final_objective = summary.objective_trace.last().copied();
    let state = DpState {
        expected_log_sticks: expected_log_sticks(&beta),
        beta_params: beta,
        resp: estep.resp.clone(),
        concentration: config.concentration,
    };
    model.mixture = state.expected_weights();
    Ok(DpRun {
        out: RunOutput {
            model,
            estep,
            summary,
        },
        state,
    })
}

/// Variational EM for the truncated DP model; keeps the restart with the best bound.
pub fn fit_dp(dataset: &Dataset, config: &DpConfig, mode: KernelMode) -> Result<(GmtModel, DpState, FitReport)> {
    let (out, state, report) = fit_dp_full(dataset, config, mode)?;
    Ok((out.model, state, report))
}

pub fn fit_dp_full(
    dataset: &Dataset,
    config: &DpConfig,
    mode: KernelMode,
) -> Result<(RunOutput, DpState, FitReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let t = config.truncation;
    let base = initial_model(dataset, t, &config.fit, mode)?;
    let runs: Vec<Result<DpRun>> = (0..config.fit.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = restart_rng(config.fit.seed, r);
            let mut model = base.clone();
            let resp = initialize(&mut model, dataset, &config.fit, &mut rng)?;
            run_dp(model, dataset, resp, config, mode, r)
        })
        .collect();
    let mut states = Vec::new();
    let outs: Vec<Result<RunOutput>> = runs
        .into_iter()
        .map(|r| {
            r.map(|run| {
                states.push(Some(run.state));
                run.out
            })
            .inspect_err(|_| states.push(None))
        })
        .collect();
    let (best, report) = crate::em::pick_best(outs, t)?;
    let state = states[best.summary.restart]
        .take()
        .ok_or_else(|| Error::Contract("best restart lost its state".into()))?;
    Ok((best, state, report))
}
