//! Synthetic data generators, metrics and benchmark drivers.
//!
//! The regression generator lays a `grid_size`-point grid over `domain` and
//! maps grid point `i` to phase `i / grid_size`, so kernel denominators given
//! in domain units are divided by the squared phase scale.

use nalgebra::DVector;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{lattice_point, Dataset, TaskSeries};
use crate::dp::{fit_dp, DpConfig};
use crate::em::{fit, FitConfig, KernelMode};
use crate::error::{Error, Result};
use crate::inference::{class_discovery, classify, fit_clamped, fit_single_task, predict_task, train_classifier, Clusterer, LabelModelSpec};
use crate::kernel::{KernelModel, RbfParams};
use crate::linalg::cholesky_jittered;
use crate::shift::circular_shift;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_groups: usize,
    pub group_amplitude: f64,
    /// Group kernel denominator in domain units.
    pub group_denom: f64,
    pub indiv_amplitude: f64,
    pub indiv_denom: f64,
    pub grid_size: usize,
    pub domain: (f64, f64),
    pub n_tasks: usize,
    pub samples_per_task: usize,
    pub noise_var: f64,
    pub mixing: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_groups: 3,
            group_amplitude: 1.0,
            group_denom: 25.0,
            indiv_amplitude: 0.2,
            indiv_denom: 16.0,
            grid_size: 100,
            domain: (-50.0, 50.0),
            n_tasks: 50,
            samples_per_task: 5,
            noise_var: 0.01,
            mixing: vec![1.0 / 3.0; 3],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mixing.len() != self.n_groups || self.n_groups == 0 {
            return Err(Error::Config("mixing must have one entry per group".into()));
        }
        let total: f64 = self.mixing.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.mixing.iter().any(|&p| p < 0.0) {
            return Err(Error::Config("mixing must be a probability vector".into()));
        }
        if self.samples_per_task == 0 || self.samples_per_task > self.grid_size {
            return Err(Error::Config("samples per task must be in 1..=grid size".into()));
        }
        if self.grid_size < 2 || self.domain.1 <= self.domain.0 {
            return Err(Error::Config("grid needs at least two points on a proper interval".into()));
        }
        Ok(())
    }

    /// Domain units per unit of phase.
    pub fn phase_scale(&self) -> f64 {
        let g = self.grid_size as f64;
        (self.domain.1 - self.domain.0) * g / (g - 1.0)
    }

    /// Grid coordinates in domain units.
    pub fn domain_grid(&self) -> Vec<f64> {
        let step = (self.domain.1 - self.domain.0) / (self.grid_size - 1) as f64;
        (0..self.grid_size).map(|i| self.domain.0 + i as f64 * step).collect()
    }

    pub fn phase_grid(&self) -> Vec<f64> {
        (0..self.grid_size).map(|i| lattice_point(i, self.grid_size)).collect()
    }

    pub fn group_kernel(&self) -> RbfParams {
        RbfParams {
            amplitude: self.group_amplitude,
            denom: self.group_denom / self.phase_scale().powi(2),
        }
    }

    pub fn indiv_kernel(&self) -> RbfParams {
        RbfParams {
            amplitude: self.indiv_amplitude,
            denom: self.indiv_denom / self.phase_scale().powi(2),
        }
    }
}

/// Draw from `N(0, K(times))`.
pub fn sample_gp<R: Rng + ?Sized>(cov: &KernelModel, times: &[f64], rng: &mut R) -> Result<DVector<f64>> {
    if times.is_empty() {
        return Err(Error::Empty("times"));
    }
    let k = cov.entries(times)?;
    let z = DVector::from_fn(times.len(), |_, _| StandardNormal.sample(rng));
    if k.iter().all(|&x| x == 0.0) {
        return Ok(DVector::zeros(times.len()));
    }
    let f = cholesky_jittered(&k)?;
    Ok(f.chol.l() * z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthData {
    pub dataset: Dataset,
    pub group_curves: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub indiv_curves: Vec<Vec<f64>>,
    /// Noise-free task functions on the grid.
    pub truth: Vec<Vec<f64>>,
}

pub fn generate_synthetic<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Result<SynthData> {
    config.validate()?;
    let phases = config.phase_grid();
    let gk = KernelModel::Rbf(config.group_kernel());
    let ik = KernelModel::Rbf(config.indiv_kernel());
    let group_curves: Vec<Vec<f64>> = (0..config.n_groups)
        .map(|_| sample_gp(&gk, &phases, rng).map(|v| v.as_slice().to_vec()))
        .collect::<Result<_>>()?;
    let pick = WeightedIndex::new(&config.mixing).map_err(|e| Error::Config(e.to_string()))?;
    let noise_sd = config.noise_var.sqrt();
    let mut labels = Vec::with_capacity(config.n_tasks);
    let mut indiv_curves = Vec::with_capacity(config.n_tasks);
    let mut truth = Vec::with_capacity(config.n_tasks);
    let mut tasks = Vec::with_capacity(config.n_tasks);
    for j in 0..config.n_tasks {
        let z = pick.sample(rng);
        let indiv = sample_gp(&ik, &phases, rng)?;
        let f: Vec<f64> = group_curves[z].iter().zip(indiv.iter()).map(|(a, b)| a + b).collect();
        let mut idx = sample(rng, config.grid_size, config.samples_per_task).into_vec();
        idx.sort_unstable();
        let times: Vec<f64> = idx.iter().map(|&i| phases[i]).collect();
        let values: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let e: f64 = StandardNormal.sample(rng);
                f[i] + noise_sd * e
            })
            .collect();
        tasks.push(TaskSeries {
            id: format!("task{j}"),
            times,
            values,
            label: Some(format!("g{z}")),
        });
        labels.push(z);
        indiv_curves.push(indiv.as_slice().to_vec());
        truth.push(f);
    }
    let dataset = Dataset::new(tasks, 1.0)?.with_lattice(config.grid_size)?;
    Ok(SynthData {
        dataset,
        group_curves,
        labels,
        indiv_curves,
        truth,
    })
}

/// Root-mean-square difference of two equally long vectors.
pub fn rmse(learned: &[f64], truth: &[f64]) -> Result<f64> {
    if learned.len() != truth.len() || learned.is_empty() {
        return Err(Error::Dimension(format!(
            "rmse of lengths {} and {}",
            learned.len(),
            truth.len()
        )));
    }
    let s: f64 = learned.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((s / learned.len() as f64).sqrt())
}

/// Mean of per-task RMSEs.
pub fn dataset_rmse(learned: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if learned.len() != truth.len() || learned.is_empty() {
        return Err(Error::Dimension("dataset rmse task counts".into()));
    }
    let total: f64 = learned
        .iter()
        .zip(truth)
        .map(|(l, t)| rmse(l, t))
        .sum::<Result<f64>>()?;
    Ok(total / learned.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Independent GP per task.
    St,
    /// One cluster.
    Scmt,
    Gmt,
    DpGmt,
    /// Clustered with the true labels.
    Cgmt,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::St, Method::Scmt, Method::Gmt, Method::DpGmt, Method::Cgmt];

    pub fn name(&self) -> &'static str {
        match self {
            Method::St => "ST",
            Method::Scmt => "SCMT",
            Method::Gmt => "GMT",
            Method::DpGmt => "DP-GMT",
            Method::Cgmt => "CGMT",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionSettings {
    pub sample_sizes: Vec<usize>,
    pub trials: usize,
    pub methods: Vec<Method>,
    pub synth: SynthConfig,
    pub fit: FitConfig,
    pub truncation: usize,
    pub concentration: f64,
}

impl Default for RegressionSettings {
    fn default() -> Self {
        RegressionSettings {
            sample_sizes: vec![5, 10, 20, 50],
            trials: 10,
            methods: Method::ALL.to_vec(),
            synth: SynthConfig::default(),
            fit: FitConfig::default(),
            truncation: 10,
            concentration: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionRow {
    pub samples_per_task: usize,
    pub trial: usize,
    pub seed: u64,
    pub method: Method,
    pub rmse: f64,
}

/// Seed of one trial at one sample size.
pub fn trial_seed(base: u64, samples: usize, trial: usize) -> u64 {
    base.wrapping_mul(1_000_003)
        .wrapping_add((samples as u64) << 20)
        .wrapping_add(trial as u64)
}

/// Dataset RMSE of each method on one synthetic draw.
pub fn regression_trial(data: &SynthData, synth: &SynthConfig, settings: &RegressionSettings) -> Result<Vec<(Method, f64)>> {
    let grid = synth.phase_grid();
    let ds = &data.dataset;
    let mut fc = settings.fit.clone();
    fc.group_kernel = KernelModel::Rbf(synth.group_kernel());
    fc.shift_grid_size = 1;
    let curves_of = |model: &crate::em::GmtModel| -> Result<Vec<Vec<f64>>> {
        (0..ds.len()).map(|j| predict_task(model, ds, j, &grid)).collect()
    };
    settings
        .methods
        .iter()
        .map(|&m| {
            let learned: Vec<Vec<f64>> = match m {
                Method::St => ds
                    .tasks()
                    .iter()
                    .map(|t| fit_single_task(t, synth.group_kernel(), synth.noise_var)?.predict_many(&grid))
                    .collect::<Result<_>>()?,
                Method::Scmt => curves_of(&fit(ds, 1, &fc, KernelMode::Parametric)?.0)?,
                Method::Gmt => curves_of(&fit(ds, synth.n_groups, &fc, KernelMode::Parametric)?.0)?,
                Method::Cgmt => curves_of(&fit_clamped(ds, &data.labels, synth.n_groups, &fc, KernelMode::Parametric)?.0)?,
                Method::DpGmt => {
                    let dc = DpConfig {
                        concentration: settings.concentration,
                        truncation: settings.truncation,
                        fit: fc.clone(),
                    };
                    curves_of(&fit_dp(ds, &dc, KernelMode::Parametric)?.0)?
                }
            };
            Ok((m, dataset_rmse(&learned, &data.truth)?))
        })
        .collect()
}

/// Runs every (sample size, trial) pair; rows are ordered by size, trial, method.
pub fn run_regression_benchmark(settings: &RegressionSettings) -> Result<Vec<RegressionRow>> {
    let jobs: Vec<(usize, usize)> = settings
        .sample_sizes
        .iter()
        .flat_map(|&n| (0..settings.trials).map(move |t| (n, t)))
        .collect();
    let rows: Vec<Result<Vec<RegressionRow>>> = jobs
        .par_iter()
        .map(|&(n, trial)| {
            let seed = trial_seed(settings.synth.seed, n, trial);
            let synth = SynthConfig {
                samples_per_task: n,
                seed,
                ..settings.synth.clone()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = generate_synthetic(&synth, &mut rng)?;
            let mut s = settings.clone();
            s.fit.seed = seed;
            Ok(regression_trial(&data, &synth, &s)?
                .into_iter()
                .map(|(method, rmse)| RegressionRow {
                    samples_per_task: n,
                    trial,
                    seed,
                    method,
                    rmse,
                })
                .collect())
        })
        .collect();
    let mut out = Vec::new();
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

/// Median of a slice (mean of the middle pair for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBenchConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub samples_per_task: usize,
    pub resolution: usize,
    pub noise_var: f64,
    pub indiv_amplitude: f64,
    pub indiv_denom: f64,
    pub seed: u64,
}

impl Default for ClassBenchConfig {
    fn default() -> Self {
        ClassBenchConfig {
            n_train: 300,
            n_test: 300,
            samples_per_task: 15,
            resolution: 100,
            noise_var: 0.01,
            indiv_amplitude: 0.01,
            indiv_denom: 0.01,
            seed: 0,
        }
    }
}

fn circular_gauss(x: f64, center: f64, width: f64) -> f64 {
    let d = (x - center).rem_euclid(1.0);
    let d = d.min(1.0 - d);
    (-0.5 * (d / width).powi(2)).exp()
}

fn standardize(v: Vec<f64>) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    v.into_iter().map(|x| (x - mean) / sd).collect()
}

/// Three periodic light-curve-like shapes on `resolution` phases, standardized:
/// a sinusoid, a fast-rise slow-decline sawtooth and a double-dip eclipse.
pub fn class_shapes(resolution: usize) -> Vec<(String, Vec<f64>)> {
    let xs: Vec<f64> = (0..resolution).map(|i| lattice_point(i, resolution)).collect();
    let sine = xs.iter().map(|&x| (2.0 * std::f64::consts::PI * x).sin()).collect();
    let rise = 0.15;
    let saw = xs
        .iter()
        .map(|&x| if x < rise { -1.0 + 2.0 * x / rise } else { 1.0 - 2.0 * (x - rise) / (1.0 - rise) })
        .collect();
    let eclipse = xs
        .iter()
        .map(|&x| -1.2 * circular_gauss(x, 0.25, 0.04) - 0.6 * circular_gauss(x, 0.75, 0.04))
        .collect();
    vec![
        ("sinusoid".to_string(), standardize(sine)),
        ("sawtooth".to_string(), standardize(saw)),
        ("eclipse".to_string(), standardize(eclipse)),
    ]
}

/// Labeled train and test sets of randomly shifted class shapes on a lattice.
pub fn generate_classification<R: Rng + ?Sized>(config: &ClassBenchConfig, rng: &mut R) -> Result<(Dataset, Dataset)> {
    if config.samples_per_task == 0 || config.samples_per_task > config.resolution {
        return Err(Error::Config("samples per task must be in 1..=resolution".into()));
    }
    let shapes = class_shapes(config.resolution);
    let phases: Vec<f64> = (0..config.resolution).map(|i| lattice_point(i, config.resolution)).collect();
    let ik = KernelModel::Rbf(RbfParams::new(config.indiv_amplitude.max(f64::MIN_POSITIVE), config.indiv_denom)?);
    let sd = config.noise_var.sqrt();
    let mut make = |count: usize, prefix: &str| -> Result<Dataset> {
        let mut tasks = Vec::with_capacity(count);
        for j in 0..count {
            let c = j % shapes.len();
            let tau = rng.random_range(0..config.resolution);
            let base = circular_shift(&shapes[c].1, tau as i64);
            let indiv = if config.indiv_amplitude > 0.0 {
                sample_gp(&ik, &phases, rng)?
            } else {
                DVector::zeros(config.resolution)
            };
            let mut idx = sample(rng, config.resolution, config.samples_per_task).into_vec();
            idx.sort_unstable();
            let values = idx
                .iter()
                .map(|&i| {
                    let e: f64 = StandardNormal.sample(rng);
                    base[i] + indiv[i] + sd * e
                })
                .collect();
            tasks.push(TaskSeries {
                id: format!("{prefix}{j}"),
                times: idx.iter().map(|&i| phases[i]).collect(),
                values,
                label: Some(shapes[c].0.clone()),
            });
        }
        Dataset::new(tasks, 1.0)?.with_lattice(config.resolution)
    };
    let train = make(config.n_train, "train")?;
    let test = make(config.n_test, "test")?;
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationOutcome {
    pub accuracy: f64,
    pub discovery_accuracy: Option<f64>,
}

/// Trains per-label models on `train`, classifies `test`, and optionally runs
/// class discovery with `discovery_k` clusters.
pub fn run_classification_benchmark(
    train: &Dataset,
    test: &Dataset,
    per_label: &LabelModelSpec,
    discovery: Option<&Clusterer>,
) -> Result<ClassificationOutcome> {
    let clf = train_classifier(train, per_label, KernelMode::Parametric)?;
    let hits: Vec<Result<bool>> = test
        .tasks()
        .par_iter()
        .map(|t| Ok(Some(classify(&clf, t)?.0) == t.label))
        .collect();
    let mut correct = 0;
    for h in hits {
        if h? {
            correct += 1;
        }
    }
    let discovery_accuracy = match discovery {
        Some(c) => Some(class_discovery(train, test, c, KernelMode::Parametric)?.accuracy),
        None => None,
    };
    Ok(ClassificationOutcome {
        accuracy: correct as f64 / test.len().max(1) as f64,
        discovery_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints_and_scale() {
        let c = SynthConfig::default();
        let g = c.domain_grid();
        assert_eq!(g[0], -50.0);
        assert!((g[99] - 50.0).abs() < 1e-12);
        // one grid step is 100/99 domain units and 1/100 of phase
        assert!((c.phase_scale() * 0.01 - 100.0 / 99.0).abs() < 1e-12);
        let gk = c.group_kernel();
        let dx = g[3] - g[0];
        let direct = (-dx * dx / 25.0).exp();
        assert!((gk.eval(0.0, 0.03) - direct).abs() < 1e-12);
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[1.5, 2.5], &[1.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        let a = vec![vec![1.0, 2.0], vec![0.0, 0.0]];
        let b = vec![vec![0.0, 2.0], vec![1.0, 1.0]];
        let ar: Vec<_> = a.iter().rev().cloned().collect();
        let br: Vec<_> = b.iter().rev().cloned().collect();
        assert_eq!(dataset_rmse(&a, &b).unwrap(), dataset_rmse(&ar, &br).unwrap());
    }

    #[test]
    fn sample_gp_determinism_and_zero() {
        let k = KernelModel::Rbf(RbfParams::new(1.0, 0.1).unwrap());
        let t = [0.1, 0.5, 0.9];
        let a = sample_gp(&k, &t, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_gp(&k, &t, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        let z = KernelModel::Fixed(crate::kernel::FixedKernel {
            points: t.to_vec(),
            matrix: nalgebra::DMatrix::zeros(3, 3),
        });
        assert_eq!(sample_gp(&z, &t, &mut ChaCha8Rng::seed_from_u64(1)).unwrap(), DVector::zeros(3));
    }

    #[test]
    fn sample_gp_covariance_monte_carlo() {
        let p = RbfParams::new(1.0, 0.1).unwrap();
        let k = KernelModel::Rbf(p);
        let t = [0.2, 0.4];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut acc = [0.0; 3];
        let n = 10_000;
        for _ in 0..n {
            let v = sample_gp(&k, &t, &mut rng).unwrap();
            acc[0] += v[0] * v[0];
            acc[1] += v[0] * v[1];
            acc[2] += v[1] * v[1];
        }
        let c = acc.map(|a| a / n as f64);
        assert!((c[0] - 1.0).abs() < 0.05);
        assert!((c[1] - p.eval(0.2, 0.4)).abs() < 0.05);
        assert!((c[2] - 1.0).abs() < 0.05);
    }

    #[test]
    fn generator_examples() {
        let c = SynthConfig {
            samples_per_task: 100,
            n_tasks: 3,
            ..SynthConfig::default()
        };
        let d = generate_synthetic(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(d.dataset.tasks().iter().all(|t| t.len() == 100));
        let again = generate_synthetic(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(d, again);

        // label frequencies within 3 binomial standard deviations
        let c = SynthConfig {
            n_tasks: 1000,
            samples_per_task: 1,
            ..SynthConfig::default()
        };
        let d = generate_synthetic(&c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let sd = (1000.0f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for g in 0..3 {
            let n = d.labels.iter().filter(|&&z| z == g).count() as f64;
            assert!((n - 1000.0 / 3.0).abs() < 3.0 * sd);
        }
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
