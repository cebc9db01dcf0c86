//! Shared fixtures for the benchmarks.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gmtgp::em::{FitConfig, GmtModel, KernelMode};
use gmtgp::kernel::KernelModel;
use gmtgp::shift::circular_shift;
use gmtgp::synth::{generate_synthetic, SynthConfig, SynthData};

pub fn regression_data(n_tasks: usize, samples: usize, seed: u64) -> (SynthConfig, SynthData) {
    let sc = SynthConfig {
        n_tasks,
        samples_per_task: samples,
        seed,
        ..Default::default()
    };
    let data = generate_synthetic(&sc, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid synthetic config");
    (sc, data)
}

pub fn fit_config(sc: &SynthConfig, restarts: usize) -> FitConfig {
    FitConfig {
        restarts,
        group_kernel: KernelModel::Rbf(sc.group_kernel()),
        ..Default::default()
    }
}

/// A fitted 3-cluster model on the standard synthetic data.
pub fn fitted_model(samples: usize) -> (SynthData, GmtModel) {
    let (sc, data) = regression_data(50, samples, 1);
    let (model, _) = gmtgp::fit(&data.dataset, 3, &fit_config(&sc, 1), KernelMode::Parametric).expect("fit succeeds");
    (data, model)
}

/// A random series and a noisy circular shift of it.
pub fn shift_pair(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let v = circular_shift(&u, (n / 3) as i64)
        .into_iter()
        .map(|x| x + 0.01 * (rng.random::<f64>() - 0.5))
        .collect();
    (u, v)
}

/// All circular shifts of `u`, as candidate predictions for a brute-force search.
pub fn shifted_candidates(u: &[f64]) -> Vec<DVector<f64>> {
    (0..u.len())
        .map(|t| DVector::from_vec(circular_shift(u, t as i64)))
        .collect()
}
