use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use gmtgp::data::lattice_point;
use gmtgp::dp::occupied_components;
use gmtgp::inference::{train_classifier, Clusterer, LabelModelSpec};
use gmtgp::io::{classifier_from_json, classifier_to_json, ingest_csv, model_from_json, model_to_json, write_csv};
use gmtgp::synth::{
    generate_classification, generate_synthetic, median, run_classification_benchmark, run_regression_benchmark,
    ClassBenchConfig, Method, RegressionSettings, SynthConfig,
};
use gmtgp::{
    bic_select, class_discovery, classify, fit, fit_dp, predict_task, snap_to_grid, Dataset, DpConfig, Error,
    FitConfig, KernelMode, KernelModel, RbfParams, TaskSeries,
};

use crate::manifest::RunManifest;
use crate::{
    BenchClassifyCmd, BenchRegressionCmd, ClassifyCmd, Command, DataArgs, DiscoverCmd, DpArgs, FitArgs, FitCmd,
    FitDpCmd, KernelArg, PredictCmd, SelectCmd, SynthArgs, SynthKind,
};

pub fn run(command: Command, out: Option<&Path>) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, out),
        Command::Fit(a) => fit_cmd(a, out),
        Command::FitDp(a) => fit_dp_cmd(a, out),
        Command::SelectK(a) => select_k(a, out),
        Command::Predict(a) => predict(a, out),
        Command::Classify(a) => classify_cmd(a, out),
        Command::Discover(a) => discover(a, out),
        Command::BenchRegression(a) => bench_regression(a, out),
        Command::BenchClassify(a) => bench_classify(a, out),
    }
}

fn snapshot(args: &impl Serialize) -> Value {
    serde_json::to_value(args).unwrap_or(Value::Null)
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn emit(out: Option<&Path>, mut manifest: RunManifest, result: impl Serialize) -> Result<()> {
    if let Some(p) = out {
        manifest.outputs.push(show(p));
    }
    manifest.finish();
    let text = serde_json::to_string_pretty(&json!({ "manifest": manifest, "result": result }))?;
    match out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => {
            let mut stdout = std::io::stdout().lock();
            if let Err(e) = writeln!(stdout, "{text}") {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
            }
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str, manifest: &mut RunManifest) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    manifest.outputs.push(show(path));
    Ok(())
}

fn write_dataset(path: &Path, ds: &Dataset, manifest: &mut RunManifest) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(ds, file)?;
    manifest.outputs.push(show(path));
    Ok(())
}

fn read_dataset(path: &Path, period: f64, lattice: Option<usize>, manifest: &mut RunManifest) -> Result<Dataset> {
    let ds = ingest_csv(path, period).with_context(|| format!("reading {}", path.display()))?;
    manifest.inputs.push(show(path));
    Ok(match lattice {
        Some(r) => snap_to_grid(&ds, r)?,
        None => ds,
    })
}

fn load(data: &DataArgs, manifest: &mut RunManifest) -> Result<Dataset> {
    read_dataset(&data.data, data.period, data.lattice, manifest)
}

fn fit_config(a: &FitArgs) -> Result<FitConfig> {
    Ok(FitConfig {
        restarts: a.restarts,
        tol: a.tol,
        max_iter: a.max_iter,
        seed: a.seed,
        shift_grid_size: a.shift_grid,
        group_kernel: KernelModel::Rbf(RbfParams::new(a.group_amplitude, a.group_denom)?),
        ..FitConfig::default()
    })
}

fn kernel_mode(a: &FitArgs, ds: &Dataset) -> Result<KernelMode> {
    match a.kernel {
        KernelArg::Rbf => Ok(KernelMode::Parametric),
        KernelArg::Empirical if ds.is_synchronous() => Ok(KernelMode::Nonparametric),
        KernelArg::Empirical => {
            Err(Error::Config("--kernel empirical needs synchronous data (all tasks on the same times)".into()).into())
        }
    }
}

fn dp_config(a: &DpArgs, fit: FitConfig) -> DpConfig {
    DpConfig {
        concentration: a.concentration,
        truncation: a.truncation,
        fit,
    }
}

fn synth(a: SynthArgs, out: Option<&Path>) -> Result<()> {
    let mut manifest = RunManifest::start("synth", snapshot(&a), a.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let result = match a.kind {
        SynthKind::Regression => {
            let config = SynthConfig {
                samples_per_task: a.n,
                n_tasks: a.tasks.unwrap_or(50),
                seed: a.seed,
                ..SynthConfig::default()
            };
            let data = generate_synthetic(&config, &mut rng)?;
            write_dataset(&a.csv, &data.dataset, &mut manifest)?;
            if let Some(p) = &a.truth {
                let grid = config.phase_grid();
                let tasks = data
                    .dataset
                    .tasks()
                    .iter()
                    .zip(&data.truth)
                    .map(|(t, f)| TaskSeries {
                        id: t.id.clone(),
                        times: grid.clone(),
                        values: f.clone(),
                        label: t.label.clone(),
                    })
                    .collect();
                write_dataset(p, &Dataset::new(tasks, 1.0)?, &mut manifest)?;
            }
            json!({
                "tasks": data.dataset.len(),
                "samples": data.dataset.total_samples(),
                "lattice": config.grid_size,
                "group_denom_phase": config.group_kernel().denom,
                "indiv_denom_phase": config.indiv_kernel().denom,
                "noise_var": config.noise_var,
                "labels": data.labels,
            })
        }
        SynthKind::Classification => {
            let n = a.tasks.unwrap_or(300);
            let config = ClassBenchConfig {
                n_train: n,
                n_test: n,
                samples_per_task: a.n,
                seed: a.seed,
                ..ClassBenchConfig::default()
            };
            let (train, test) = generate_classification(&config, &mut rng)?;
            write_dataset(&a.csv, &train, &mut manifest)?;
            if let Some(p) = &a.test_csv {
                write_dataset(p, &test, &mut manifest)?;
            }
            json!({
                "train_tasks": train.len(),
                "test_tasks": test.len(),
                "lattice": config.resolution,
                "labels": train.label_set(),
            })
        }
    };
    emit(out, manifest, result)
}

fn fit_cmd(a: FitCmd, out: Option<&Path>) -> Result<()> {
    let mut manifest = RunManifest::start("fit", snapshot(&a), a.fit.seed);
    let ds = load(&a.data, &mut manifest)?;
    let mode = kernel_mode(&a.fit, &ds)?;
    let (model, report) = fit(&ds, a.k, &fit_config(&a.fit)?, mode)?;
    if let Some(p) = &a.model {
        write_file(p, &model_to_json(&model, None, a.data.period)?, &mut manifest)?;
    }
    let result = json!({
        "report": report,
        "mixture": model.mixture,
        "noise_var": model.noise_var,
        "indiv_kernel": model.indiv_kernel,
    });
    emit(out, manifest, result)
}

fn fit_dp_cmd(a: FitDpCmd, out: Option<&Path>) -> Result<()> {
    let mut manifest = RunManifest::start("fit-dp", snapshot(&a), a.fit.seed);
    let ds = load(&a.data, &mut manifest)?;
    let mode = kernel_mode(&a.fit, &ds)?;
    let (model, state, report) = fit_dp(&ds, &dp_config(&a.dp, fit_config(&a.fit)?), mode)?;
    if let Some(p) = &a.model {
        write_file(p, &model_to_json(&model, Some(&state), a.data.period)?, &mut manifest)?;
    }
    let result = json!({
        "report": report,
        "occupied_components": occupied_components(&state, 0.01),
        "expected_weights": state.expected_weights(),
        "noise_var": model.noise_var,
        "indiv_kernel": model.indiv_kernel,
    });
    emit(out, manifest, result)
}

fn select_k(a: SelectCmd, out: Option<&Path>) -> Result<()> {
    let mut manifest = RunManifest::start("select-k", snapshot(&a), a.fit.seed);
    if a.k_min == 0 || a.k_min > a.k_max {
        return Err(Error::Config(format!("invalid k range {}..={}", a.k_min, a.k_max)).into());
    }
    let ds = load(&a.data, &mut manifest)?;
    let mode = kernel_mode(&a.fit, &ds)?;
    let ks: Vec<usize> = (a.k_min..=a.k_max).collect();
    let (k, scores, model, report) = bic_select(&ds, &ks, &fit_config(&a.fit)?, mode)?;
    if let Some(p) = &a.csv {
        let mut text = String::from("k,bic,log_likelihood,params\n");
        for s in &scores {
            text.push_str(&format!("{},{},{},{}\n", s.k, s.bic, s.log_likelihood, s.params));
        }
        write_file(p, &text, &mut manifest)?;
    }
    if let Some(p) = &a.model {
        write_file(p, &model_to_json(&model, None, a.data.period)?, &mut manifest)?;
    }
    emit(out, manifest, json!({ "k": k, "scores": scores, "report": report }))
}

fn predict(a: PredictCmd, out: Option<&Path>) -> Result<()> {
    let mut manifest = RunManifest::start("predict", snapshot(&a), 0);
    let text = fs::read_to_string(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    manifest.inputs.push(show(&a.model));
    let doc = model_from_json(&text)?;
    let ds = load(&a.data, &mut manifest)?;
    if a.points == 0 {
        return Err(Error::Config("--points must be positive".into()).into());
    }
    let query: Vec<f64> = (0..a.points).map(|i| lattice_point(i, a.points)).collect();
    let curves: Vec<Vec<f64>> = (0..ds.len())
        .into_par_iter()
        .map(|j| predict_task(&doc.model, &ds, j, &query))
        .collect::<gmtgp::Result<_>>()?;
    let tasks = ds
        .tasks()
        .iter()
        .zip(curves)
        .map(|(t, values)| TaskSeries {
            id: t.id.clone(),
            times: query.clone(),
            values,
            label: None,
        })
        .collect();
    write_dataset(&a.csv, &Dataset::new(tasks, a.data.period)?, &mut manifest)?;
    emit(out, manifest, json!({ "tasks": ds.len(), "points": a.points }))
}

#[derive(Serialize)]
struct Prediction {
    task_id: String,
    predicted: String,
    label: Option<String>,
    scores: Vec<f64>,
}

fn classify_cmd(a: ClassifyCmd, out: Option<&Path>) -> Result<()> {
    let mut manifest = RunManifest::start("classify", snapshot(&a), a.fit.seed);
    let classifier = match (&a.train, &a.classifier) {
        (_, Some(p)) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            manifest.inputs.push(show(p));
            classifier_from_json(&text)?.classifier
        }
        (Some(p), None) => {
            let train = read_dataset(p, a.period, a.lattice, &mut manifest)?;
            let mode = kernel_mode(&a.fit, &train)?;
            let spec = LabelModelSpec::Gmt {
                k: a.k,
                config: fit_config(&a.fit)?,
            };
            train_classifier(&train, &spec, mode)?
        }
        (None, None) => return Err(Error::Config("give --train or --classifier".into()).into()),
    };
    if let Some(p) = &a.save {
        write_file(p, &classifier_to_json(&classifier, a.period)?, &mut manifest)?;
    }
    let test = read_dataset(&a.test, a.period, a.lattice, &mut manifest)?;
    let preds: Vec<Prediction> = test
        .tasks()
        .par_iter()
        .map(|t| {
            let (predicted, scores) = classify(&classifier, t)?;
            Ok(Prediction {
                task_id: t.id.clone(),
                predicted,
                label: t.label.clone(),
                scores,
            })
        })
        .collect::<gmtgp::Result<_>>()?;
    let labeled: Vec<&Prediction> = preds.iter().filter(|p| p.label.is_some()).collect();
    let accuracy = (!labeled.is_empty()).then(|| {
        labeled.iter().filter(|p| p.label.as_deref() == Some(p.predicted.as_str())).count() as f64 / labeled.len() as f64
    });
    if let Some(p) = &a.csv {
        let mut text = String::from("task_id,predicted,label\n");
        for r in &preds {
            text.push_str(&format!("{},{},{}\n", r.task_id, r.predicted, r.label.as_deref().unwrap_or("")));
        }
        write_file(p, &text, &mut manifest)?;
    }
    let result = json!({
        "labels": classifier.labels,
        "accuracy": accuracy,
        "predictions": preds,
    });
    emit(out, manifest, result)
}

fn discover(a: DiscoverCmd, out: Option<&Path>) -> Result<()> {
    let mut manifest = RunManifest::start("discover", snapshot(&a), a.fit.seed);
    let reference = read_dataset(&a.reference, a.period, a.lattice, &mut manifest)?;
    let test = read_dataset(&a.test, a.period, a.lattice, &mut manifest)?;
    let mode = kernel_mode(&a.fit, &reference)?;
    let config = fit_config(&a.fit)?;
    let clusterer = if a.dp {
        Clusterer::Dp(dp_config(&a.dp_args, config))
    } else {
        Clusterer::Gmt { k: a.k, config }
    };
    let result = class_discovery(&reference, &test, &clusterer, mode)?;
    emit(out, manifest, result)
}

#[derive(Serialize)]
struct SummaryRow {
    samples_per_task: usize,
    method: &'static str,
    median_rmse: f64,
    trials: usize,
}

fn bench_regression(a: BenchRegressionCmd, out: Option<&Path>) -> Result<()> {
    let mut manifest = RunManifest::start("bench-regression", snapshot(&a), a.seed);
    let methods = a.methods.iter().map(|m| Method::parse(m)).collect::<gmtgp::Result<Vec<_>>>()?;
    let settings = RegressionSettings {
        sample_sizes: a.sizes.clone(),
        trials: a.trials,
        methods: methods.clone(),
        synth: SynthConfig {
            seed: a.seed,
            ..SynthConfig::default()
        },
        fit: FitConfig {
            restarts: a.restarts,
            tol: a.tol,
            max_iter: a.max_iter,
            ..FitConfig::default()
        },
        truncation: a.dp.truncation,
        concentration: a.dp.concentration,
    };
    let rows = run_regression_benchmark(&settings)?;
    let mut summary = Vec::new();
    for &n in &a.sizes {
        for &m in &methods {
            let xs: Vec<f64> = rows
                .iter()
                .filter(|r| r.samples_per_task == n && r.method == m)
                .map(|r| r.rmse)
                .collect();
            summary.push(SummaryRow {
                samples_per_task: n,
                method: m.name(),
                median_rmse: median(&xs),
                trials: xs.len(),
            });
        }
    }
    if let Some(p) = &a.csv {
        let mut text = String::from("samples_per_task,method,median_rmse\n");
        for s in &summary {
            text.push_str(&format!("{},{},{}\n", s.samples_per_task, s.method, s.median_rmse));
        }
        write_file(p, &text, &mut manifest)?;
    }
    emit(out, manifest, json!({ "summary": summary, "rows": rows }))
}

fn bench_classify(a: BenchClassifyCmd, out: Option<&Path>) -> Result<()> {
    let manifest = RunManifest::start("bench-classify", snapshot(&a), a.seed);
    let config = ClassBenchConfig {
        n_train: a.train_size,
        n_test: a.test_size,
        samples_per_task: a.n,
        seed: a.seed,
        ..ClassBenchConfig::default()
    };
    let (train, test) = generate_classification(&config, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let fc = FitConfig {
        restarts: a.restarts,
        tol: a.tol,
        max_iter: a.max_iter,
        seed: a.seed,
        shift_grid_size: a.shift_grid,
        ..FitConfig::default()
    };
    let spec = LabelModelSpec::Gmt {
        k: a.k,
        config: fc.clone(),
    };
    let discovery = (a.discover_k > 0).then(|| Clusterer::Gmt {
        k: a.discover_k,
        config: fc,
    });
    let outcome = run_classification_benchmark(&train, &test, &spec, discovery.as_ref())?;
    emit(out, manifest, outcome)
}
