use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gmtgp::em::{fit, FitConfig, KernelMode};
use gmtgp::inference::{classify, ClassifierModel};
use gmtgp::io::{classifier_from_json, classifier_to_json, export_csv, ingest_csv, model_from_json, model_to_json, read_csv, write_csv};
use gmtgp::kernel::KernelModel;
use gmtgp::synth::{generate_classification, generate_synthetic, ClassBenchConfig, SynthConfig};
use gmtgp::{Dataset, Error};

fn regression_data() -> (SynthConfig, Dataset) {
    let sc = SynthConfig {
        n_tasks: 12,
        samples_per_task: 8,
        ..Default::default()
    };
    let d = generate_synthetic(&sc, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    (sc, d.dataset)
}

#[test]
fn csv_export_then_ingest_is_exact() {
    let (_, ds) = regression_data();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    export_csv(&ds, &path).unwrap();
    // the generator snaps to a 100-point lattice, which CSV does not record
    assert_eq!(ingest_csv(&path, 1.0).unwrap().with_lattice(100).unwrap(), ds);

    let cc = ClassBenchConfig {
        n_train: 9,
        n_test: 1,
        ..Default::default()
    };
    let (train, _) = generate_classification(&cc, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut buf = Vec::new();
    write_csv(&train, &mut buf).unwrap();
    let back = read_csv(buf.as_slice(), 1.0).unwrap();
    assert_eq!(back.tasks(), train.tasks());
}

#[test]
fn csv_round_trip_with_a_power_of_two_period() {
    let text = "task_id,t,y\na,0.5,1.25\na,3.0,-2\nb,1.0,0.1\n";
    let ds = read_csv(text.as_bytes(), 4.0).unwrap();
    assert_eq!(ds.task(0).times, vec![0.125, 0.75]);
    let mut buf = Vec::new();
    write_csv(&ds, &mut buf).unwrap();
    assert_eq!(read_csv(buf.as_slice(), 4.0).unwrap(), ds);
}

#[test]
fn model_json_round_trip_and_version_check() {
    let (sc, ds) = regression_data();
    let fc = FitConfig {
        restarts: 1,
        group_kernel: KernelModel::Rbf(sc.group_kernel()),
        ..Default::default()
    };
    let (model, _) = fit(&ds, 2, &fc, KernelMode::Parametric).unwrap();
    let text = model_to_json(&model, None, 1.0).unwrap();
    let doc = model_from_json(&text).unwrap();
    assert_eq!(doc.model, model);
    assert!(doc.dp.is_none());

    let bad = text.replacen(&format!("\"version\": \"{}\"", gmtgp::io::MODEL_VERSION), "\"version\": \"0.0-unknown\"", 1);
    assert!(matches!(model_from_json(&bad), Err(Error::Version(v)) if v == "0.0-unknown"));
}

#[test]
fn classifier_round_trip_keeps_label_order() {
    let (sc, ds) = regression_data();
    let fc = FitConfig {
        restarts: 1,
        group_kernel: KernelModel::Rbf(sc.group_kernel()),
        ..Default::default()
    };
    let (model, _) = fit(&ds, 1, &fc, KernelMode::Parametric).unwrap();
    let labels = vec!["zeta".to_string(), "alpha".to_string(), "mid".to_string()];
    let clf = ClassifierModel::new(labels.clone(), vec![0.2, 0.5, 0.3], vec![model.clone(), model.clone(), model]).unwrap();
    let doc = classifier_from_json(&classifier_to_json(&clf, 1.0).unwrap()).unwrap();
    assert_eq!(doc.classifier.labels, labels);
    assert_eq!(doc.classifier, clf);
    // identical models: the prior decides
    let (label, _) = classify(&doc.classifier, ds.task(0)).unwrap();
    assert_eq!(label, "alpha");
}
