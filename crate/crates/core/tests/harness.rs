use cb2m_core::datasets::{generate, load_dir, save_dir};
use cb2m_core::harness::{
    default_dataset, find_row, read_csv, run_experiment, summarize, write_results, ExperimentName, ExperimentSpec, Method,
    ResultRow, Split,
};
use cb2m_core::metrics::MetricValue;

const SEEDS: [u64; 2] = [0, 1];

fn small_spec(name: ExperimentName) -> ExperimentSpec {
    let mut dataset = default_dataset(name);
    dataset.n_train = 2500;
    dataset.n_val = 500;
    dataset.n_test = 800;
    ExperimentSpec::new(name, SEEDS.to_vec(), "unused").with_dataset(dataset)
}

fn value(rows: &[ResultRow], seed: u64, split: Split, method: Method, metric: &str) -> f64 {
    match find_row(rows, seed, split, method, metric).map(|r| r.value) {
        Some(MetricValue::Value(v)) => v,
        other => panic!("{seed} {split:?} {method:?} {metric}: {other:?}"),
    }
}

#[test]
fn full_ablation_matches_generalization_and_splits_recombine() {
    let gen = run_experiment(&small_spec(ExperimentName::Generalization)).unwrap();
    let mut ablation_spec = small_spec(ExperimentName::MemoryAblation);
    ablation_spec.dataset = small_spec(ExperimentName::Generalization).dataset;
    let ablation = run_experiment(&ablation_spec).unwrap();

    for seed in SEEDS {
        for split in [Split::Identified, Split::Full] {
            let g = find_row(&gen, seed, split, Method::Cb2m, "class_accuracy").unwrap().value;
            let a = find_row(&ablation, seed, split, Method::Cb2m, "class_accuracy_f1").unwrap().value;
            assert_eq!(g, a, "seed {seed} {split:?}");
        }

        // Predictions outside the identified set are untouched, so the full-set
        // gain is the identified gain scaled by the identified share.
        let n = value(&gen, seed, Split::Full, Method::Cb2m, "n_samples");
        let n_id = value(&gen, seed, Split::Identified, Method::Cb2m, "n_samples");
        assert_eq!(n_id, value(&gen, seed, Split::Full, Method::Cb2m, "n_applied"));
        let full_gain = value(&gen, seed, Split::Full, Method::Cb2m, "class_accuracy")
            - value(&gen, seed, Split::Full, Method::Cbm, "class_accuracy");
        if n_id > 0.0 {
            let id_gain = value(&gen, seed, Split::Identified, Method::Cb2m, "class_accuracy")
                - value(&gen, seed, Split::Identified, Method::Cbm, "class_accuracy");
            assert!((full_gain - id_gain * n_id / n).abs() < 1e-9, "seed {seed}");
        } else {
            assert_eq!(full_gain, 0.0);
        }
    }
}

#[test]
fn ablation_memory_sizes_nest() {
    let rows = run_experiment(&small_spec(ExperimentName::MemoryAblation)).unwrap();
    for seed in SEEDS {
        let sizes: Vec<f64> = ["0.25", "0.5", "0.75", "1"]
            .iter()
            .map(|f| value(&rows, seed, Split::Full, Method::Cb2m, &format!("memory_size_f{f}")))
            .collect();
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]), "{sizes:?}");
    }
}

#[test]
fn result_tables_round_trip_and_summaries_agree() {
    let rows = run_experiment(&small_spec(ExperimentName::Detection)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = write_results(dir.path(), ExperimentName::Detection, &rows).unwrap();
    assert_eq!(read_csv(&files.csv).unwrap(), rows);
    let from_json: Vec<ResultRow> = serde_json::from_str(&std::fs::read_to_string(&files.json).unwrap()).unwrap();
    assert_eq!(from_json, rows);
    let header = std::fs::read_to_string(&files.csv).unwrap();
    assert!(header.starts_with("experiment,seed,split,method,metric,value\n"));

    for s in summarize(&rows) {
        let vals: Vec<f64> = SEEDS
            .iter()
            .filter_map(|&seed| match find_row(&rows, seed, s.split, s.method, &s.metric)?.value {
                MetricValue::Value(v) => Some(v),
                _ => None,
            })
            .collect();
        assert_eq!(s.n, vals.len());
        assert_eq!(s.n + s.n_missing, SEEDS.len());
        if vals.len() == 2 {
            let mean = (vals[0] + vals[1]) / 2.0;
            let std = (vals[0] - vals[1]).abs() / 2f64.sqrt();
            assert!((s.mean.unwrap() - mean).abs() < 1e-12);
            assert!((s.std.unwrap() - std).abs() < 1e-12, "{}", s.metric);
        }
    }
}

#[test]
fn detection_flag_counts_are_consistent() {
    let rows = run_experiment(&small_spec(ExperimentName::Detection)).unwrap();
    for seed in SEEDS {
        let n = value(&rows, seed, Split::Full, Method::Cbm, "n_samples");
        let mistakes = value(&rows, seed, Split::Full, Method::Cbm, "n_mistakes");
        for method in [Method::Random, Method::Softmax, Method::Cb2m, Method::Combined] {
            let flagged = value(&rows, seed, Split::Full, method, "n_flagged");
            let fpr = value(&rows, seed, Split::Full, method, "fpr");
            let fnr = value(&rows, seed, Split::Full, method, "fnr");
            // flagged = true positives + false positives
            let tp = mistakes * (1.0 - fnr);
            let fp = (n - mistakes) * fpr;
            assert!((tp + fp - flagged).abs() < 1e-6, "{method:?} seed {seed}");
        }
    }
}

#[test]
fn dataset_directories_round_trip() {
    for name in ExperimentName::ALL {
        let mut spec = default_dataset(name);
        spec.n_train = 300;
        spec.n_val = 50;
        spec.n_test = 60;
        let data = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dir(&data, dir.path()).unwrap();
        assert_eq!(load_dir(dir.path()).unwrap(), data, "{name}");
    }
}
