use std::path::Path;
use std::process::{Command, Output};

use cb2m_core::calibration::{CalibrationReport, GeneralizationCalibration};
use cb2m_core::harness::{read_csv, ExperimentName};
use cb2m_core::memory::TwofoldMemory;
use cb2m_core::model::CbmModel;
use cb2m_service::ServiceConfig;

fn cb2m(dir: &Path, args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cb2m"));
    cmd.current_dir(dir).args(args).env_remove("CB2M_SEED");
    if let Some(s) = seed {
        cmd.env("CB2M_SEED", s);
    }
    cmd.output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_SPEC: &str = r#"{"regime":{"kind":"balanced"},"n_train":1200,"n_val":300,"n_test":300,"n_features":16,"noise_sigma":0.35,"seed":0}"#;

#[test]
fn data_train_calibrate_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("spec.json"), SMALL_SPEC).unwrap();

    ok(cb2m(dir, &["gen-data", "--spec", "spec.json", "--out", "d"], Some("5")));
    let meta: serde_json::Value = read(&dir.join("d/spec.json"));
    assert_eq!(meta["seed"], 5);

    ok(cb2m(dir, &["train", "--data", "d", "--out", "m"], None));
    let model = CbmModel::load(&dir.join("m/model.json")).unwrap();

    let early = cb2m(dir, &["calibrate", "--mode", "generalize", "--model", "m", "--data", "d"], None);
    assert!(!early.status.success());

    ok(cb2m(dir, &["calibrate", "--mode", "detect", "--model", "m/model.json", "--data", "d"], None));
    let detect: CalibrationReport = read(&dir.join("m/calibration_detect.json"));
    detect.chosen.validate().unwrap();
    assert_eq!(detect.table.len(), 5 * 3 * 6);

    ok(cb2m(dir, &["calibrate", "--mode", "generalize", "--model", "m", "--data", "d"], None));
    let gen: GeneralizationCalibration = read(&dir.join("m/calibration_generalize.json"));
    assert!(gen.accuracy >= gen.base_accuracy);
    let mem = TwofoldMemory::load(&dir.join("m/memory.jsonl")).unwrap();
    assert_eq!(mem.width(), model.bottleneck.hidden_width());
    assert_eq!(mem.n_interventions(), mem.len());

    let service: ServiceConfig = read(&dir.join("m/service.json"));
    assert_eq!(service.detection, detect.chosen);
    assert_eq!(service.generalization_t_d, gen.t_d);
    service.validate().unwrap();
}

#[test]
fn run_writes_tables_for_the_overridden_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("spec.json"), SMALL_SPEC.replace("balanced", "shifted")).unwrap();
    let stdout = ok(cb2m(
        dir,
        &["run", "--experiment", "distribution_shift", "--seeds", "0..4", "--out", "r", "--dataset", "spec.json"],
        Some("3"),
    ));
    assert!(stdout.contains("distribution_shift"));
    let rows = read_csv(&dir.join("r/distribution_shift.csv")).unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.seed == 3 && r.experiment == ExperimentName::DistributionShift));
    assert!(dir.join("r/distribution_shift.json").exists());
}

#[test]
fn bad_arguments_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for args in [
        &["run", "--experiment", "nope", "--seeds", "0"][..],
        &["run", "--experiment", "detection", "--seeds", "3..1"],
        &["calibrate", "--mode", "sideways", "--model", "m", "--data", "d"],
        &["serve"],
    ] {
        assert!(!cb2m(dir, args, None).status.success(), "{args:?}");
    }
    assert!(!cb2m(dir, &["gen-data", "--out", "d"], Some("x")).status.success());
}
