//! Implementation of the `cb2m` subcommands.
//!
//! A model directory holds `model.json` plus everything derived from it:
//! calibration reports, the intervention memory and a ready-to-serve config.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cb2m_core::calibration::{calibrate_detection, calibrate_generalization, CalibrationReport, DetectionGrid};
use cb2m_core::datasets::{generate, load_dir, save_dir, DatasetSpec, N_CLASSES};
use cb2m_core::harness::{run_and_write, summarize, ExperimentName, ExperimentSpec, ProtocolSplits};
use cb2m_core::memory::TwofoldMemory;
use cb2m_core::model::{CbmModel, CbmTrainConfig};
use cb2m_service::{AppState, ServiceConfig, StreamSplit};

/// Overrides every seed taken from specs or flags.
pub const SEED_ENV: &str = "CB2M_SEED";

pub const MODEL_FILE: &str = "model.json";
pub const DETECT_REPORT: &str = "calibration_detect.json";
pub const GENERALIZE_REPORT: &str = "calibration_generalize.json";
pub const MEMORY_FILE: &str = "memory.jsonl";
pub const SERVICE_CONFIG: &str = "service.json";

/// Seeds given on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

impl std::str::FromStr for SeedList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        parse_seeds(s).map(Self)
    }
}

/// Parses `a..b` (inclusive), `a..=b`, a comma list or a single seed.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let s = s.trim();
    let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("bad seed {t:?}: {e}"));
    if let Some((a, b)) = s.split_once("..") {
        let (lo, hi) = (num(a)?, num(b.strip_prefix('=').unwrap_or(b))?);
        if lo > hi {
            return Err(format!("empty seed range {s}"));
        }
        return Ok((lo..=hi).collect());
    }
    s.split(',').map(num).collect()
}

pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?}"))?)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e).context(SEED_ENV),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

/// Accepts either a model directory or the model file itself.
pub fn model_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MODEL_FILE)
    } else {
        path.to_path_buf()
    }
}

fn model_dir(path: &Path) -> PathBuf {
    let file = model_file(path);
    file.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn gen_data(spec: Option<&Path>, out: &Path) -> Result<()> {
    let mut spec: DatasetSpec = spec.map(read_json).transpose()?.unwrap_or_default();
    if let Some(seed) = seed_override()? {
        spec.seed = seed;
    }
    let data = generate(&spec)?;
    save_dir(&data, out)?;
    println!(
        "wrote {} train / {} val / {} test / {} pool samples to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        data.pool.len(),
        out.display()
    );
    Ok(())
}

pub fn train(data: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let mut cfg: CbmTrainConfig = config.map(read_json).transpose()?.unwrap_or_default();
    if let Some(seed) = seed_override()? {
        cfg = cfg.with_seed(seed);
    }
    let data = load_dir(data)?;
    let model = CbmModel::train(&data.train, N_CLASSES, &cfg)?;
    fs::create_dir_all(out)?;
    let path = out.join(MODEL_FILE);
    model.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CalibrationMode {
    /// Tune k, t_d and t_a for mistake detection.
    Detect,
    /// Fill the intervention memory and tune its reuse threshold. Needs a
    /// prior detect run for t_a.
    Generalize,
}

pub fn calibrate(model: &Path, data_dir: &Path, mode: CalibrationMode, grid: Option<&Path>) -> Result<()> {
    let dir = model_dir(model);
    let model = CbmModel::load(&model_file(model))?;
    let data = load_dir(data_dir)?;
    let splits = ProtocolSplits::for_dataset(&data)?;
    let detect_path = dir.join(DETECT_REPORT);
    match mode {
        CalibrationMode::Detect => {
            let grid: DetectionGrid = grid.map(read_json).transpose()?.unwrap_or_default();
            let report = calibrate_detection(&model, &splits.calibration_split, &splits.memory_split, &grid)?;
            write_json(&detect_path, &report)?;
            let c = report.chosen;
            println!("k={} t_d={} t_a={} f1={} -> {}", c.k, c.t_d, c.t_a, report.objective, detect_path.display());
        }
        CalibrationMode::Generalize => {
            if !detect_path.exists() {
                bail!("{} not found; run `cb2m calibrate --mode detect` first", detect_path.display());
            }
            let detection: CalibrationReport = read_json(&detect_path)?;
            let mut mem = TwofoldMemory::for_model(&model);
            mem.fill_for_generalization(&model, &splits.memory_split, detection.chosen.t_a)?;
            let cal = calibrate_generalization(&model, &splits.calibration_split, &mem)?;
            let report_path = dir.join(GENERALIZE_REPORT);
            write_json(&report_path, &cal)?;
            let mem_path = dir.join(MEMORY_FILE);
            mem.save(&mem_path)?;
            let data_dir = fs::canonicalize(data_dir).unwrap_or_else(|_| data_dir.to_path_buf());
            let service = ServiceConfig {
                detection: detection.chosen,
                generalization_t_d: cal.t_d,
                oracle_reveal: false,
                data_dir,
                split: StreamSplit::Test,
            };
            write_json(&dir.join(SERVICE_CONFIG), &service)?;
            println!(
                "t_d={} accuracy {} -> {} with {} memorized interventions -> {}",
                cal.t_d,
                cal.base_accuracy,
                cal.accuracy,
                mem.len(),
                report_path.display()
            );
        }
    }
    Ok(())
}

pub struct RunArgs<'a> {
    pub experiment: &'a str,
    pub seeds: Vec<u64>,
    pub out: &'a Path,
    pub dataset: Option<&'a Path>,
    pub spec: Option<&'a Path>,
}

pub fn run(args: RunArgs<'_>) -> Result<()> {
    let names: Vec<ExperimentName> = if args.experiment == "all" {
        ExperimentName::ALL.to_vec()
    } else {
        vec![args.experiment.parse()?]
    };
    let seeds = match seed_override()? {
        Some(seed) => vec![seed],
        None => args.seeds,
    };
    let dataset: Option<DatasetSpec> = args.dataset.map(read_json).transpose()?;
    let base: Option<ExperimentSpec> = args.spec.map(read_json).transpose()?;
    for name in names {
        let mut spec = match &base {
            Some(b) => ExperimentSpec {
                name,
                ..b.clone()
            },
            None => ExperimentSpec::new(name, seeds.clone(), args.out),
        };
        spec.seeds = seeds.clone();
        spec.output_dir = args.out.to_path_buf();
        if let Some(d) = &dataset {
            spec.dataset = d.clone();
        }
        let (rows, files) = run_and_write(&spec)?;
        println!("{name}: {} rows -> {}", rows.len(), files.csv.display());
        for s in summarize(&rows) {
            let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            println!(
                "  {:<10} {:<12} {:<40} {} +/- {} (n={})",
                s.split.as_str(),
                s.method.as_str(),
                s.metric,
                fmt(s.mean),
                fmt(s.std),
                s.n
            );
        }
    }
    Ok(())
}

pub struct ServeArgs<'a> {
    pub model: Option<&'a Path>,
    pub memory: Option<&'a Path>,
    pub config: Option<&'a Path>,
    pub host: std::net::IpAddr,
    pub port: u16,
    pub oracle_reveal: bool,
}

pub fn serve(args: ServeArgs<'_>) -> Result<()> {
    let config_path = match (args.config, args.model) {
        (Some(c), _) => c.to_path_buf(),
        (None, Some(m)) => model_dir(m).join(SERVICE_CONFIG),
        (None, None) => bail!("--config is required without --model"),
    };
    let mut cfg = ServiceConfig::load(&config_path).with_context(|| format!("loading {}", config_path.display()))?;
    cfg.oracle_reveal |= args.oracle_reveal;
    let model = args.model.map(model_file);
    let state = AppState::from_files(model.as_deref(), args.memory, &cfg)?;
    let addr = SocketAddr::new(args.host, args.port);
    eprintln!("listening on http://{addr}");
    tokio::runtime::Runtime::new()?.block_on(cb2m_service::serve(state, addr))?;
    Ok(())
}
