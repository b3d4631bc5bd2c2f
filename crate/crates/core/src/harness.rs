//! Seeded experiment runners and result tables.
//!
//! Every runner is a pure function of its [`ExperimentSpec`]: seeds run
//! independently and rows are sorted canonically before they are written.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::calibration::{apply_memory_to_dataset, calibrate_detection, calibrate_generalization, CalibrationReport, DetectionGrid, GeneralizationCalibration};
use crate::datasets::{generate, DatasetSpec, Regime, ShiftMap, SplitDataset, N_CLASSES};
use crate::error::{Cb2mError, Result};
use crate::memory::{Cb2mConfig, TwofoldMemory};
use crate::metrics::{accuracy, aupr, auroc, combined_detector, f1_score, fpr_fnr, nri, random_detector, select_combine_mode, softmax_detector, DetectorOutput, MetricValue};
use crate::model::{concept_accuracy, finetune_bottleneck, CbmModel, CbmTrainConfig};
use crate::oracle::{intervene_flagged, intervention_curve, PolicyKind, SubsetPolicy};
use crate::types::{ConceptVector, Sample};

/// Feature noise used by the experiment defaults. Low enough that the base
/// model's errors are dominated by each regime's failure mode.
pub const EXPERIMENT_NOISE_SIGMA: f64 = 0.2;
pub const CONFOUNDER_STRENGTH: f64 = 3.0;
pub const UNBALANCED_DIGIT: usize = 9;
pub const UNBALANCED_KEEP: f64 = 0.05;

/// Noise stream of the shifted copy of the training split.
const SHIFTED_TRAIN_STREAM: u64 = 2;
const RANDOM_DETECTOR_SALT: u64 = 0x7261_6e64;
const ABLATION_SALT: u64 = 0x6162_6c74;
const RANDOM_POLICY_SALT: u64 = 0x706f_6c69;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    Generalization,
    Detection,
    InterveneAfterDetection,
    SubsetCurve,
    MemoryAblation,
    DistributionShift,
}

impl ExperimentName {
    pub const ALL: [Self; 6] = [
        Self::Generalization,
        Self::Detection,
        Self::InterveneAfterDetection,
        Self::SubsetCurve,
        Self::MemoryAblation,
        Self::DistributionShift,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Generalization => "generalization",
            Self::Detection => "detection",
            Self::InterveneAfterDetection => "intervene_after_detection",
            Self::SubsetCurve => "subset_curve",
            Self::MemoryAblation => "memory_ablation",
            Self::DistributionShift => "distribution_shift",
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentName {
    type Err = Cb2mError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Cb2mError::InvalidConfig(format!("unknown experiment '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Identified,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cbm,
    CbmFtShort,
    CbmFtLong,
    Cb2m,
    Random,
    Softmax,
    Combined,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Identified => "identified",
            Self::Full => "full",
        }
    }
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cbm => "cbm",
            Self::CbmFtShort => "cbm_ft_short",
            Self::CbmFtLong => "cbm_ft_long",
            Self::Cb2m => "cb2m",
            Self::Random => "random",
            Self::Softmax => "softmax",
            Self::Combined => "combined",
        }
    }
}

impl FromStr for Split {
    type Err = Cb2mError;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Identified, Self::Full]
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Cb2mError::Format(format!("unknown split '{s}'")))
    }
}

impl FromStr for Method {
    type Err = Cb2mError;

    fn from_str(s: &str) -> Result<Self> {
        use Method::*;
        [Cbm, CbmFtShort, CbmFtLong, Cb2m, Random, Softmax, Combined]
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Cb2mError::Format(format!("unknown method '{s}'")))
    }
}

pub fn parse_metric_value(s: &str) -> Result<MetricValue> {
    match s {
        "undefined" => Ok(MetricValue::Undefined),
        "saturated" => Ok(MetricValue::Saturated),
        _ => s
            .parse::<f64>()
            .map(MetricValue::Value)
            .map_err(|_| Cb2mError::Format(format!("bad metric value '{s}'"))),
    }
}

/// Numbers stay numbers; markers become strings.
mod flat_value {
    use super::*;

    pub fn serialize<S: Serializer>(v: &MetricValue, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            MetricValue::Value(x) => s.serialize_f64(*x),
            MetricValue::Undefined => s.serialize_str("undefined"),
            MetricValue::Saturated => s.serialize_str("saturated"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<MetricValue, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Marker(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(x) => Ok(MetricValue::Value(x)),
            Raw::Marker(m) => parse_metric_value(&m).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: ExperimentName,
    pub seed: u64,
    pub split: Split,
    pub method: Method,
    pub metric: String,
    #[serde(with = "flat_value")]
    pub value: MetricValue,
}

impl ResultRow {
    fn sort_key(&self) -> (ExperimentName, u64, Method, Split, &str) {
        (self.experiment, self.seed, self.method, self.split, &self.metric)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    pub dataset: DatasetSpec,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub training: CbmTrainConfig,
    #[serde(default)]
    pub grid: DetectionGrid,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    /// Concept budgets for the subset curve; `None` means `0..=C`.
    #[serde(default)]
    pub budgets: Option<Vec<usize>>,
    #[serde(default = "default_ft_short")]
    pub ft_short_epochs: usize,
    #[serde(default = "default_ft_long")]
    pub ft_long_epochs: usize,
}

fn default_fractions() -> Vec<f64> {
    vec![0.25, 0.5, 0.75, 1.0]
}

fn default_ft_short() -> usize {
    1
}

fn default_ft_long() -> usize {
    5
}

/// Dataset each experiment uses unless told otherwise.
pub fn default_dataset(name: ExperimentName) -> DatasetSpec {
    let regime = match name {
        ExperimentName::Generalization | ExperimentName::MemoryAblation => Regime::Unbalanced {
            digit: UNBALANCED_DIGIT,
            keep_fraction: UNBALANCED_KEEP,
        },
        ExperimentName::Detection | ExperimentName::InterveneAfterDetection | ExperimentName::SubsetCurve => {
            Regime::Confounded {
                strength: CONFOUNDER_STRENGTH,
            }
        }
        ExperimentName::DistributionShift => Regime::Shifted,
    };
    DatasetSpec {
        regime,
        noise_sigma: EXPERIMENT_NOISE_SIGMA,
        ..DatasetSpec::default()
    }
}

impl ExperimentSpec {
    pub fn new(name: ExperimentName, seeds: Vec<u64>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            name,
            dataset: default_dataset(name),
            seeds,
            output_dir: output_dir.into(),
            training: CbmTrainConfig::default(),
            grid: DetectionGrid::default(),
            fractions: default_fractions(),
            budgets: None,
            ft_short_epochs: default_ft_short(),
            ft_long_epochs: default_ft_long(),
        }
    }

    pub fn with_dataset(mut self, dataset: DatasetSpec) -> Self {
        self.dataset = dataset;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Cb2mError::InvalidConfig("experiment needs at least one seed".into()));
        }
        self.dataset.validate()?;
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Cb2mError::InvalidConfig("ablation fractions must lie in (0, 1]".into()));
        }
        if let Some(b) = &self.budgets {
            if b.is_empty() || b.windows(2).any(|w| w[0] > w[1]) {
                return Err(Cb2mError::InvalidConfig("budgets must be non-empty and sorted".into()));
            }
        }
        Ok(())
    }
}

/// Which samples feed the memory and which tune thresholds, per regime.
///
/// The memory always receives feedback on data from the deployment
/// distribution; thresholds are tuned on a disjoint split of that same
/// distribution where one exists.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSplits {
    /// Samples whose mistakes (and ground-truth interventions) fill the memory.
    pub memory_split: Vec<Sample>,
    /// Split on which `t_d` for generalization and detection is tuned.
    pub calibration_split: Vec<Sample>,
    /// Threshold split for the softmax, random and combined baselines.
    pub detector_val: Vec<Sample>,
}

impl ProtocolSplits {
    pub fn for_dataset(data: &SplitDataset) -> Result<Self> {
        let (memory_split, calibration_split, detector_val) = match data.meta.regime {
            Regime::Balanced | Regime::Unbalanced { .. } => (data.val.clone(), data.train.clone(), data.val.clone()),
            Regime::Confounded { .. } => {
                let (a, b) = data.pool.split_at(data.pool.len() / 2);
                (a.to_vec(), b.to_vec(), b.to_vec())
            }
            Regime::Augmented { .. } => (data.pool.clone(), data.train.clone(), data.val.clone()),
            Regime::Shifted => {
                let map = ShiftMap::new(data.n_features(), data.meta.noise_sigma, data.meta.seed)?;
                (data.pool.clone(), map.apply(&data.train, SHIFTED_TRAIN_STREAM), data.pool.clone())
            }
        };
        Ok(Self {
            memory_split,
            calibration_split,
            detector_val,
        })
    }
}

/// One trained model plus the splits and detection calibration of one seed.
///
/// Splits follow [`ProtocolSplits`].
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub data: SplitDataset,
    pub model: CbmModel,
    /// Samples whose mistakes (and ground-truth interventions) fill the memory.
    pub memory_split: Vec<Sample>,
    /// Split on which `t_d` for generalization and detection is tuned.
    pub calibration_split: Vec<Sample>,
    /// Threshold split for the softmax, random and combined baselines.
    pub detector_val: Vec<Sample>,
    pub detection: CalibrationReport,
}

impl SeedRun {
    /// Generates the seed's dataset, trains the model and calibrates detection.
    pub fn prepare(spec: &ExperimentSpec, seed: u64) -> Result<Self> {
        let data = generate(&spec.dataset.clone().with_seed(seed))?;
        let model = CbmModel::train(&data.train, N_CLASSES, &spec.training.clone().with_seed(seed))?;
        let ProtocolSplits {
            memory_split,
            calibration_split,
            detector_val,
        } = ProtocolSplits::for_dataset(&data)?;
        let detection = calibrate_detection(&model, &calibration_split, &memory_split, &spec.grid)?;
        Ok(Self {
            seed,
            data,
            model,
            memory_split,
            calibration_split,
            detector_val,
            detection,
        })
    }

    /// Memory of ground-truth interventions plus its calibrated `t_d`.
    pub fn generalization_memory(&self) -> Result<(TwofoldMemory, GeneralizationCalibration)> {
        let mut mem = TwofoldMemory::for_model(&self.model);
        mem.fill_for_generalization(&self.model, &self.memory_split, self.detection.chosen.t_a)?;
        let cal = calibrate_generalization(&self.model, &self.calibration_split, &mem)?;
        Ok((mem, cal))
    }

    pub fn detection_memory(&self) -> Result<TwofoldMemory> {
        let mut mem = TwofoldMemory::for_model(&self.model);
        mem.fill_for_detection(&self.model, &self.memory_split, self.detection.chosen.t_a)?;
        Ok(mem)
    }
}

struct Rows {
    experiment: ExperimentName,
    seed: u64,
    out: Vec<ResultRow>,
}

impl Rows {
    fn new(experiment: ExperimentName, seed: u64) -> Self {
        Self {
            experiment,
            seed,
            out: Vec::new(),
        }
    }

    fn push(&mut self, split: Split, method: Method, metric: impl Into<String>, value: impl Into<MetricValue>) {
        let value = match value.into() {
            MetricValue::Value(v) if !v.is_finite() => MetricValue::Undefined,
            v => v,
        };
        self.out.push(ResultRow {
            experiment: self.experiment,
            seed: self.seed,
            split,
            method,
            metric: metric.into(),
            value,
        });
    }

    fn count(&mut self, split: Split, method: Method, metric: impl Into<String>, n: usize) {
        self.push(split, method, metric, n as f64);
    }
}

fn class_accuracy(pred: &[usize], data: &[Sample], mask: Option<&[bool]>) -> Option<f64> {
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let (p, t): (Vec<usize>, Vec<usize>) = (0..data.len())
        .filter(|&i| keep(i))
        .map(|i| (pred[i], data[i].label_true))
        .unzip();
    accuracy(&p, &t)
}

fn mean_concept_accuracy(concepts: &[ConceptVector], data: &[Sample], mask: Option<&[bool]>) -> Option<f64> {
    let accs: Vec<f64> = (0..data.len())
        .filter(|&i| mask.is_none_or(|m| m[i]))
        .map(|i| concept_accuracy(&concepts[i], &data[i].concepts_true))
        .collect();
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}

fn wrong_mask(model: &CbmModel, data: &[Sample]) -> Result<Vec<bool>> {
    Ok(model
        .predict_all(data)?
        .iter()
        .zip(data)
        .map(|(p, x)| p.label != x.label_true)
        .collect())
}

/// Class and concept accuracy on the identified subset and the full set.
fn accuracy_rows(rows: &mut Rows, method: Method, data: &[Sample], pred: &[usize], concepts: &[ConceptVector], mask: &[bool], suffix: &str) {
    for (split, m) in [(Split::Identified, Some(mask)), (Split::Full, None)] {
        rows.push(split, method, format!("class_accuracy{suffix}"), class_accuracy(pred, data, m));
        rows.push(split, method, format!("concept_accuracy{suffix}"), mean_concept_accuracy(concepts, data, m));
    }
}

fn generalization_seed(spec: &ExperimentSpec, ctx: &SeedRun, rows: &mut Rows, finetune: bool) -> Result<()> {
    let test = &ctx.data.test;
    let (mem, cal) = ctx.generalization_memory()?;
    let app = apply_memory_to_dataset(&ctx.model, test, &mem, cal.t_d)?;
    let mask = app.mask();

    let mut methods: Vec<(Method, CbmModel)> = vec![(Method::Cbm, ctx.model.clone())];
    if finetune {
        let cfg = spec.training.clone().with_seed(ctx.seed).bottleneck;
        for (method, epochs) in [(Method::CbmFtShort, spec.ft_short_epochs), (Method::CbmFtLong, spec.ft_long_epochs)] {
            let b = finetune_bottleneck(&ctx.model.bottleneck, &ctx.memory_split, epochs, &cfg)?;
            methods.push((method, ctx.model.with_bottleneck(b)));
        }
    }
    for (method, model) in &methods {
        let preds = model.predict_all(test)?;
        let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
        let concepts: Vec<ConceptVector> = preds.into_iter().map(|p| p.concepts).collect();
        accuracy_rows(rows, *method, test, &labels, &concepts, &mask, "");
    }
    accuracy_rows(rows, Method::Cb2m, test, &app.predictions, &app.concepts, &mask, "");

    let n_applied = app.n_applied();
    rows.count(Split::Identified, Method::Cb2m, "n_samples", n_applied);
    rows.count(Split::Full, Method::Cb2m, "n_samples", test.len());
    rows.count(Split::Full, Method::Cb2m, "n_applied", n_applied);
    rows.count(Split::Full, Method::Cb2m, "memory_size", mem.len());
    rows.push(Split::Full, Method::Cb2m, "t_d", cal.t_d);
    rows.push(Split::Full, Method::Cb2m, "t_a", ctx.detection.chosen.t_a);
    let (fpr, fnr) = fpr_fnr(&mask, &wrong_mask(&ctx.model, test)?)?;
    rows.push(Split::Full, Method::Cb2m, "fpr", fpr);
    rows.push(Split::Full, Method::Cb2m, "fnr", fnr);
    Ok(())
}

struct Detectors {
    cfg: Cb2mConfig,
    outputs: Vec<(Method, DetectorOutput)>,
    partial_mode: bool,
}

fn cb2m_detector(model: &CbmModel, mem: &TwofoldMemory, cfg: &Cb2mConfig, data: &[Sample]) -> Result<DetectorOutput> {
    let scores = data
        .iter()
        .map(|x| mem.detection_score(&model.bottleneck.encode(x)?, cfg.k))
        .collect::<Result<Vec<f64>>>()?;
    // score >= -t_d is exactly the k-within-t_d rule
    Ok(DetectorOutput::thresholded(scores, -cfg.t_d))
}

fn detectors(ctx: &SeedRun) -> Result<Detectors> {
    let cfg = ctx.detection.chosen;
    let mem = ctx.detection_memory()?;
    let (model, test, val) = (&ctx.model, &ctx.data.test, &ctx.detector_val);

    let cb2m = cb2m_detector(model, &mem, &cfg, test)?;
    let softmax = softmax_detector(model, test, val)?;
    let val_wrong = wrong_mask(model, val)?;
    let rate = val_wrong.iter().filter(|&&w| w).count() as f64 / val.len().max(1) as f64;
    let random = random_detector(test.len(), rate, ctx.seed ^ RANDOM_DETECTOR_SALT);

    let mode = select_combine_mode(
        &softmax_detector(model, val, val)?,
        &cb2m_detector(model, &mem, &cfg, val)?,
        &val_wrong,
    )?;
    let combined = combined_detector(&softmax, &cb2m, mode)?;
    Ok(Detectors {
        cfg,
        outputs: vec![
            (Method::Random, random),
            (Method::Softmax, softmax),
            (Method::Cb2m, cb2m),
            (Method::Combined, combined),
        ],
        partial_mode: mode == crate::metrics::CombineMode::Partial,
    })
}

fn detection_seed(ctx: &SeedRun, rows: &mut Rows) -> Result<()> {
    let wrong = wrong_mask(&ctx.model, &ctx.data.test)?;
    let det = detectors(ctx)?;
    rows.count(Split::Full, Method::Cbm, "n_mistakes", wrong.iter().filter(|&&w| w).count());
    rows.count(Split::Full, Method::Cbm, "n_samples", wrong.len());
    for (method, out) in &det.outputs {
        rows.push(Split::Full, *method, "auroc", auroc(&out.scores, &wrong).ok());
        rows.push(Split::Full, *method, "aupr", aupr(&out.scores, &wrong).ok());
        rows.push(Split::Full, *method, "f1", f1_score(&out.decisions, &wrong));
        let (fpr, fnr) = fpr_fnr(&out.decisions, &wrong)?;
        rows.push(Split::Full, *method, "fpr", fpr);
        rows.push(Split::Full, *method, "fnr", fnr);
        rows.count(Split::Full, *method, "n_flagged", out.n_flagged());
    }
    rows.count(Split::Full, Method::Cb2m, "k", det.cfg.k);
    rows.push(Split::Full, Method::Cb2m, "t_d", det.cfg.t_d);
    rows.push(Split::Full, Method::Cb2m, "t_a", det.cfg.t_a);
    rows.push(Split::Full, Method::Combined, "partial_mode", if det.partial_mode { 1.0 } else { 0.0 });
    Ok(())
}

/// Predictor accuracy on ground-truth concepts of the validation split.
fn acc_max(ctx: &SeedRun) -> Result<f64> {
    let mut pred = Vec::with_capacity(ctx.data.val.len());
    for x in &ctx.data.val {
        pred.push(ctx.model.predictor.predict_class(&x.true_concept_vector())?.0);
    }
    let truth: Vec<usize> = ctx.data.val.iter().map(|x| x.label_true).collect();
    accuracy(&pred, &truth).ok_or(Cb2mError::Undefined("accuracy of an empty validation split"))
}

fn intervene_after_detection_seed(ctx: &SeedRun, rows: &mut Rows) -> Result<()> {
    let test = &ctx.data.test;
    let acc_max = acc_max(ctx)?;
    let base: Vec<usize> = ctx.model.predict_all(test)?.iter().map(|p| p.label).collect();
    rows.push(Split::Full, Method::Cbm, "acc_max", acc_max);
    rows.push(Split::Full, Method::Cbm, "class_accuracy", class_accuracy(&base, test, None));
    for (method, out) in detectors(ctx)?.outputs {
        let after = intervene_flagged(&ctx.model, test, &out.decisions, &SubsetPolicy::all())?;
        for (split, mask) in [(Split::Identified, Some(out.decisions.as_slice())), (Split::Full, None)] {
            let (b, a) = (class_accuracy(&base, test, mask), class_accuracy(&after, test, mask));
            rows.push(split, method, "base_class_accuracy", b);
            rows.push(split, method, "class_accuracy", a);
            let value = match (a, b) {
                (Some(a), Some(b)) => nri(a, b, acc_max),
                _ => MetricValue::Undefined,
            };
            rows.push(split, method, "nri", value);
        }
        rows.count(Split::Identified, method, "n_samples", out.n_flagged());
    }
    Ok(())
}

fn subset_curve_seed(spec: &ExperimentSpec, ctx: &SeedRun, rows: &mut Rows) -> Result<()> {
    let test = &ctx.data.test;
    let c = ctx.model.bottleneck.n_concepts();
    let budgets = spec.budgets.clone().unwrap_or_else(|| (0..=c).collect());
    if budgets.iter().any(|&b| b > c) {
        return Err(Cb2mError::InvalidConfig(format!("budget above the concept count {c}")));
    }
    let cfg = ctx.detection.chosen;
    let mem = ctx.detection_memory()?;
    let flags: Vec<bool> = test
        .iter()
        .map(|x| mem.detect_mistake(&ctx.model.bottleneck.encode(x)?, &cfg))
        .collect::<Result<_>>()?;
    let full = intervene_flagged(&ctx.model, test, &flags, &SubsetPolicy::all())?;
    rows.push(Split::Full, Method::Cb2m, "full_intervention_class_accuracy", class_accuracy(&full, test, None));
    rows.count(Split::Identified, Method::Cb2m, "n_samples", flags.iter().filter(|&&f| f).count());
    let base: Vec<usize> = ctx.model.predict_all(test)?.iter().map(|p| p.label).collect();
    rows.push(Split::Full, Method::Cbm, "class_accuracy", class_accuracy(&base, test, None));

    let policies = [
        ("uncertainty", PolicyKind::Uncertainty),
        (
            "random",
            PolicyKind::Random {
                seed: ctx.seed ^ RANDOM_POLICY_SALT,
            },
        ),
    ];
    for (name, kind) in policies {
        for (b, acc) in intervention_curve(&ctx.model, &mem, &cfg, test, kind, &budgets)? {
            rows.push(Split::Full, Method::Cb2m, format!("class_accuracy_{name}_budget_{b}"), acc);
        }
    }
    Ok(())
}

fn memory_ablation_seed(spec: &ExperimentSpec, ctx: &SeedRun, rows: &mut Rows) -> Result<()> {
    let test = &ctx.data.test;
    let (mem, cal) = ctx.generalization_memory()?;
    let mut order: Vec<_> = mem.entries().iter().map(|e| e.entry_id).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(ctx.seed ^ ABLATION_SALT));

    let preds = ctx.model.predict_all(test)?;
    let base: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let base_concepts: Vec<ConceptVector> = preds.into_iter().map(|p| p.concepts).collect();
    for &f in &spec.fractions {
        // prefixes of one permutation, so smaller fractions are nested in larger ones
        let keep = ((f * order.len() as f64).round() as usize).min(order.len());
        let kept: std::collections::HashSet<_> = order[..keep].iter().copied().collect();
        let mut sub = mem.clone();
        sub.retain(|e| kept.contains(&e.entry_id));
        let app = apply_memory_to_dataset(&ctx.model, test, &sub, cal.t_d)?;
        let mask = app.mask();
        let suffix = format!("_f{f}");
        accuracy_rows(rows, Method::Cbm, test, &base, &base_concepts, &mask, &suffix);
        accuracy_rows(rows, Method::Cb2m, test, &app.predictions, &app.concepts, &mask, &suffix);
        rows.count(Split::Full, Method::Cb2m, format!("n_applied{suffix}"), app.n_applied());
        rows.count(Split::Full, Method::Cb2m, format!("memory_size{suffix}"), sub.len());
    }
    rows.push(Split::Full, Method::Cb2m, "t_d", cal.t_d);
    Ok(())
}

fn distribution_shift_seed(spec: &ExperimentSpec, ctx: &SeedRun, rows: &mut Rows) -> Result<()> {
    generalization_seed(spec, ctx, rows, false)?;
    let source = generate(&ctx.data.meta.clone().with_regime(Regime::Balanced))?;
    let pred: Vec<usize> = ctx.model.predict_all(&source.test)?.iter().map(|p| p.label).collect();
    rows.push(Split::Full, Method::Cbm, "source_class_accuracy", class_accuracy(&pred, &source.test, None));
    Ok(())
}

fn run_seed(spec: &ExperimentSpec, seed: u64) -> Result<Vec<ResultRow>> {
    let ctx = SeedRun::prepare(spec, seed)?;
    let mut rows = Rows::new(spec.name, seed);
    match spec.name {
        ExperimentName::Generalization => generalization_seed(spec, &ctx, &mut rows, true)?,
        ExperimentName::Detection => detection_seed(&ctx, &mut rows)?,
        ExperimentName::InterveneAfterDetection => intervene_after_detection_seed(&ctx, &mut rows)?,
        ExperimentName::SubsetCurve => subset_curve_seed(spec, &ctx, &mut rows)?,
        ExperimentName::MemoryAblation => memory_ablation_seed(spec, &ctx, &mut rows)?,
        ExperimentName::DistributionShift => distribution_shift_seed(spec, &ctx, &mut rows)?,
    }
    Ok(rows.out)
}

/// Runs every seed of `spec` and returns rows in canonical order.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let per_seed: Vec<Vec<ResultRow>> = spec.seeds.par_iter().map(|&s| run_seed(spec, s)).collect::<Result<_>>()?;
    let mut rows: Vec<ResultRow> = per_seed.into_iter().flatten().collect();
    rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(rows)
}

fn with_name(spec: &ExperimentSpec, name: ExperimentName) -> ExperimentSpec {
    ExperimentSpec { name, ..spec.clone() }
}

pub fn run_generalization(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    run_experiment(&with_name(spec, ExperimentName::Generalization))
}

pub fn run_detection(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    run_experiment(&with_name(spec, ExperimentName::Detection))
}

pub fn run_intervene_after_detection(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    run_experiment(&with_name(spec, ExperimentName::InterveneAfterDetection))
}

pub fn run_subset_curve(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    run_experiment(&with_name(spec, ExperimentName::SubsetCurve))
}

pub fn run_memory_ablation(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    run_experiment(&with_name(spec, ExperimentName::MemoryAblation))
}

pub fn run_distribution_shift(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    run_experiment(&with_name(spec, ExperimentName::DistributionShift))
}

/// Mean and sample standard deviation of one metric over seeds. Undefined
/// and saturated values are excluded and counted separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: ExperimentName,
    pub split: Split,
    pub method: Method,
    pub metric: String,
    pub n: usize,
    pub n_missing: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(ExperimentName, Method, Split, &str), Vec<MetricValue>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.experiment, r.method, r.split, &r.metric))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((experiment, method, split, metric), values)| {
            let xs: Vec<f64> = values.iter().filter_map(|v| v.value()).collect();
            let n = xs.len();
            let mean = (n > 0).then(|| xs.iter().sum::<f64>() / n as f64);
            let std = mean.map(|m| {
                if n < 2 {
                    0.0
                } else {
                    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                }
            });
            SummaryRow {
                experiment,
                split,
                method,
                metric: metric.to_string(),
                n,
                n_missing: values.len() - n,
                mean,
                std,
            }
        })
        .collect()
}

pub const CSV_HEADER: [&str; 6] = ["experiment", "seed", "split", "method", "metric", "value"];

pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.experiment.as_str(),
            &r.seed.to_string(),
            r.split.as_str(),
            r.method.as_str(),
            &r.metric,
            &r.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(CSV_HEADER) {
        return Err(Cb2mError::Format(format!("unexpected header in {}", path.display())));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            let field = |i: usize| rec.get(i).ok_or_else(|| Cb2mError::Format("short CSV record".into()));
            Ok(ResultRow {
                experiment: field(0)?.parse()?,
                seed: field(1)?
                    .parse()
                    .map_err(|_| Cb2mError::Format(format!("bad seed '{}'", &rec[1])))?,
                split: field(2)?.parse()?,
                method: field(3)?.parse()?,
                metric: field(4)?.to_string(),
                value: parse_metric_value(field(5)?)?,
            })
        })
        .collect()
}

fn write_summary_csv(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let fmt_opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:?}"));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["experiment", "split", "method", "metric", "n", "n_missing", "mean", "std"])?;
    for s in summary {
        w.write_record([
            s.experiment.as_str(),
            s.split.as_str(),
            s.method.as_str(),
            &s.metric,
            &s.n.to_string(),
            &s.n_missing.to_string(),
            &fmt_opt(s.mean),
            &fmt_opt(s.std),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Paths written by [`write_results`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultFiles {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub summary: PathBuf,
}

pub fn result_files(dir: &Path, name: ExperimentName) -> ResultFiles {
    ResultFiles {
        csv: dir.join(format!("{name}.csv")),
        json: dir.join(format!("{name}.json")),
        summary: dir.join(format!("{name}_summary.csv")),
    }
}

pub fn write_results(dir: &Path, name: ExperimentName, rows: &[ResultRow]) -> Result<ResultFiles> {
    fs::create_dir_all(dir)?;
    let files = result_files(dir, name);
    write_csv(&files.csv, rows)?;
    fs::write(&files.json, serde_json::to_string_pretty(rows)? + "\n")?;
    write_summary_csv(&files.summary, &summarize(rows))?;
    Ok(files)
}

/// Runs `spec` and writes its tables under `spec.output_dir`.
pub fn run_and_write(spec: &ExperimentSpec) -> Result<(Vec<ResultRow>, ResultFiles)> {
    let rows = run_experiment(spec)?;
    let files = write_results(&spec.output_dir, spec.name, &rows)?;
    Ok((rows, files))
}

/// First row matching all keys.
pub fn find_row<'a>(rows: &'a [ResultRow], seed: u64, split: Split, method: Method, metric: &str) -> Option<&'a ResultRow> {
    rows.iter()
        .find(|r| r.seed == seed && r.split == split && r.method == method && r.metric == metric)
}
