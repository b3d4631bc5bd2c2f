//! Seeded synthetic "parity digit" tasks.
//!
//! Each of ten digits owns a fixed unit-norm prototype in `R^D`; a sample is
//! its digit's prototype plus isotropic Gaussian noise. The concept vector is
//! the one-hot digit and the label is the digit's parity. The regimes layer a
//! specific failure mode on top: class unbalance, a train-only confounder,
//! label-preserving corruptions and a covariate shift.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Cb2mError, Result};
use crate::types::{Sample, SampleId};

pub const N_DIGITS: usize = 10;
pub const N_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Gaussian,
    SaltPepper,
    Blackout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    Balanced,
    Unbalanced { digit: usize, keep_fraction: f64 },
    Confounded { strength: f64 },
    Augmented { augment: AugmentKind, magnitude: f64 },
    Shifted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub regime: Regime,
    /// Size of the training pool; the validation split is carved out of it.
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_features: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            regime: Regime::Balanced,
            n_train: 5000,
            n_val: 1000,
            n_test: 2000,
            n_features: 16,
            noise_sigma: 0.35,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn with_regime(mut self, regime: Regime) -> Self {
        self.regime = regime;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features < N_DIGITS {
            return Err(Cb2mError::InvalidConfig(format!(
                "need at least {N_DIGITS} feature dimensions, got {}",
                self.n_features
            )));
        }
        if self.n_val == 0 || self.n_test == 0 || self.n_val >= self.n_train {
            return Err(Cb2mError::InvalidConfig(format!(
                "split sizes must be positive with n_val < n_train (train {}, val {}, test {})",
                self.n_train, self.n_val, self.n_test
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Cb2mError::InvalidConfig(format!("bad noise sigma {}", self.noise_sigma)));
        }
        match self.regime {
            Regime::Unbalanced { digit, keep_fraction } => {
                if digit >= N_DIGITS || !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
                    return Err(Cb2mError::InvalidConfig(format!(
                        "unbalance needs digit < 10 and keep fraction in (0, 1], got {digit} / {keep_fraction}"
                    )));
                }
            }
            Regime::Confounded { strength } if strength.is_nan() || strength <= 0.0 => {
                return Err(Cb2mError::InvalidConfig(format!("confounder strength {strength} must be positive")));
            }
            Regime::Augmented { magnitude, .. } if magnitude.is_nan() || magnitude < 0.0 => {
                return Err(Cb2mError::InvalidConfig(format!("augmentation magnitude {magnitude} must be >= 0")));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Train/val/test splits plus an optional held-out pool.
///
/// The pool holds samples reserved for simulated human interventions: the
/// unconfounded pool of the confounded regime, the unmodified test set of the
/// augmented regime and a shifted-domain pool of the shifted regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub pool: Vec<Sample>,
    pub meta: DatasetSpec,
}

impl SplitDataset {
    pub fn n_features(&self) -> usize {
        self.train.first().map_or(self.meta.n_features, Sample::n_features)
    }

    fn next_id(&self) -> u64 {
        [&self.train, &self.val, &self.test, &self.pool]
            .into_iter()
            .flatten()
            .map(|s| s.id.0 + 1)
            .max()
            .unwrap_or(0)
    }
}

pub fn parity(digit: usize) -> usize {
    digit % 2
}

/// Digit encoded by a one-hot concept vector.
pub fn digit_of(sample: &Sample) -> usize {
    sample
        .concepts_true
        .iter()
        .position(|&c| c == 1)
        .unwrap_or(0)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

mod stream {
    pub const PROTOTYPES: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const VAL: u64 = 3;
    pub const TEST: u64 = 4;
    pub const POOL: u64 = 5;
    pub const UNBALANCE: u64 = 6;
    pub const AUGMENT: u64 = 7;
    pub const SHIFT_MAP: u64 = 8;
    pub const SHIFT_NOISE: u64 = 9;
}

struct Generator {
    prototypes: Vec<Vec<f64>>,
    noise: Normal<f64>,
    seed: u64,
}

impl Generator {
    fn new(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_for(spec.seed, stream::PROTOTYPES);
        let prototypes = (0..N_DIGITS)
            .map(|_| {
                let v: Vec<f64> = (0..spec.n_features).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let noise = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Cb2mError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            prototypes,
            noise,
            seed: spec.seed,
        })
    }

    /// `n` samples with digits balanced within one, in seeded order.
    fn samples(&self, n: usize, first_id: u64, stream: u64) -> Vec<Sample> {
        let mut rng = rng_for(self.seed, stream);
        let mut digits: Vec<usize> = (0..n).map(|i| i % N_DIGITS).collect();
        digits.shuffle(&mut rng);
        digits
            .into_iter()
            .enumerate()
            .map(|(i, digit)| {
                let features = self.prototypes[digit]
                    .iter()
                    .map(|&p| p + self.noise.sample(&mut rng))
                    .collect();
                let mut concepts = vec![0u8; N_DIGITS];
                concepts[digit] = 1;
                Sample {
                    id: SampleId(first_id + i as u64),
                    features,
                    concepts_true: concepts,
                    label_true: parity(digit),
                }
            })
            .collect()
    }
}

/// Balanced parity task.
pub fn gen_parity(spec: &DatasetSpec) -> Result<SplitDataset> {
    if spec.regime != Regime::Balanced {
        return Err(Cb2mError::InvalidConfig("gen_parity expects the balanced regime".into()));
    }
    let g = Generator::new(spec)?;
    let n_train = spec.n_train - spec.n_val;
    let train = g.samples(n_train, 0, stream::TRAIN);
    let val = g.samples(spec.n_val, n_train as u64, stream::VAL);
    let test = g.samples(spec.n_test, spec.n_train as u64, stream::TEST);
    Ok(SplitDataset {
        train,
        val,
        test,
        pool: Vec::new(),
        meta: spec.clone(),
    })
}

/// Builds the dataset for any regime described by `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<SplitDataset> {
    spec.validate()?;
    let base = gen_parity(&spec.clone().with_regime(Regime::Balanced))?;
    let mut out = match spec.regime {
        Regime::Balanced => base,
        Regime::Unbalanced { digit, keep_fraction } => unbalance(&base, digit, keep_fraction)?,
        Regime::Confounded { strength } => confound(&base, strength)?,
        Regime::Augmented { augment: kind, magnitude } => {
            let test = augment(&base.test, kind, magnitude, spec.seed)?;
            SplitDataset {
                pool: base.test.clone(),
                test,
                ..base
            }
        }
        Regime::Shifted => shift(&base, spec.seed)?,
    };
    out.meta = spec.clone();
    Ok(out)
}

/// Keeps only `keep_fraction` of the training samples of `digit`.
pub fn unbalance(d: &SplitDataset, digit: usize, keep_fraction: f64) -> Result<SplitDataset> {
    if digit >= N_DIGITS || !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Cb2mError::InvalidConfig(format!(
            "unbalance needs digit < 10 and keep fraction in (0, 1], got {digit} / {keep_fraction}"
        )));
    }
    let positions: Vec<usize> = d
        .train
        .iter()
        .enumerate()
        .filter(|(_, s)| digit_of(s) == digit)
        .map(|(i, _)| i)
        .collect();
    let keep = (keep_fraction * positions.len() as f64).round() as usize;
    let mut rng = rng_for(d.meta.seed, stream::UNBALANCE);
    let mut kept = vec![true; d.train.len()];
    for &i in &positions {
        kept[i] = false;
    }
    for pick in index::sample(&mut rng, positions.len(), keep) {
        kept[positions[pick]] = true;
    }
    let train = d
        .train
        .iter()
        .zip(&kept)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(SplitDataset {
        train,
        meta: d.meta.clone().with_regime(Regime::Unbalanced { digit, keep_fraction }),
        ..d.clone()
    })
}

fn with_extra_dims(s: &Sample, extra: [f64; 2]) -> Sample {
    let mut out = s.clone();
    out.features.extend(extra);
    out
}

/// Appends two confounder dimensions: `strength * one_hot(parity)` in train
/// and val, zeros in test. Also draws an unconfounded pool of `n_val` samples.
pub fn confound(d: &SplitDataset, strength: f64) -> Result<SplitDataset> {
    if !(strength > 0.0 && strength.is_finite()) {
        return Err(Cb2mError::InvalidConfig(format!("confounder strength {strength} must be positive")));
    }
    let marked = |s: &Sample| {
        let mut extra = [0.0; 2];
        extra[s.label_true] = strength;
        with_extra_dims(s, extra)
    };
    let g = Generator::new(&d.meta.clone().with_regime(Regime::Balanced))?;
    let pool = g
        .samples(d.meta.n_val, d.next_id(), stream::POOL)
        .iter()
        .map(|s| with_extra_dims(s, [0.0; 2]))
        .collect();
    Ok(SplitDataset {
        train: d.train.iter().map(marked).collect(),
        val: d.val.iter().map(marked).collect(),
        test: d.test.iter().map(|s| with_extra_dims(s, [0.0; 2])).collect(),
        pool,
        meta: d.meta.clone().with_regime(Regime::Confounded { strength }),
    })
}

/// Label-preserving corruption of `test`; output ids equal the source ids.
pub fn augment(test: &[Sample], kind: AugmentKind, magnitude: f64, seed: u64) -> Result<Vec<Sample>> {
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(Cb2mError::InvalidConfig(format!("augmentation magnitude {magnitude} must be >= 0")));
    }
    let mut rng = rng_for(seed, stream::AUGMENT);
    Ok(test
        .iter()
        .map(|s| corrupt(s, kind, magnitude, &mut rng).0)
        .collect())
}

/// Corrupts one sample; also returns the coordinates that were overwritten
/// (every coordinate for additive Gaussian noise).
fn corrupt(s: &Sample, kind: AugmentKind, magnitude: f64, rng: &mut ChaCha8Rng) -> (Sample, Vec<usize>) {
    let mut out = s.clone();
    let dim = out.features.len();
    let count = (magnitude.min(1.0) * dim as f64).round() as usize;
    let touched = match kind {
        AugmentKind::Gaussian => {
            if magnitude == 0.0 {
                return (out, Vec::new());
            }
            let noise = Normal::new(0.0, magnitude).expect("finite std");
            out.features.iter_mut().for_each(|v| *v += noise.sample(rng));
            (0..dim).collect()
        }
        AugmentKind::SaltPepper => {
            let max = s.features.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let picked = index::sample(rng, dim, count).into_vec();
            for &j in &picked {
                out.features[j] = if rng.random_bool(0.5) { max } else { 0.0 };
            }
            picked
        }
        AugmentKind::Blackout => {
            if count == 0 {
                return (out, Vec::new());
            }
            let start = rng.random_range(0..=dim - count);
            out.features[start..start + count].iter_mut().for_each(|v| *v = 0.0);
            (start..start + count).collect()
        }
    };
    (out, touched)
}

/// Fixed affine covariate shift: `scale * Q x + bias` plus fresh noise, where
/// `Q` is a seeded random orthogonal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftMap {
    dim: usize,
    rotation: Vec<f64>,
    pub scale: f64,
    pub bias: f64,
    noise: Normal<f64>,
    seed: u64,
}

impl ShiftMap {
    pub fn new(dim: usize, noise_sigma: f64, seed: u64) -> Result<Self> {
        let noise = Normal::new(0.0, noise_sigma).map_err(|e| Cb2mError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            dim,
            rotation: random_orthogonal(dim, &mut rng_for(seed, stream::SHIFT_MAP)),
            scale: 1.3,
            bias: 0.2,
            noise,
            seed,
        })
    }

    /// Maps every sample; `noise_stream` selects the extra-noise draw so that
    /// different splits get independent noise.
    pub fn apply(&self, samples: &[Sample], noise_stream: u64) -> Vec<Sample> {
        let mut rng = rng_for(self.seed ^ noise_stream.wrapping_mul(0x9e37_79b9_7f4a_7c15), stream::SHIFT_NOISE);
        samples
            .iter()
            .map(|s| {
                let mut out = s.clone();
                out.features = self
                    .rotation
                    .chunks_exact(self.dim)
                    .map(|row| {
                        let rotated: f64 = row.iter().zip(&s.features).map(|(q, x)| q * x).sum();
                        self.scale * rotated + self.bias + self.noise.sample(&mut rng)
                    })
                    .collect();
                out
            })
            .collect()
    }
}

/// Gram-Schmidt on a Gaussian matrix; returns row-major `dim x dim`.
fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let dot: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(x, q)| *x -= dot * q);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows.concat()
}

/// Shifts the test split and draws a shifted pool of `n_val` fresh samples.
/// Train and val stay in the source domain.
pub fn shift(d: &SplitDataset, seed: u64) -> Result<SplitDataset> {
    let map = ShiftMap::new(d.n_features(), d.meta.noise_sigma, seed)?;
    let g = Generator::new(&d.meta.clone().with_regime(Regime::Balanced))?;
    let pool_source = g.samples(d.meta.n_val, d.next_id(), stream::POOL);
    Ok(SplitDataset {
        test: map.apply(&d.test, 0),
        pool: map.apply(&pool_source, 1),
        meta: d.meta.clone().with_regime(Regime::Shifted),
        ..d.clone()
    })
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

const SPLITS: [&str; 4] = ["train", "val", "test", "pool"];

/// Writes `spec.json` plus one `<split>.jsonl` per split into `dir`.
pub fn save_dir(d: &SplitDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&d.meta)?)?;
    for (name, split) in SPLITS.iter().zip([&d.train, &d.val, &d.test, &d.pool]) {
        write_jsonl(&dir.join(format!("{name}.jsonl")), split)?;
    }
    Ok(())
}

pub fn load_dir(dir: &Path) -> Result<SplitDataset> {
    let meta: DatasetSpec = serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)?;
    let read = |name: &str| {
        let path = dir.join(format!("{name}.jsonl"));
        if path.exists() {
            read_jsonl(&path)
        } else {
            Ok(Vec::new())
        }
    };
    Ok(SplitDataset {
        train: read("train")?,
        val: read("val")?,
        test: read("test")?,
        pool: read("pool")?,
        meta,
    })
}
