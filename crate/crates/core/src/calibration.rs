//! Hyperparameter selection for the memory.
//!
//! Detection parameters `(k, t_d, t_a)` come from a grid search maximizing F1
//! of mistake prediction. The generalization threshold is the largest
//! distance at which reapplying memorized interventions does not lower class
//! accuracy on the calibration split.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Cb2mError, Result};
use crate::memory::{Cb2mConfig, EntryId, TwofoldMemory};
use crate::model::CbmModel;
use crate::types::{apply_intervention, l2_distance, ConceptVector, Encoding, Sample};

/// Prediction through the memory: the nearest memorized intervention within
/// `t_d` (if any) is applied before the predictor runs.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryPrediction {
    pub label: usize,
    pub class_probs: Vec<f64>,
    pub concepts: ConceptVector,
    pub encoding: Encoding,
    pub used_entry: Option<EntryId>,
}

pub fn predict_with_memory(model: &CbmModel, mem: &TwofoldMemory, x: &Sample, t_d: f64) -> Result<MemoryPrediction> {
    let base = model.predict(x)?;
    let (concepts, used_entry) = match mem.generalize(&base.encoding, t_d)? {
        Some((i, id)) => (apply_intervention(&base.concepts, i)?, Some(id)),
        None => {
            return Ok(MemoryPrediction {
                label: base.label,
                class_probs: base.class_probs,
                concepts: base.concepts,
                encoding: base.encoding,
                used_entry: None,
            })
        }
    };
    let (label, class_probs) = model.predictor.predict_class(&concepts)?;
    Ok(MemoryPrediction {
        label,
        class_probs,
        concepts,
        encoding: base.encoding,
        used_entry,
    })
}

/// Per-sample outcome of running a dataset through the memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryApplication {
    pub predictions: Vec<usize>,
    pub concepts: Vec<ConceptVector>,
    pub applied: Vec<Option<EntryId>>,
}

impl MemoryApplication {
    pub fn mask(&self) -> Vec<bool> {
        self.applied.iter().map(Option::is_some).collect()
    }

    /// Number of samples that received a memorized intervention.
    pub fn n_applied(&self) -> usize {
        self.applied.iter().filter(|a| a.is_some()).count()
    }
}

pub fn apply_memory_to_dataset(
    model: &CbmModel,
    data: &[Sample],
    mem: &TwofoldMemory,
    t_d: f64,
) -> Result<MemoryApplication> {
    let mut out = MemoryApplication {
        predictions: Vec::with_capacity(data.len()),
        concepts: Vec::with_capacity(data.len()),
        applied: Vec::with_capacity(data.len()),
    };
    for x in data {
        let p = predict_with_memory(model, mem, x, t_d)?;
        out.predictions.push(p.label);
        out.concepts.push(p.concepts);
        out.applied.push(p.used_entry);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionGrid {
    pub k_values: Vec<usize>,
    pub t_a_values: Vec<f64>,
    /// `t_d` candidates are these multiples of the mean pairwise encoding
    /// distance on the memory split.
    pub t_d_multipliers: Vec<f64>,
}

impl Default for DetectionGrid {
    fn default() -> Self {
        Self {
            k_values: vec![1, 2, 3, 4, 5],
            t_a_values: vec![0.85, 0.95, 1.0],
            t_d_multipliers: vec![0.25, 0.5, 0.75, 1.0, 1.25, 1.5],
        }
    }
}

impl DetectionGrid {
    fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.t_a_values.is_empty() || self.t_d_multipliers.is_empty() {
            return Err(Cb2mError::InvalidConfig("detection grid has an empty axis".into()));
        }
        if self.k_values.contains(&0) {
            return Err(Cb2mError::InvalidConfig("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub k: usize,
    pub t_d: f64,
    pub t_a: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub chosen: Cb2mConfig,
    pub objective: f64,
    pub mean_encoding_distance: f64,
    pub table: Vec<GridCell>,
}

/// Mean Euclidean distance over all unordered pairs; zero for fewer than two.
pub fn mean_pairwise_distance(encodings: &[Encoding]) -> f64 {
    let n = encodings.len();
    if n < 2 {
        return 0.0;
    }
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            encodings[i + 1..]
                .iter()
                .map(|b| l2_distance(encodings[i].values(), b.values()))
                .sum::<f64>()
        })
        .sum();
    total / (n * (n - 1) / 2) as f64
}

/// Grid search over `(k, t_d, t_a)`. For each `t_a` the memory is filled from
/// `val`; each cell is scored by F1 of mistake prediction on `train`. Ties go
/// to the smaller `t_d`, then the smaller `k`, then the smaller `t_a`.
pub fn calibrate_detection(
    model: &CbmModel,
    train: &[Sample],
    val: &[Sample],
    grid: &DetectionGrid,
) -> Result<CalibrationReport> {
    grid.validate()?;
    let val_encodings: Vec<Encoding> = val
        .iter()
        .map(|x| model.bottleneck.encode(x))
        .collect::<Result<_>>()?;
    let mean_distance = mean_pairwise_distance(&val_encodings);
    let t_d_values: Vec<f64> = grid.t_d_multipliers.iter().map(|m| m * mean_distance).collect();

    let train_preds = model.predict_all(train)?;
    let wrong: Vec<bool> = train_preds
        .iter()
        .zip(train)
        .map(|(p, x)| p.label != x.label_true)
        .collect();
    let max_k = *grid.k_values.iter().max().expect("validated non-empty");

    let blocks: Vec<Vec<GridCell>> = grid
        .t_a_values
        .par_iter()
        .map(|&t_a| -> Result<Vec<GridCell>> {
            let mut mem = TwofoldMemory::for_model(model);
            mem.fill_for_detection(model, val, t_a)?;
            let nearest: Vec<Vec<f64>> = train_preds
                .iter()
                .map(|p| mem.nearest_distances(&p.encoding, max_k))
                .collect::<Result<_>>()?;
            let mut cells = Vec::with_capacity(grid.k_values.len() * t_d_values.len());
            for &k in &grid.k_values {
                for &t_d in &t_d_values {
                    let flagged: Vec<bool> = nearest.iter().map(|d| d.len() >= k && d[k - 1] <= t_d).collect();
                    cells.push(GridCell {
                        k,
                        t_d,
                        t_a,
                        f1: crate::metrics::f1_score(&flagged, &wrong),
                    });
                }
            }
            Ok(cells)
        })
        .collect::<Result<_>>()?;
    let table: Vec<GridCell> = blocks.into_iter().flatten().collect();

    let best = table
        .iter()
        .copied()
        .reduce(|best, c| {
            let better = c.f1 > best.f1
                || (c.f1 == best.f1
                    && (c.t_d, c.k, c.t_a).partial_cmp(&(best.t_d, best.k, best.t_a)) == Some(std::cmp::Ordering::Less));
            if better {
                c
            } else {
                best
            }
        })
        .expect("grid validated non-empty");
    Ok(CalibrationReport {
        chosen: Cb2mConfig {
            k: best.k,
            t_d: best.t_d,
            t_a: best.t_a,
        },
        objective: best.f1,
        mean_encoding_distance: mean_distance,
        table,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationCalibration {
    pub t_d: f64,
    /// Class accuracy on the calibration split without the memory.
    pub base_accuracy: f64,
    /// Class accuracy with memorized interventions applied at `t_d`.
    pub accuracy: f64,
    /// Distinct candidate thresholds examined (including 0).
    pub n_candidates: usize,
}

/// Largest candidate `t_d` whose memory-applied class accuracy on `train` is
/// at least the unmodified accuracy. Candidates are 0 and every training
/// sample's distance to its nearest intervention entry.
pub fn calibrate_generalization(model: &CbmModel, train: &[Sample], mem: &TwofoldMemory) -> Result<GeneralizationCalibration> {
    let n = train.len().max(1) as f64;
    // (distance to nearest intervention, change in correctness when applied)
    let mut effects: Vec<(f64, i64)> = Vec::new();
    let mut base_correct = 0i64;
    for x in train {
        let p = model.predict(x)?;
        let ok = i64::from(p.label == x.label_true);
        base_correct += ok;
        if let Some((entry, d)) = mem.nearest_intervention(&p.encoding)? {
            let i = entry.intervention.as_ref().expect("nearest_intervention only yields intervention entries");
            let (label, _) = model.predictor.predict_class(&apply_intervention(&p.concepts, i)?)?;
            effects.push((d, i64::from(label == x.label_true) - ok));
        }
    }
    effects.sort_by(|a, b| a.0.total_cmp(&b.0));

    // net correctness change for every distinct distance, ascending
    let mut steps: Vec<(f64, i64)> = vec![(0.0, 0)];
    let mut running = 0i64;
    for (d, delta) in effects {
        running += delta;
        match steps.last_mut() {
            Some(last) if last.0 == d => last.1 = running,
            _ => steps.push((d, running)),
        }
    }
    let n_candidates = steps.len();
    let &(t_d, gain) = steps
        .iter()
        .rev()
        .find(|(_, gain)| *gain >= 0)
        .unwrap_or(&(0.0, 0));
    Ok(GeneralizationCalibration {
        t_d,
        base_accuracy: base_correct as f64 / n,
        accuracy: (base_correct + gain) as f64 / n,
        n_candidates,
    })
}

pub fn calibrate_generalization_threshold(model: &CbmModel, train: &[Sample], mem: &TwofoldMemory) -> Result<f64> {
    Ok(calibrate_generalization(model, train, mem)?.t_d)
}
