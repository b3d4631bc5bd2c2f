//! Domain values shared by every module: samples, concept vectors,
//! interventions and bottleneck encodings.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Cb2mError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(pub u64);

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A labelled input: features, binary ground-truth concepts and class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: SampleId,
    pub features: Vec<f64>,
    pub concepts_true: Vec<u8>,
    pub label_true: usize,
}

impl Sample {
    pub fn new(id: SampleId, features: Vec<f64>, concepts_true: Vec<u8>, label_true: usize) -> Result<Self> {
        let sample = Self {
            id,
            features,
            concepts_true,
            label_true,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.features.iter().find(|v| !v.is_finite()) {
            return Err(Cb2mError::InvalidValue(format!(
                "sample {}: non-finite feature {bad}",
                self.id
            )));
        }
        if let Some(bad) = self.concepts_true.iter().find(|&&c| c > 1) {
            return Err(Cb2mError::InvalidValue(format!(
                "sample {}: concept label {bad} is not binary",
                self.id
            )));
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn n_concepts(&self) -> usize {
        self.concepts_true.len()
    }

    /// Ground-truth concepts as a concept vector (exact 0.0 / 1.0 entries).
    pub fn true_concept_vector(&self) -> ConceptVector {
        ConceptVector(self.concepts_true.iter().map(|&c| f64::from(c)).collect())
    }

    /// Intervention overwriting every concept with its ground-truth value.
    pub fn full_truth_intervention(&self) -> Intervention {
        Intervention {
            entries: self
                .concepts_true
                .iter()
                .enumerate()
                .map(|(j, &c)| (j, f64::from(c)))
                .collect(),
        }
    }
}

/// Concept values in `[0, 1]`: predicted probabilities or intervened values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptVector(Vec<f64>);

impl ConceptVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Cb2mError::InvalidValue(format!(
                "concept value {bad} outside [0, 1]"
            )));
        }
        Ok(Self(values))
    }

    /// Caller guarantees every value lies in `[0, 1]`.
    pub(crate) fn from_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionEntry {
    pub index: usize,
    pub value: f64,
}

/// A non-empty set of `(concept index, corrected value)` pairs, kept sorted
/// by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<InterventionEntry>", into = "Vec<InterventionEntry>")]
pub struct Intervention {
    entries: Vec<(usize, f64)>,
}

impl Intervention {
    pub fn new(entries: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let mut entries: Vec<(usize, f64)> = entries.into_iter().collect();
        if entries.is_empty() {
            return Err(Cb2mError::InvalidIntervention("empty intervention".into()));
        }
        entries.sort_by_key(|&(index, _)| index);
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Cb2mError::InvalidIntervention(format!(
                "duplicate concept index {}",
                w[0].0
            )));
        }
        if let Some(&(index, value)) = entries.iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
            return Err(Cb2mError::InvalidIntervention(format!(
                "value {value} for concept {index} outside [0, 1]"
            )));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(j, _)| j)
    }

    pub fn value(&self, index: usize) -> Option<f64> {
        self.entries
            .binary_search_by_key(&index, |&(j, _)| j)
            .ok()
            .map(|pos| self.entries[pos].1)
    }

    /// Fails if any index is not below `n_concepts`.
    pub fn check_bounds(&self, n_concepts: usize) -> Result<()> {
        match self.entries.last() {
            Some(&(index, _)) if index >= n_concepts => Err(Cb2mError::IndexOutOfRange {
                index,
                len: n_concepts,
            }),
            _ => Ok(()),
        }
    }
}

impl TryFrom<Vec<InterventionEntry>> for Intervention {
    type Error = Cb2mError;

    fn try_from(entries: Vec<InterventionEntry>) -> Result<Self> {
        Self::new(entries.into_iter().map(|e| (e.index, e.value)))
    }
}

impl From<Intervention> for Vec<InterventionEntry> {
    fn from(i: Intervention) -> Self {
        i.entries
            .into_iter()
            .map(|(index, value)| InterventionEntry { index, value })
            .collect()
    }
}

/// Hidden activation feeding the last bottleneck layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Encoding(Vec<f64>);

impl Encoding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Cb2mError::InvalidValue(format!("non-finite encoding entry {bad}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Overwrites the intervened concepts of `c`, leaving the rest untouched.
pub fn apply_intervention(c: &ConceptVector, i: &Intervention) -> Result<ConceptVector> {
    i.check_bounds(c.len())?;
    let mut values = c.0.clone();
    for &(j, v) in &i.entries {
        values[j] = v;
    }
    Ok(ConceptVector(values))
}

pub fn euclidean_distance(a: &Encoding, b: &Encoding) -> Result<f64> {
    check_len("encoding", a.len(), b.len())?;
    Ok(l2_distance(&a.0, &b.0))
}

pub(crate) fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
