//! Two-fold memory of model mistakes and the interventions that fixed them.
//!
//! Every entry holds the bottleneck encoding of a mistake. Entries that also
//! carry an intervention form the intervention memory; the entry itself is
//! the association between the two. All queries are exact linear scans.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Cb2mError, Result};
use crate::model::CbmModel;
use crate::types::{l2_distance, Encoding, Intervention, Sample, SampleId};

pub const MEMORY_MAGIC: &str = "CB2M-MEM-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntryId(pub u64);

impl fmt::Display for EntryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub entry_id: EntryId,
    pub encoding: Encoding,
    pub intervention: Option<Intervention>,
    pub source_sample_id: SampleId,
    /// Milliseconds since the Unix epoch, or an insertion tick for memories
    /// using the logical clock.
    pub created_at: u64,
}

/// Detection and generalization hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cb2mConfig {
    pub k: usize,
    pub t_d: f64,
    pub t_a: f64,
}

impl Cb2mConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Cb2mError::InvalidConfig("k must be at least 1".into()));
        }
        if self.t_d.is_nan() || self.t_d < 0.0 {
            return Err(Cb2mError::InvalidConfig(format!("t_d must be >= 0, got {}", self.t_d)));
        }
        if !(0.0..=1.0).contains(&self.t_a) {
            return Err(Cb2mError::InvalidConfig(format!("t_a must lie in [0, 1], got {}", self.t_a)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Clock {
    /// `created_at` is the entry's insertion tick; keeps files reproducible.
    #[default]
    Logical,
    Wall,
}

#[derive(Debug, Clone)]
pub struct TwofoldMemory {
    width: usize,
    n_concepts: usize,
    entries: Vec<MemoryEntry>,
    next_id: u64,
    clock: Clock,
}

impl PartialEq for TwofoldMemory {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width && self.n_concepts == other.n_concepts && self.entries == other.entries
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    #[serde(rename = "H")]
    width: usize,
    #[serde(rename = "C")]
    n_concepts: usize,
    /// Keeps deleted ids retired across save/load.
    #[serde(default)]
    next_id: u64,
}

impl TwofoldMemory {
    /// Empty memory for encodings of width `width` and interventions over
    /// `n_concepts` concepts.
    pub fn new(width: usize, n_concepts: usize) -> Self {
        Self {
            width,
            n_concepts,
            entries: Vec::new(),
            next_id: 0,
            clock: Clock::Logical,
        }
    }

    pub fn for_model(model: &CbmModel) -> Self {
        Self::new(model.bottleneck.hidden_width(), model.bottleneck.n_concepts())
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn get(&self, id: EntryId) -> Option<&MemoryEntry> {
        self.entries.iter().find(|e| e.entry_id == id)
    }

    /// Number of stored interventions.
    pub fn n_interventions(&self) -> usize {
        self.entries.iter().filter(|e| e.intervention.is_some()).count()
    }

    fn check_query(&self, q: &Encoding) -> Result<()> {
        check_len("encoding", self.width, q.len())
    }

    fn push(&mut self, encoding: Encoding, intervention: Option<Intervention>, source: SampleId) -> Result<EntryId> {
        self.check_query(&encoding)?;
        if let Some(i) = &intervention {
            i.check_bounds(self.n_concepts)?;
        }
        let entry_id = EntryId(self.next_id);
        self.next_id += 1;
        let created_at = match self.clock {
            Clock::Logical => entry_id.0,
            Clock::Wall => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
        };
        self.entries.push(MemoryEntry {
            entry_id,
            encoding,
            intervention,
            source_sample_id: source,
            created_at,
        });
        Ok(entry_id)
    }

    pub fn add_mistake(&mut self, encoding: Encoding, source: SampleId) -> Result<EntryId> {
        self.push(encoding, None, source)
    }

    pub fn add_intervention(&mut self, encoding: Encoding, intervention: Intervention, source: SampleId) -> Result<EntryId> {
        self.push(encoding, Some(intervention), source)
    }

    pub fn remove_entry(&mut self, id: EntryId) -> bool {
        match self.entries.iter().position(|e| e.entry_id == id) {
            Some(pos) => {
                self.entries.remove(pos);
                true
            }
            None => false,
        }
    }

    /// Keeps only entries for which `keep` returns true.
    pub fn retain(&mut self, keep: impl FnMut(&MemoryEntry) -> bool) {
        self.entries.retain(keep);
    }

    /// Distances from `q` to every entry, in entry order.
    fn distances<'a>(&'a self, q: &'a Encoding) -> impl Iterator<Item = (&'a MemoryEntry, f64)> + 'a {
        self.entries
            .iter()
            .map(move |e| (e, l2_distance(q.values(), e.encoding.values())))
    }

    /// True iff at least `k` stored mistakes lie within `t_d` of `q`.
    pub fn detect_mistake(&self, q: &Encoding, cfg: &Cb2mConfig) -> Result<bool> {
        cfg.validate()?;
        self.check_query(q)?;
        let mut found = 0;
        for (_, d) in self.distances(q) {
            if d <= cfg.t_d {
                found += 1;
                if found >= cfg.k {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }

    /// Negative distance to the `k`-th nearest stored mistake; `-inf` when the
    /// memory holds fewer than `k` entries. `detect_mistake` holds exactly when
    /// this score is at least `-t_d`.
    pub fn detection_score(&self, q: &Encoding, k: usize) -> Result<f64> {
        self.check_query(q)?;
        if k == 0 {
            return Err(Cb2mError::InvalidConfig("k must be at least 1".into()));
        }
        if self.entries.len() < k {
            return Ok(f64::NEG_INFINITY);
        }
        let mut d: Vec<f64> = self.distances(q).map(|(_, d)| d).collect();
        let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
        Ok(-*kth)
    }

    /// Sorted distances from `q` to its `k` nearest entries (fewer if the
    /// memory is smaller).
    pub fn nearest_distances(&self, q: &Encoding, k: usize) -> Result<Vec<f64>> {
        self.check_query(q)?;
        let mut d: Vec<f64> = self.distances(q).map(|(_, d)| d).collect();
        d.sort_by(f64::total_cmp);
        d.truncate(k);
        Ok(d)
    }

    /// Nearest entry that carries an intervention, ties broken by the smaller
    /// entry id.
    pub fn nearest_intervention(&self, q: &Encoding) -> Result<Option<(&MemoryEntry, f64)>> {
        self.check_query(q)?;
        let mut best: Option<(&MemoryEntry, f64)> = None;
        for e in self.entries.iter().filter(|e| e.intervention.is_some()) {
            let d = l2_distance(q.values(), e.encoding.values());
            let better = match best {
                None => true,
                Some((b, bd)) => d < bd || (d == bd && e.entry_id < b.entry_id),
            };
            if better {
                best = Some((e, d));
            }
        }
        Ok(best)
    }

    /// The intervention of the nearest intervention entry, if it lies within `t_d`.
    pub fn generalize(&self, q: &Encoding, t_d: f64) -> Result<Option<(&Intervention, EntryId)>> {
        Ok(self
            .nearest_intervention(q)?
            .filter(|&(_, d)| d <= t_d)
            .and_then(|(e, _)| e.intervention.as_ref().map(|i| (i, e.entry_id))))
    }

    /// Stores the encoding of every sample in `val` that the model gets wrong
    /// while its concept accuracy is below `t_a`. Returns the number added.
    pub fn fill_for_detection(&mut self, model: &CbmModel, val: &[Sample], t_a: f64) -> Result<usize> {
        self.fill(model, val, t_a, false)
    }

    /// Same selection as [`Self::fill_for_detection`], attaching the full
    /// ground-truth intervention to every stored mistake.
    pub fn fill_for_generalization(&mut self, model: &CbmModel, val: &[Sample], t_a: f64) -> Result<usize> {
        self.fill(model, val, t_a, true)
    }

    fn fill(&mut self, model: &CbmModel, val: &[Sample], t_a: f64, with_intervention: bool) -> Result<usize> {
        let mut added = 0;
        for x in val {
            let pred = model.predict(x)?;
            let acc = crate::model::concept_accuracy(&pred.concepts, &x.concepts_true);
            if pred.label != x.label_true && acc < t_a {
                let intervention = with_intervention.then(|| x.full_truth_intervention());
                self.push(pred.encoding, intervention, x.id)?;
                added += 1;
            }
        }
        Ok(added)
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut w = BufWriter::new(w);
        serde_json::to_writer(
            &mut w,
            &Header {
                format: MEMORY_MAGIC.to_string(),
                width: self.width,
                n_concepts: self.n_concepts,
                next_id: self.next_id,
            },
        )?;
        w.write_all(b"\n")?;
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header: Header = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Cb2mError::Format("empty memory file".into())),
        };
        if header.format != MEMORY_MAGIC {
            return Err(Cb2mError::Format(format!(
                "expected memory format {MEMORY_MAGIC}, found {}",
                header.format
            )));
        }
        let mut mem = Self::new(header.width, header.n_concepts);
        mem.next_id = header.next_id;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: MemoryEntry = serde_json::from_str(&line)?;
            check_len("stored encoding", mem.width, entry.encoding.len())?;
            if let Some(i) = &entry.intervention {
                i.check_bounds(mem.n_concepts)?;
            }
            if mem.get(entry.entry_id).is_some() {
                return Err(Cb2mError::Format(format!("duplicate entry id {}", entry.entry_id)));
            }
            mem.next_id = mem.next_id.max(entry.entry_id.0 + 1);
            mem.entries.push(entry);
        }
        Ok(mem)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(File::open(path)?)
    }
}
