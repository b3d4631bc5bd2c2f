//! HTTP interface for the human intervention loop.
//!
//! The server holds one trained model, one live memory and a fixed stream of
//! samples (a split of a generated dataset). Reviewers list the samples the
//! memory flags, submit concept corrections, and inspect or prune the memory.
//!
//! Every handler takes the memory lock once, so each response reflects a
//! single consistent memory state; mutations take the write lock and are
//! persisted before the lock is released.

mod error;
mod routes;
mod schema;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use cb2m_core::datasets::{load_dir, SplitDataset};
use cb2m_core::memory::{Cb2mConfig, Clock, TwofoldMemory};
use cb2m_core::model::CbmModel;
use cb2m_core::types::{Sample, SampleId};
use serde::{Deserialize, Serialize};

pub use error::ApiError;
pub use routes::{
    router, FlaggedItem, InterventionRequest, InterventionResponse, MemoryEntryView, MemoryView, PredictResponse,
};
pub use schema::schema;

/// Items returned by `GET /flagged` when no limit is given.
pub const DEFAULT_FLAGGED_LIMIT: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] cb2m_core::Cb2mError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invalid service configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamSplit {
    Train,
    Val,
    #[default]
    Test,
    Pool,
}

impl StreamSplit {
    pub fn select(self, d: SplitDataset) -> Vec<Sample> {
        match self {
            Self::Train => d.train,
            Self::Val => d.val,
            Self::Test => d.test,
            Self::Pool => d.pool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    /// Detection hyperparameters; `t_a` is kept for reference only, since
    /// accepted interventions are stored unconditionally.
    pub detection: Cb2mConfig,
    /// Distance within which a memorized intervention is reused.
    pub generalization_t_d: f64,
    /// Expose ground-truth concepts in `/flagged` (debugging only).
    #[serde(default)]
    pub oracle_reveal: bool,
    /// Dataset directory holding the served stream.
    pub data_dir: PathBuf,
    #[serde(default)]
    pub split: StreamSplit,
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?).map_err(cb2m_core::Cb2mError::from)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        self.detection.validate()?;
        if self.generalization_t_d.is_nan() || self.generalization_t_d < 0.0 {
            return Err(ServiceError::Config(format!(
                "generalization_t_d must be >= 0, got {}",
                self.generalization_t_d
            )));
        }
        Ok(())
    }
}

pub(crate) struct Stream {
    samples: Vec<Sample>,
    by_id: HashMap<SampleId, usize>,
}

impl Stream {
    fn new(samples: Vec<Sample>) -> Self {
        let by_id = samples.iter().enumerate().map(|(i, x)| (x.id, i)).collect();
        Self { samples, by_id }
    }

    pub(crate) fn get(&self, id: SampleId) -> Option<&Sample> {
        self.by_id.get(&id).map(|&i| &self.samples[i])
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter()
    }
}

/// Shared server state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    pub(crate) model: Option<Arc<CbmModel>>,
    pub(crate) memory: Arc<RwLock<TwofoldMemory>>,
    pub(crate) stream: Arc<Stream>,
    pub(crate) detection: Cb2mConfig,
    pub(crate) generalization_t_d: f64,
    pub(crate) oracle_reveal: bool,
    pub(crate) memory_path: Option<PathBuf>,
}

impl AppState {
    /// State over an explicit stream. Without a model every inference
    /// endpoint answers 503; the memory endpoints keep working.
    pub fn new(
        model: Option<CbmModel>,
        memory: TwofoldMemory,
        stream: Vec<Sample>,
        cfg: &ServiceConfig,
    ) -> Result<Self, ServiceError> {
        cfg.validate()?;
        if let Some(m) = &model {
            if memory.width() != m.bottleneck.hidden_width() || memory.n_concepts() != m.bottleneck.n_concepts() {
                return Err(ServiceError::Config(format!(
                    "memory is for H={}, C={} but the model has H={}, C={}",
                    memory.width(),
                    memory.n_concepts(),
                    m.bottleneck.hidden_width(),
                    m.bottleneck.n_concepts()
                )));
            }
        }
        Ok(Self {
            model: model.map(Arc::new),
            memory: Arc::new(RwLock::new(memory.with_clock(Clock::Wall))),
            stream: Arc::new(Stream::new(stream)),
            detection: cfg.detection,
            generalization_t_d: cfg.generalization_t_d,
            oracle_reveal: cfg.oracle_reveal,
            memory_path: None,
        })
    }

    /// Writes the memory to `path` after every mutation.
    pub fn persist_to(mut self, path: PathBuf) -> Self {
        self.memory_path = Some(path);
        self
    }

    /// Loads model, memory and stream from disk. A missing memory file starts
    /// an empty memory that is created on the first mutation.
    pub fn from_files(
        model_path: Option<&Path>,
        memory_path: Option<&Path>,
        cfg: &ServiceConfig,
    ) -> Result<Self, ServiceError> {
        let model = model_path.map(CbmModel::load).transpose()?;
        let memory = match (memory_path, &model) {
            (Some(p), _) if p.exists() => TwofoldMemory::load(p)?,
            (_, Some(m)) => TwofoldMemory::for_model(m),
            (_, None) => TwofoldMemory::new(0, 0),
        };
        let stream = cfg.split.select(load_dir(&cfg.data_dir)?);
        let state = Self::new(model, memory, stream, cfg)?;
        Ok(match memory_path {
            Some(p) => state.persist_to(p.to_path_buf()),
            None => state,
        })
    }

    pub fn memory_snapshot(&self) -> TwofoldMemory {
        self.memory.read().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

pub async fn serve(state: AppState, addr: SocketAddr) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await?;
    Ok(())
}
