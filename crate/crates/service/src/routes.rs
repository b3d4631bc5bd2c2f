use std::path::Path;
use std::sync::{PoisonError, RwLockReadGuard, RwLockWriteGuard};

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use cb2m_core::calibration::predict_with_memory;
use cb2m_core::memory::{EntryId, TwofoldMemory};
use cb2m_core::model::CbmModel;
use cb2m_core::types::{apply_intervention, Intervention, InterventionEntry, Sample, SampleId};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::{AppState, DEFAULT_FLAGGED_LIMIT};

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/flagged", get(flagged))
        .route("/interventions", post(post_intervention))
        .route("/memory", get(list_memory))
        .route("/memory/{entry_id}", delete(delete_entry))
        .route("/predict/{sample_id}", get(predict))
        .route("/schema", get(|| async { Json(crate::schema()) }))
        .with_state(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedItem {
    pub sample_id: SampleId,
    /// Binarized concept predictions (`p >= 0.5`).
    pub concepts: Vec<u8>,
    pub concept_probs: Vec<f64>,
    pub class: usize,
    pub class_probs: Vec<f64>,
    pub detection_score: f64,
    pub nearest_distance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concepts_true: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub class: usize,
    pub class_probs: Vec<f64>,
    pub concepts: Vec<f64>,
    pub intervened: bool,
    pub used_entry: Option<EntryId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRequest {
    pub sample_id: SampleId,
    pub entries: Vec<InterventionEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResponse {
    pub entry_id: EntryId,
    pub new_prediction: PredictResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntryView {
    pub entry_id: EntryId,
    /// `"mistake"` or `"intervention"`.
    pub kind: String,
    pub source_sample_id: SampleId,
    pub intervention: Option<Intervention>,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryView {
    pub width: usize,
    pub n_concepts: usize,
    pub size: usize,
    pub entries: Vec<MemoryEntryView>,
}

#[derive(Debug, Deserialize)]
struct FlaggedQuery {
    limit: Option<usize>,
}

impl AppState {
    fn model(&self) -> ApiResult<&CbmModel> {
        self.model.as_deref().ok_or_else(ApiError::no_model)
    }

    fn sample(&self, id: SampleId) -> ApiResult<&Sample> {
        self.stream
            .get(id)
            .ok_or_else(|| ApiError::not_found(format!("unknown sample {id}")))
    }

    fn read(&self) -> RwLockReadGuard<'_, TwofoldMemory> {
        self.memory.read().unwrap_or_else(PoisonError::into_inner)
    }

    fn write(&self) -> RwLockWriteGuard<'_, TwofoldMemory> {
        self.memory.write().unwrap_or_else(PoisonError::into_inner)
    }

    /// Applies `change` to a copy of the memory, persists the copy and only
    /// then publishes it, so a failed write leaves the served memory intact.
    fn mutate<T>(&self, change: impl FnOnce(&mut TwofoldMemory) -> ApiResult<T>) -> ApiResult<T> {
        let mut guard = self.write();
        let mut next = guard.clone();
        let out = change(&mut next)?;
        if let Some(path) = &self.memory_path {
            persist(&next, path).map_err(|e| ApiError::internal(format!("persisting memory: {e}")))?;
        }
        *guard = next;
        Ok(out)
    }
}

fn persist(mem: &TwofoldMemory, path: &Path) -> cb2m_core::Result<()> {
    let tmp = path.with_extension("tmp");
    mem.save(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

async fn flagged(
    State(state): State<AppState>,
    query: Result<Query<FlaggedQuery>, QueryRejection>,
) -> ApiResult<Json<Vec<FlaggedItem>>> {
    let Query(query) = query?;
    let limit = query.limit.unwrap_or(DEFAULT_FLAGGED_LIMIT);
    let model = state.model()?;
    let cfg = state.detection;
    let mem = state.read();
    let mut items = Vec::new();
    for x in state.stream.iter() {
        let p = model.predict(x)?;
        if !mem.detect_mistake(&p.encoding, &cfg)? {
            continue;
        }
        // A flagged query has at least k entries in memory, so both are finite.
        let detection_score = mem.detection_score(&p.encoding, cfg.k)?;
        let nearest_distance = mem.nearest_distances(&p.encoding, 1)?[0];
        items.push(FlaggedItem {
            sample_id: x.id,
            concepts: p.concepts.values().iter().map(|&v| u8::from(v >= 0.5)).collect(),
            concept_probs: p.concepts.into_inner(),
            class: p.label,
            class_probs: p.class_probs,
            detection_score,
            nearest_distance,
            concepts_true: state.oracle_reveal.then(|| x.concepts_true.clone()),
        });
    }
    drop(mem);
    items.sort_by(|a, b| {
        b.detection_score
            .total_cmp(&a.detection_score)
            .then(a.sample_id.cmp(&b.sample_id))
    });
    items.truncate(limit);
    Ok(Json(items))
}

async fn predict(
    State(state): State<AppState>,
    id: Result<UrlPath<u64>, PathRejection>,
) -> ApiResult<Json<PredictResponse>> {
    let UrlPath(id) = id?;
    let model = state.model()?;
    let x = state.sample(SampleId(id))?;
    let p = predict_with_memory(model, &state.read(), x, state.generalization_t_d)?;
    Ok(Json(PredictResponse {
        class: p.label,
        class_probs: p.class_probs,
        concepts: p.concepts.into_inner(),
        intervened: p.used_entry.is_some(),
        used_entry: p.used_entry,
    }))
}

async fn post_intervention(
    State(state): State<AppState>,
    body: Result<Json<InterventionRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<InterventionResponse>)> {
    let model = state.model()?;
    let Json(req) = body?;
    let x = state.sample(req.sample_id)?;
    let intervention = Intervention::try_from(req.entries)
        .and_then(|i| i.check_bounds(model.bottleneck.n_concepts()).map(|()| i))
        .map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let base = model.predict(x)?;
    let concepts = apply_intervention(&base.concepts, &intervention)?;
    let (class, class_probs) = model.predictor.predict_class(&concepts)?;
    let entry_id = state.mutate(|mem| Ok(mem.add_intervention(base.encoding, intervention, x.id)?))?;
    Ok((
        StatusCode::CREATED,
        Json(InterventionResponse {
            entry_id,
            new_prediction: PredictResponse {
                class,
                class_probs,
                concepts: concepts.into_inner(),
                intervened: true,
                used_entry: Some(entry_id),
            },
        }),
    ))
}

async fn list_memory(State(state): State<AppState>) -> Json<MemoryView> {
    let mem = state.read();
    let entries = mem
        .entries()
        .iter()
        .map(|e| MemoryEntryView {
            entry_id: e.entry_id,
            kind: if e.intervention.is_some() { "intervention" } else { "mistake" }.to_string(),
            source_sample_id: e.source_sample_id,
            intervention: e.intervention.clone(),
            created_at: e.created_at,
        })
        .collect();
    Json(MemoryView {
        width: mem.width(),
        n_concepts: mem.n_concepts(),
        size: mem.len(),
        entries,
    })
}

async fn delete_entry(State(state): State<AppState>, id: Result<UrlPath<u64>, PathRejection>) -> ApiResult<StatusCode> {
    let UrlPath(id) = id?;
    state.mutate(|mem| {
        if mem.remove_entry(EntryId(id)) {
            Ok(StatusCode::NO_CONTENT)
        } else {
            Err(ApiError::not_found(format!("unknown memory entry {id}")))
        }
    })
}
