use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use cb2m_core::datasets::{generate, save_dir, DatasetSpec, SplitDataset};
use cb2m_core::memory::{Cb2mConfig, EntryId, TwofoldMemory};
use cb2m_core::model::{CbmModel, CbmTrainConfig};
use cb2m_core::types::{Sample, SampleId};
use cb2m_service::{router, AppState, FlaggedItem, InterventionResponse, MemoryView, PredictResponse, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    data: SplitDataset,
    model: CbmModel,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = DatasetSpec {
            n_train: 800,
            n_val: 100,
            n_test: 200,
            seed: 11,
            ..DatasetSpec::default()
        };
        let data = generate(&spec).unwrap();
        let model = CbmModel::train(&data.train, 10, &CbmTrainConfig::default()).unwrap();
        Fixture { data, model }
    })
}

fn config(k: usize, t_d: f64, generalization_t_d: f64) -> ServiceConfig {
    ServiceConfig {
        detection: Cb2mConfig { k, t_d, t_a: 1.0 },
        generalization_t_d,
        oracle_reveal: false,
        data_dir: "unused".into(),
        split: Default::default(),
    }
}

fn state_with(memory: TwofoldMemory, cfg: &ServiceConfig) -> AppState {
    let f = fixture();
    AppState::new(Some(f.model.clone()), memory, f.data.test.clone(), cfg).unwrap()
}

fn empty_state(cfg: &ServiceConfig) -> AppState {
    state_with(TwofoldMemory::for_model(&fixture().model), cfg)
}

fn test_sample(i: usize) -> &'static Sample {
    &fixture().data.test[i]
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

async fn get<T: serde::de::DeserializeOwned>(app: &Router, uri: &str) -> T {
    let (status, v) = call(app, Method::GET, uri, None).await;
    assert_eq!(status, StatusCode::OK, "{uri}: {v}");
    serde_json::from_value(v).unwrap()
}

async fn post_intervention(app: &Router, sample: SampleId, entries: Value) -> (StatusCode, Value) {
    call(
        app,
        Method::POST,
        "/interventions",
        Some(json!({ "sample_id": sample.0, "entries": entries })),
    )
    .await
}

fn truth_entries(x: &Sample) -> Value {
    x.concepts_true
        .iter()
        .enumerate()
        .map(|(index, &v)| json!({ "index": index, "value": f64::from(v) }))
        .collect()
}

#[tokio::test]
async fn inference_endpoints_need_a_model() {
    let state = AppState::new(None, TwofoldMemory::new(0, 0), fixture().data.test.clone(), &config(1, 1.0, 1.0)).unwrap();
    let app = router(state);
    let id = test_sample(0).id.0;
    for (method, uri, body) in [
        (Method::GET, "/flagged".to_string(), None),
        (Method::GET, format!("/predict/{id}"), None),
        (Method::POST, "/interventions".to_string(), Some(json!({ "sample_id": id, "entries": [] }))),
    ] {
        let (status, v) = call(&app, method, &uri, body).await;
        assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE, "{uri}");
        assert!(v["error"].is_string());
    }
    let mem: MemoryView = get(&app, "/memory").await;
    assert_eq!(mem.size, 0);
}

#[tokio::test]
async fn empty_memory_flags_nothing() {
    let app = router(empty_state(&config(1, 1e9, 1.0)));
    let items: Vec<FlaggedItem> = get(&app, "/flagged").await;
    assert!(items.is_empty());
}

#[tokio::test]
async fn flagged_items_match_the_detector() {
    let f = fixture();
    let mut mem = TwofoldMemory::for_model(&f.model);
    for x in &f.data.val[..20] {
        mem.add_mistake(f.model.bottleneck.encode(x).unwrap(), x.id).unwrap();
    }
    let encodings: Vec<_> = f.data.test.iter().map(|x| f.model.bottleneck.encode(x).unwrap()).collect();
    let cfg = Cb2mConfig { k: 2, t_d: 0.0, t_a: 1.0 };
    let mut d2: Vec<f64> = encodings.iter().map(|q| mem.nearest_distances(q, 2).unwrap()[1]).collect();
    d2.sort_by(f64::total_cmp);
    // Put the threshold between the 30th and 31st closest test samples.
    let t_d = (d2[29] + d2[30]) / 2.0;
    let svc_cfg = config(cfg.k, t_d, 0.0);
    let app = router(state_with(mem.clone(), &svc_cfg));

    let items: Vec<FlaggedItem> = get(&app, "/flagged?limit=1000").await;
    assert_eq!(items.len(), 30);
    for w in items.windows(2) {
        assert!(w[0].detection_score >= w[1].detection_score);
    }
    for item in &items {
        let i = f.data.test.iter().position(|x| x.id == item.sample_id).unwrap();
        let q = &encodings[i];
        let nearest = mem.nearest_distances(q, 2).unwrap();
        assert!(mem.detect_mistake(q, &Cb2mConfig { t_d, ..cfg }).unwrap());
        assert_eq!(item.detection_score, -nearest[1]);
        assert_eq!(item.nearest_distance, nearest[0]);
        assert!(item.concepts_true.is_none());
        let p = f.model.predict(&f.data.test[i]).unwrap();
        assert_eq!(item.class, p.label);
        assert_eq!(item.concept_probs, p.concepts.values());
    }

    let top: Vec<FlaggedItem> = get(&app, "/flagged?limit=5").await;
    assert_eq!(top, items[..5]);
    let none: Vec<FlaggedItem> = get(&app, "/flagged?limit=0").await;
    assert!(none.is_empty());

    let reveal = ServiceConfig {
        oracle_reveal: true,
        ..svc_cfg
    };
    let app = router(state_with(mem, &reveal));
    let items: Vec<FlaggedItem> = get(&app, "/flagged?limit=3").await;
    for item in items {
        let x = f.data.test.iter().find(|x| x.id == item.sample_id).unwrap();
        assert_eq!(item.concepts_true.as_ref(), Some(&x.concepts_true));
    }
}

#[tokio::test]
async fn post_then_predict_round_trip() {
    let f = fixture();
    let app = router(empty_state(&config(1, 1.0, 0.0)));
    let x = test_sample(3);

    let base: PredictResponse = get(&app, &format!("/predict/{}", x.id)).await;
    assert!(!base.intervened);
    assert_eq!(base.used_entry, None);
    assert_eq!(base.class, f.model.predict(x).unwrap().label);

    let (status, v) = post_intervention(&app, x.id, truth_entries(x)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    let resp: InterventionResponse = serde_json::from_value(v).unwrap();
    let on_truth = f.model.predictor.predict_class(&x.true_concept_vector()).unwrap();
    assert_eq!(resp.new_prediction.class, on_truth.0);
    assert_eq!(resp.new_prediction.class_probs, on_truth.1);

    let after: PredictResponse = get(&app, &format!("/predict/{}", x.id)).await;
    assert!(after.intervened);
    assert_eq!(after.used_entry, Some(resp.entry_id));
    assert_eq!(after, resp.new_prediction);

    let mem: MemoryView = get(&app, "/memory").await;
    assert_eq!(mem.size, 1);
    assert_eq!(mem.entries[0].entry_id, resp.entry_id);
    assert_eq!(mem.entries[0].kind, "intervention");
    assert_eq!(mem.entries[0].source_sample_id, x.id);

    // t_d = 0 keeps the correction local to the corrected sample.
    let other: PredictResponse = get(&app, &format!("/predict/{}", test_sample(4).id)).await;
    assert!(!other.intervened);

    let (status, v) = call(&app, Method::DELETE, &format!("/memory/{}", resp.entry_id), None).await;
    assert_eq!((status, v), (StatusCode::NO_CONTENT, Value::Null));
    let (status, _) = call(&app, Method::DELETE, &format!("/memory/{}", resp.entry_id), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let reverted: PredictResponse = get(&app, &format!("/predict/{}", x.id)).await;
    assert_eq!(reverted, base);
}

#[tokio::test]
async fn partial_interventions_touch_only_their_indices() {
    let f = fixture();
    let app = router(empty_state(&config(1, 1.0, 0.0)));
    let x = test_sample(7);
    let base = f.model.predict(x).unwrap();
    let (status, _) = post_intervention(&app, x.id, json!([{ "index": 4, "value": 1.0 }, { "index": 1, "value": 0.25 }])).await;
    assert_eq!(status, StatusCode::CREATED);
    let p: PredictResponse = get(&app, &format!("/predict/{}", x.id)).await;
    for (j, (&got, &was)) in p.concepts.iter().zip(base.concepts.values()).enumerate() {
        let want = match j {
            1 => 0.25,
            4 => 1.0,
            _ => was,
        };
        assert_eq!(got, want, "concept {j}");
    }
}

#[tokio::test]
async fn memorized_corrections_generalize_within_threshold() {
    let app = router(empty_state(&config(1, 1.0, f64::MAX)));
    let (a, b) = (test_sample(0), test_sample(1));
    let (_, v) = post_intervention(&app, a.id, truth_entries(a)).await;
    let first: InterventionResponse = serde_json::from_value(v).unwrap();
    let p: PredictResponse = get(&app, &format!("/predict/{}", b.id)).await;
    assert!(p.intervened);
    assert_eq!(p.used_entry, Some(first.entry_id));
    let want: Vec<f64> = a.concepts_true.iter().map(|&c| f64::from(c)).collect();
    assert_eq!(p.concepts, want);
}

#[tokio::test]
async fn invalid_requests_are_rejected_without_side_effects() {
    let app = router(empty_state(&config(1, 1.0, 0.0)));
    let x = test_sample(0);
    let c = x.n_concepts();

    let (status, _) = post_intervention(&app, SampleId(u64::MAX), truth_entries(x)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, Method::GET, &format!("/predict/{}", u64::MAX), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    for entries in [
        json!([]),
        json!([{ "index": c, "value": 1.0 }]),
        json!([{ "index": 0, "value": 1.5 }]),
        json!([{ "index": 0, "value": -0.1 }]),
        json!([{ "index": 2, "value": 1.0 }, { "index": 2, "value": 0.0 }]),
        json!([{ "index": 0 }]),
        json!("all"),
    ] {
        let (status, v) = post_intervention(&app, x.id, entries.clone()).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{entries}: {v}");
        assert!(v["error"].is_string());
    }
    let (status, _) = call(&app, Method::DELETE, "/memory/0", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let mem: MemoryView = get(&app, "/memory").await;
    assert_eq!(mem.size, 0);
}

#[tokio::test]
async fn memory_grows_by_one_per_post() {
    let app = router(empty_state(&config(1, 1.0, 0.0)));
    let mut ids = Vec::new();
    for i in 0..5 {
        let x = test_sample(i);
        let (status, v) = post_intervention(&app, x.id, json!([{ "index": 0, "value": 1.0 }])).await;
        assert_eq!(status, StatusCode::CREATED);
        ids.push(serde_json::from_value::<InterventionResponse>(v).unwrap().entry_id);
        let mem: MemoryView = get(&app, "/memory").await;
        assert_eq!(mem.size, i + 1);
    }
    let mem: MemoryView = get(&app, "/memory").await;
    assert_eq!(mem.entries.iter().map(|e| e.entry_id).collect::<Vec<EntryId>>(), ids);
}

#[tokio::test]
async fn mutations_are_persisted() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("memory.jsonl");
    let state = empty_state(&config(1, 1.0, 0.0)).persist_to(path.clone());
    let app = router(state.clone());
    let (a, b) = (test_sample(0), test_sample(1));
    post_intervention(&app, a.id, truth_entries(a)).await;
    let (_, v) = post_intervention(&app, b.id, truth_entries(b)).await;
    assert_eq!(TwofoldMemory::load(&path).unwrap(), state.memory_snapshot());
    assert_eq!(TwofoldMemory::load(&path).unwrap().len(), 2);

    let id = v["entry_id"].as_u64().unwrap();
    call(&app, Method::DELETE, &format!("/memory/{id}"), None).await;
    let on_disk = TwofoldMemory::load(&path).unwrap();
    assert_eq!(on_disk.len(), 1);
    assert_eq!(on_disk.entries()[0].source_sample_id, a.id);

    // A restarted server picks up where the last one stopped.
    let data_dir = dir.path().join("data");
    save_dir(&f.data, &data_dir).unwrap();
    let model_path = dir.path().join("model.json");
    f.model.save(&model_path).unwrap();
    let cfg = ServiceConfig {
        data_dir,
        ..config(1, 1.0, 0.0)
    };
    let app = router(AppState::from_files(Some(&model_path), Some(&path), &cfg).unwrap());
    let p: PredictResponse = get(&app, &format!("/predict/{}", a.id)).await;
    assert!(p.intervened);
    let (_, v) = post_intervention(&app, b.id, truth_entries(b)).await;
    assert_eq!(v["entry_id"].as_u64(), Some(id + 1));
}

#[tokio::test]
async fn schema_lists_every_endpoint() {
    let app = router(empty_state(&config(1, 1.0, 0.0)));
    let schema: Value = get(&app, "/schema").await;
    for path in ["/flagged", "/interventions", "/memory", "/memory/{entry_id}", "/predict/{sample_id}", "/schema"] {
        assert!(schema["paths"][path].is_object(), "{path}");
    }
}

#[test]
fn mismatched_memory_is_refused() {
    let f = fixture();
    let wrong = TwofoldMemory::new(f.model.bottleneck.hidden_width() + 1, f.model.bottleneck.n_concepts());
    assert!(AppState::new(Some(f.model.clone()), wrong, Vec::new(), &config(1, 1.0, 0.0)).is_err());
    assert!(AppState::new(Some(f.model.clone()), TwofoldMemory::for_model(&f.model), Vec::new(), &config(0, 1.0, 0.0)).is_err());
}
