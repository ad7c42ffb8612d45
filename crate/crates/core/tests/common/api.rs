//! HTTP helpers and the shared REST equivalence scenario.

use std::sync::Arc;
use std::time::Duration;

use crcal::annotation::LabelValue;
use crcal::evalharness::{EvalRun, Metric, RunStatus};
use crcal::fixtures;
use crcal::mock::MockServer;
use crcal::project::EXPORTS_DIR;
use crcal::service::{ApiError, RunHandle};
use reqwest::{Client, StatusCode};
use serde::Serialize;
use serde_json::json;

use super::{mock_project, spawn_api};

pub fn bytes_of<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).unwrap()
}

pub async fn get(base: &str, path: &str) -> (StatusCode, Vec<u8>) {
    let resp = Client::new().get(format!("{base}{path}")).send().await.unwrap();
    (resp.status(), resp.bytes().await.unwrap().to_vec())
}

pub async fn post(base: &str, path: &str, body: serde_json::Value) -> (StatusCode, Vec<u8>) {
    let resp = Client::new().post(format!("{base}{path}")).json(&body).send().await.unwrap();
    (resp.status(), resp.bytes().await.unwrap().to_vec())
}

pub fn api_error(bytes: &[u8]) -> ApiError {
    serde_json::from_slice(bytes).unwrap_or_else(|e| panic!("not an ApiError ({e}): {}", String::from_utf8_lossy(bytes)))
}

pub async fn wait_for_run(base: &str, run_id: u64) -> (StatusCode, Vec<u8>) {
    for _ in 0..500 {
        let (status, body) = get(base, &format!("/api/eval/runs/{run_id}")).await;
        let run: EvalRun = serde_json::from_slice(&body).unwrap();
        if run.status != RunStatus::Running {
            return (status, body);
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("run {run_id} never finished");
}

/// Drive a full round through HTTP on one project and through direct calls
/// on a twin; every response body must equal the serialized direct result.
pub async fn equivalence_flow() {
    let mock = MockServer::always("B").await;
    let (dir_http, dir_direct) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let served = Arc::new(mock_project(dir_http.path(), &mock));
    let direct = mock_project(dir_direct.path(), &mock);
    let base = spawn_api(served.clone()).await;

    let (s, body) = get(&base, "/api/rounds").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"[]");
    assert_eq!(body, bytes_of(&direct.list_rounds()));

    let template = crcal::prompt::DEFAULT_RESOLUTION_TEMPLATE;
    let (s, body) = post(&base, "/api/rounds", json!({ "prompt_template": template })).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, bytes_of(&direct.create_round(template, None).unwrap()));
    let (_, body) = get(&base, "/api/rounds").await;
    assert_eq!(body, bytes_of(&direct.list_rounds()));

    let (_, body) = get(&base, "/api/rounds/1/items?cursor=1&limit=2").await;
    assert_eq!(body, bytes_of(&direct.items_page(1, 1, 2).unwrap()));
    let (_, body) = get(&base, "/api/rounds/1/items").await;
    assert_eq!(body, bytes_of(&direct.items_page(1, 0, crcal::service::DEFAULT_PAGE_LIMIT).unwrap()));

    for (item, value) in fixtures::extended_labels() {
        let (s, body) = post(
            &base,
            "/api/rounds/1/labels",
            json!({ "item_id": item, "value": value, "annotator": "ann-1" }),
        )
        .await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(body, bytes_of(&direct.submit_label(1, item, value, "ann-1").unwrap()));
    }
    let (_, body) = get(&base, "/api/rounds/1/progress").await;
    assert_eq!(body, bytes_of(&direct.progress(1).unwrap()));
    let (_, body) = get(&base, "/api/rounds/1/items?limit=3").await;
    assert_eq!(body, bytes_of(&direct.items_page(1, 0, 3).unwrap()));

    let (s, body) = post(&base, "/api/eval/runs", json!({ "round_id": 1, "model_name": "mock-model", "option_seed": null })).await;
    assert_eq!(s, StatusCode::OK);
    let handle: RunHandle = serde_json::from_slice(&body).unwrap();
    let (s, body) = wait_for_run(&base, handle.run_id).await;
    assert_eq!(s, StatusCode::OK);
    let direct_run = direct.run_eval(1, "mock-model", None).await.unwrap();
    assert_eq!(handle.run_id, direct_run.run_id);
    assert_eq!(body, bytes_of(&direct_run));

    for run in fixtures::reference_vanilla_runs(1) {
        served.import_run(run.clone()).unwrap();
        direct.import_run(run).unwrap();
    }
    let (s, body) = get(&base, "/api/rounds/1/calibration?metric=precision").await;
    assert_eq!(s, StatusCode::OK);
    let report = direct.calibrate(1, Some(Metric::Precision)).unwrap();
    assert_eq!(body, bytes_of(&report));
    assert_eq!(report.verdict, crcal::calibration::Verdict::Calibrated);

    let (s, body) = post(&base, "/api/rounds/1/export", json!({ "seed": 11, "holdout": 1 })).await;
    assert_eq!(s, StatusCode::OK);
    let meta = direct.export(1, Some(11), Some(1)).unwrap();
    assert_eq!(body, bytes_of(&meta));
    for name in [Some(&meta.train_path), meta.holdout_path.as_ref()].into_iter().flatten() {
        assert_eq!(
            std::fs::read(dir_http.path().join(EXPORTS_DIR).join(name)).unwrap(),
            std::fs::read(dir_direct.path().join(EXPORTS_DIR).join(name)).unwrap()
        );
    }

    // errors travel the same way
    let (s, body) = post(&base, "/api/rounds/1/labels", json!({ "item_id": 4, "value": "skip", "annotator": "a" })).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let err = direct.submit_label(1, 4, LabelValue::Skip, "a").unwrap_err();
    assert_eq!(body, bytes_of(&ApiError::from(err)));
}
