mod common;

use std::sync::Arc;
use std::time::Duration;

use common::api::{api_error, equivalence_flow, get, post, wait_for_run};
use common::{fixed_clock, labeled_round, mock_project, spawn_api, MOCK_KEY_ENV};
use crcal::config::{ProjectConfig, ServiceConfig};
use crcal::evalharness::{EvalRun, RunStatus};
use crcal::fixtures;
use crcal::mock::{MockReply, MockServer};
use crcal::project::Project;
use crcal::service::RunHandle;
use crcal::ErrorCode;
use reqwest::{Client, StatusCode};
use serde_json::json;

#[tokio::test]
async fn every_endpoint_matches_the_direct_call() {
    equivalence_flow().await;
}

#[tokio::test]
async fn empty_project_lists_no_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let project = Project::with_config(dir.path(), ProjectConfig::default(), fixed_clock()).unwrap();
    let base = spawn_api(Arc::new(project)).await;
    assert_eq!(get(&base, "/api/rounds").await, (StatusCode::OK, b"[]".to_vec()));
}

#[tokio::test]
async fn first_label_has_revision_zero() {
    let mock = MockServer::always("B").await;
    let dir = tempfile::tempdir().unwrap();
    let base = spawn_api(Arc::new(mock_project(dir.path(), &mock))).await;
    post(&base, "/api/rounds", json!({ "prompt_template": crcal::prompt::DEFAULT_RESOLUTION_TEMPLATE })).await;
    let (s, body) = post(&base, "/api/rounds/1/labels", json!({ "item_id": 4, "value": "needed", "annotator": "a" })).await;
    assert_eq!(s, StatusCode::OK);
    let label: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(label["revision"], 0);
    let (_, body) = post(&base, "/api/rounds/1/labels", json!({ "item_id": 4, "value": "not_needed", "annotator": "a" })).await;
    let label: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(label["revision"], 1);
}

#[tokio::test]
async fn error_codes_and_statuses() {
    let mock = MockServer::always("B").await;
    let dir = tempfile::tempdir().unwrap();
    let base = spawn_api(Arc::new(mock_project(dir.path(), &mock))).await;

    let (s, body) = get(&base, "/api/rounds/9/progress").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(api_error(&body).code, ErrorCode::NotFound);

    let (s, body) = get(&base, "/api/rounds/abc/progress").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(api_error(&body).code, ErrorCode::Validation);

    let (s, body) = post(&base, "/api/rounds", json!({ "prompt_template": "no placeholders" })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(api_error(&body).message.contains("{query}"));

    post(&base, "/api/rounds", json!({ "prompt_template": crcal::prompt::DEFAULT_RESOLUTION_TEMPLATE })).await;
    let (s, body) = post(&base, "/api/rounds/1/labels", json!({ "item_id": 4, "value": "maybe", "annotator": "a" })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(api_error(&body).code, ErrorCode::Validation);

    let (s, body) = post(&base, "/api/rounds/1/labels", json!({ "item_id": 999, "value": "needed", "annotator": "a" })).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(api_error(&body).code, ErrorCode::NotFound);

    let (s, body) = post(&base, "/api/rounds/1/export", json!({})).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(api_error(&body).code, ErrorCode::State);

    let (s, body) = get(&base, "/api/rounds/1/calibration?metric=bogus").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(api_error(&body).code, ErrorCode::Validation);

    let (s, body) = get(&base, "/api/nowhere").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(api_error(&body).code, ErrorCode::NotFound);

    let resp = Client::new()
        .post(format!("{base}/api/rounds"))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    api_error(&resp.bytes().await.unwrap());
}

#[tokio::test]
async fn calibrated_round_rejects_labels_with_state_error() {
    let mock = MockServer::always("B").await;
    let dir = tempfile::tempdir().unwrap();
    let project = Arc::new(mock_project(dir.path(), &mock));
    let round = labeled_round(&project);
    for run in fixtures::reference_vanilla_runs(round) {
        project.import_run(run).unwrap();
    }
    let base = spawn_api(project.clone()).await;
    let (s, body) = get(&base, &format!("/api/rounds/{round}/calibration")).await;
    assert_eq!(s, StatusCode::OK);
    let report: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(report["verdict"], "calibrated");
    let (s, body) = post(&base, &format!("/api/rounds/{round}/labels"), json!({ "item_id": 5, "value": "needed", "annotator": "a" })).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(api_error(&body).code, ErrorCode::State);
}

#[tokio::test]
async fn one_run_per_endpoint_at_a_time() {
    let mock = MockServer::start_with_latency(Arc::new(|_, _| MockReply::text("B")), Duration::from_millis(300)).await;
    let dir = tempfile::tempdir().unwrap();
    let project = Arc::new(mock_project(dir.path(), &mock));
    let round = labeled_round(&project);
    let base = spawn_api(project).await;
    let body = json!({ "round_id": round, "model_name": "mock-model" });
    let (s1, first) = post(&base, "/api/eval/runs", body.clone()).await;
    assert_eq!(s1, StatusCode::OK);
    let (s2, second) = post(&base, "/api/eval/runs", body.clone()).await;
    assert_eq!(s2, StatusCode::CONFLICT, "{}", String::from_utf8_lossy(&second));
    assert_eq!(api_error(&second).code, ErrorCode::State);

    let handle: RunHandle = serde_json::from_slice(&first).unwrap();
    let (_, running) = get(&base, &format!("/api/eval/runs/{}", handle.run_id)).await;
    let running: EvalRun = serde_json::from_slice(&running).unwrap();
    assert_eq!(running.status, RunStatus::Running);

    let (_, done) = wait_for_run(&base, handle.run_id).await;
    let done: EvalRun = serde_json::from_slice(&done).unwrap();
    assert_eq!(done.status, RunStatus::Done);
    let (s3, _) = post(&base, "/api/eval/runs", body).await;
    assert_eq!(s3, StatusCode::OK);
}

#[tokio::test]
async fn bearer_token_is_enforced_when_configured() {
    std::env::set_var("CRCAL_TEST_API_TOKEN", "s3cret");
    std::env::set_var(MOCK_KEY_ENV, "test-key");
    let dir = tempfile::tempdir().unwrap();
    let config = ProjectConfig {
        service: ServiceConfig {
            bearer_token_env: Some("CRCAL_TEST_API_TOKEN".into()),
        },
        ..ProjectConfig::default()
    };
    let project = Project::with_config(dir.path(), config, fixed_clock()).unwrap();
    let base = spawn_api(Arc::new(project)).await;

    let (s, body) = get(&base, "/api/rounds").await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    api_error(&body);
    let resp = Client::new()
        .get(format!("{base}/api/rounds"))
        .bearer_auth("s3cret")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
}
