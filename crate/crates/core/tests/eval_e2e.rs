mod common;

use std::sync::Arc;

use common::{labeled_round, mock_project, oracle_script};
use crcal::annotation::{LabelValue, RoundStatus};
use crcal::evalharness::{improvement_report, Choice, ConfusionMatrix, Metric, RunStatus};
use crcal::mock::{MockReply, MockServer};
use crcal::Error;

#[tokio::test]
async fn always_b_under_identity_order() {
    let dir = tempfile::tempdir().unwrap();
    let mock = MockServer::always("B").await;
    let project = mock_project(dir.path(), &mock);
    let round = labeled_round(&project);
    let run = project.run_eval(round, "mock-model", None).await.unwrap();
    assert_eq!(run.status, RunStatus::Done);
    assert_eq!(run.matrix, ConfusionMatrix { tp: 2, fp: 2, fn_: 0, tn: 0 });
    assert_eq!(run.precision, 0.5);
    assert_eq!(run.recall, 1.0);
    assert!((run.f1 - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(mock.stats().total(), 4);
    assert_eq!(project.round(round).unwrap().status, RoundStatus::Evaluating);
}

#[tokio::test]
async fn oracle_replies_score_perfectly_under_any_order() {
    let dir = tempfile::tempdir().unwrap();
    let mock = MockServer::start(oracle_script()).await;
    let project = mock_project(dir.path(), &mock);
    let round = labeled_round(&project);
    for seed in [None, Some(1), Some(77)] {
        let run = project.run_eval(round, "mock-model", seed).await.unwrap();
        assert_eq!(run.matrix, ConfusionMatrix { tp: 2, fp: 0, fn_: 0, tn: 2 }, "seed {seed:?}");
        assert_eq!((run.precision, run.recall, run.f1), (1.0, 1.0, 1.0));
    }
}

#[tokio::test]
async fn garbage_replies_are_unparseable_negatives() {
    let dir = tempfile::tempdir().unwrap();
    let mock = MockServer::always("the weather is nice today").await;
    let project = mock_project(dir.path(), &mock);
    let round = labeled_round(&project);
    let run = project.run_eval(round, "mock-model", None).await.unwrap();
    assert!(run.predictions.iter().all(|p| p.choice == Choice::Unparseable));
    assert_eq!(run.matrix, ConfusionMatrix { tp: 0, fp: 0, fn_: 2, tn: 2 });
    assert_eq!((run.precision, run.recall, run.f1), (0.0, 0.0, 0.0));
    assert!(run.degenerate.precision && run.degenerate.f1);
    assert!(!run.degenerate.recall);
}

#[tokio::test]
async fn repeated_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mock = MockServer::start(oracle_script()).await;
    let project = mock_project(dir.path(), &mock);
    let round = labeled_round(&project);
    let a = project.run_eval(round, "mock-model", Some(5)).await.unwrap();
    let b = project.run_eval(round, "mock-model", Some(5)).await.unwrap();
    assert_ne!(a.run_id, b.run_id);
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(a.matrix, b.matrix);
    let ids: Vec<i64> = a.predictions.iter().map(|p| p.item_id).collect();
    assert_eq!(ids, vec![4, 5, 7, 8]);
    assert!(mock.stats().requests().iter().all(|r| r.temperature == 0.0));
    assert_eq!(project.get_run(a.run_id).unwrap(), a);
}

#[tokio::test]
async fn too_many_transport_failures_fail_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let mock = MockServer::start(Arc::new(|req: &crcal::gateway::wire::ChatRequest, _| {
        if common::query_of(req.user_content()).contains("TX2") {
            MockReply::Status(500)
        } else {
            MockReply::text("A")
        }
    }))
    .await;
    let project = mock_project(dir.path(), &mock);
    let round = labeled_round(&project);
    // 1 failure out of 4 exceeds floor(0.4) = 0
    let run = project.run_eval(round, "mock-model", None).await.unwrap();
    assert_eq!(run.status, RunStatus::Failed);
    assert_eq!(run.transport_failures, 1);
    assert!(run.error.as_deref().unwrap().contains("transport"));
    assert_eq!(project.get_run(run.run_id).unwrap().status, RunStatus::Failed);
}

#[tokio::test]
async fn unlabeled_round_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mock = MockServer::always("B").await;
    let project = mock_project(dir.path(), &mock);
    let round = project.create_round(crcal::prompt::DEFAULT_RESOLUTION_TEMPLATE, None).unwrap();
    project.submit_label(round.round_id, 4, LabelValue::Skip, "ann-1").unwrap();
    let err = project.run_eval(round.round_id, "mock-model", None).await.unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
    assert_eq!(mock.stats().total(), 0);
}

#[tokio::test]
async fn labeling_is_blocked_once_evaluation_starts() {
    let dir = tempfile::tempdir().unwrap();
    let mock = MockServer::always("B").await;
    let project = mock_project(dir.path(), &mock);
    let round = labeled_round(&project);
    project.run_eval(round, "mock-model", None).await.unwrap();
    let err = project.submit_label(round, 4, LabelValue::NotNeeded, "ann-2").unwrap_err();
    assert!(matches!(err, Error::State(_)));
}

#[tokio::test]
async fn improvement_between_two_mock_runs() {
    let dir = tempfile::tempdir().unwrap();
    let always_b = MockServer::always("B").await;
    let project = mock_project(dir.path(), &always_b);
    let round = labeled_round(&project);
    let base = project.run_eval(round, "mock-model", None).await.unwrap();
    let perfect = base.clone().with_predictions(
        base.predictions
            .iter()
            .map(|p| crcal::evalharness::Prediction {
                choice: if p.ground_truth { Choice::Needed } else { Choice::NotNeeded },
                ..p.clone()
            })
            .collect(),
    );
    assert_eq!(improvement_report(&base, &perfect, Metric::F1).unwrap(), 33.33);
    assert_eq!(improvement_report(&base, &perfect, Metric::Precision).unwrap(), 50.0);
}
