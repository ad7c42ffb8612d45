//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod api;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use crcal::annotation::{Clock, LabelValue};
use crcal::calibration::{ArchitectureClass, ModelCard, ModelTag};
use crcal::config::ProjectConfig;
use crcal::corpus::{self, PreprocessedRecord, RawMessage};
use crcal::evalharness::{ConfusionMatrix, Prediction};
use crcal::fixtures;
use crcal::gateway::wire::ChatRequest;
use crcal::mock::{MockReply, MockServer, Script};
use crcal::options::{Meaning, OptionPermutation};
use crcal::project::Project;
use proptest::prelude::*;

pub const MOCK_KEY_ENV: &str = "CRCAL_TEST_MOCK_KEY";

/// Reference merger: for every run end, scan back to the start of the run.
/// Quadratic on purpose.
pub fn naive_merge(messages: &[RawMessage], max_gap: i64) -> Vec<RawMessage> {
    let n = messages.len();
    // joins_prev[i]: message i continues the run of message i-1
    let joins_prev: Vec<bool> = (0..n)
        .map(|i| {
            i > 0
                && messages[i].sender == messages[i - 1].sender
                && messages[i].timestamp - messages[i - 1].timestamp <= max_gap
        })
        .collect();
    let mut out = Vec::new();
    for end in 0..n {
        if end + 1 < n && joins_prev[end + 1] {
            continue;
        }
        let mut start = end;
        while start > 0 && joins_prev[start] {
            start -= 1;
        }
        let text = messages[start..=end]
            .iter()
            .map(|m| m.text.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        out.push(RawMessage {
            id: messages[end].id,
            sender: messages[end].sender.clone(),
            text,
            timestamp: messages[end].timestamp,
        });
    }
    out
}

/// Sorted logs with few senders, so same-sender runs are common, and small
/// gaps around the merge threshold.
pub fn sorted_log(max_len: usize) -> impl Strategy<Value = Vec<RawMessage>> {
    prop::collection::vec((0usize..3, 0i64..40, "[a-z ]{0,8}"), 0..max_len).prop_map(|rows| {
        let mut ts = 1_000i64;
        rows.into_iter()
            .enumerate()
            .map(|(i, (sender, gap, text))| {
                ts += gap;
                RawMessage {
                    id: i as i64 + 1,
                    sender: format!("u{sender}"),
                    text,
                    timestamp: ts,
                }
            })
            .collect()
    })
}

pub fn non_newline_chars(messages: &[RawMessage]) -> usize {
    messages.iter().map(|m| m.text.chars().filter(|c| *c != '\n').count()).sum()
}

/// Reference counter: walks the prediction list once per cell.
pub fn brute_force_matrix(pairs: &[(bool, bool)]) -> ConfusionMatrix {
    let count = |p: bool, a: bool| pairs.iter().filter(|(pp, aa)| *pp == p && *aa == a).count() as u64;
    ConfusionMatrix {
        tp: count(true, true),
        fp: count(true, false),
        fn_: count(false, true),
        tn: count(false, false),
    }
}

pub fn predictions_from(pairs: &[(bool, bool)]) -> Vec<Prediction> {
    use crcal::evalharness::Choice;
    pairs
        .iter()
        .enumerate()
        .map(|(i, (p, a))| Prediction {
            item_id: i as i64,
            raw_reply: String::new(),
            choice: if *p { Choice::Needed } else { Choice::NotNeeded },
            ground_truth: *a,
        })
        .collect()
}

pub fn fixed_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 5, 1, 12, 0, 0).unwrap()
}

pub fn fixed_clock() -> Clock {
    Arc::new(fixed_time)
}

/// The extended chat log, concatenated and windowed with default settings.
pub fn fixture_records() -> Vec<PreprocessedRecord> {
    let merged =
        corpus::concat_consecutive(&fixtures::extended_chat_log(), corpus::DEFAULT_MAX_GAP_SECONDS).unwrap();
    corpus::build_windows(&merged, corpus::DEFAULT_WINDOW_CAP).unwrap()
}

/// Ground truth by query text for the labeled fixture records.
pub fn fixture_truth() -> BTreeMap<String, bool> {
    let records = fixture_records();
    fixtures::extended_labels()
        .into_iter()
        .map(|(id, v)| {
            let text = records.iter().find(|r| r.id == id).unwrap().text.clone();
            (text, v.as_bool().unwrap())
        })
        .collect()
}

/// The query text inside a rendered default resolution prompt.
pub fn query_of(prompt: &str) -> &str {
    let start = prompt.find("Message:\n").expect("query marker") + "Message:\n".len();
    let end = prompt[start..].find("\n\nOptions:").expect("options marker") + start;
    &prompt[start..end]
}

/// Answers every prompt with the option line matching the ground truth.
pub fn oracle_script() -> Script {
    let truth = fixture_truth();
    Arc::new(move |req: &ChatRequest, _| {
        let prompt = req.user_content();
        let options = OptionPermutation::parse_block(prompt).expect("prompt has an option block");
        let needed = truth[query_of(prompt)];
        MockReply::Text(options.line_for(Meaning::from_label(needed)))
    })
}

pub fn mock_model(name: &str, endpoint: &str, params: f64) -> ModelCard {
    ModelCard {
        name: name.into(),
        params_billions: params,
        architecture_class: ArchitectureClass::Dense,
        endpoint: endpoint.into(),
        tag: ModelTag::Vanilla,
    }
}

/// A project over the fixture corpus whose single model talks to `mock`.
pub fn mock_project(root: &Path, mock: &MockServer) -> Project {
    std::env::set_var(MOCK_KEY_ENV, "test-key");
    let mut file = std::fs::File::create(root.join("corpus.jsonl")).unwrap();
    corpus::write_records(&mut file, &fixture_records()).unwrap();
    let config = ProjectConfig {
        endpoints: vec![mock.endpoint("mock", MOCK_KEY_ENV)],
        models: vec![mock_model("mock-model", "mock", 0.1)],
        ..ProjectConfig::default()
    };
    Project::with_config(root, config, fixed_clock()).unwrap()
}

/// Create a round and label it with [`fixtures::extended_labels`].
pub fn labeled_round(project: &Project) -> u64 {
    let round = project
        .create_round(crcal::prompt::DEFAULT_RESOLUTION_TEMPLATE, None)
        .unwrap()
        .round_id;
    for (id, value) in fixtures::extended_labels() {
        project.submit_label(round, id, value, "ann-1").unwrap();
    }
    round
}

pub fn label_value(needed: bool) -> LabelValue {
    if needed {
        LabelValue::Needed
    } else {
        LabelValue::NotNeeded
    }
}

/// `n` labeled records with short windows, ids `1..=n`, alternating labels.
pub fn synthetic_labeled(n: usize) -> Vec<PreprocessedRecord> {
    (1..=n as i64)
        .map(|id| PreprocessedRecord {
            id,
            sender: format!("u{}", id % 7),
            text: format!("how do I build target {id}?"),
            timestamp: 1_000 + id,
            is_question: Some(true),
            kimi_is_question: Some(true),
            cr_window: vec![corpus::WindowEntry {
                sender: "u_x".into(),
                text: format!("context {id}"),
                timestamp: 999 + id,
            }],
            cr_need_gt: Some(id % 2 == 0),
        })
        .collect()
}

/// Upper tail of the χ² distribution with two degrees of freedom.
pub fn chi2_p_value_2dof(observed: [usize; 3]) -> f64 {
    let n: usize = observed.iter().sum();
    let expected = n as f64 / 3.0;
    let chi2: f64 = observed
        .iter()
        .map(|o| (*o as f64 - expected).powi(2) / expected)
        .sum();
    (-chi2 / 2.0).exp()
}

/// Serve the API for `project` on an ephemeral port; returns the base URL.
pub async fn spawn_api(project: Arc<Project>) -> String {
    let app = crcal::service::router(project).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    format!("http://{addr}")
}
