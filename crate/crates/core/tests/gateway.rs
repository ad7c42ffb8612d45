mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{fixture_records, MOCK_KEY_ENV};
use crcal::gateway::{resolve_query, score_question, ChatEndpoint, CompletionRequest, EndpointClient, RetryPolicy};
use crcal::mock::{MockReply, MockServer};
use crcal::options::OptionPermutation;
use crcal::prompt::DEFAULT_RESOLUTION_TEMPLATE;
use crcal::Error;

fn client(endpoint: ChatEndpoint) -> EndpointClient {
    std::env::set_var(MOCK_KEY_ENV, "test-key");
    EndpointClient::new(endpoint).unwrap()
}

#[tokio::test]
async fn single_attempt_on_success() {
    let mock = MockServer::always("B").await;
    let c = client(mock.endpoint("m", MOCK_KEY_ENV));
    let out = c.complete(&CompletionRequest::eval("hello")).await.unwrap();
    assert_eq!(out.text, "B");
    assert_eq!(out.attempts, 1);
    let reqs = mock.stats().requests();
    assert_eq!(reqs[0].temperature, 0.0);
    assert_eq!(reqs[0].model, "mock-m");
    assert_eq!(reqs[0].user_content(), "hello");
    assert_eq!(mock.stats().auth_headers()[0].as_deref(), Some("Bearer test-key"));
}

#[tokio::test]
async fn retries_rate_limited_requests() {
    let mock = MockServer::start(Arc::new(|_, seq| {
        if seq <= 2 {
            MockReply::Status(429)
        } else {
            MockReply::text("A. Not needed")
        }
    }))
    .await;
    let c = client(mock.endpoint("m", MOCK_KEY_ENV));
    let out = c.complete(&CompletionRequest::eval("q")).await.unwrap();
    assert_eq!(out.attempts, 3);
    assert_eq!(mock.stats().total(), 3);
}

#[tokio::test]
async fn server_errors_exhaust_retries() {
    let mock = MockServer::start(Arc::new(|_, _| MockReply::Status(503))).await;
    let c = client(mock.endpoint("m", MOCK_KEY_ENV));
    match c.complete(&CompletionRequest::eval("q")).await {
        Err(Error::Transport { status, attempts, .. }) => {
            assert_eq!(status, Some(503));
            assert_eq!(attempts, 5);
        }
        other => panic!("expected transport error, got {other:?}"),
    }
    assert_eq!(mock.stats().total(), 5);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let mock = MockServer::start(Arc::new(|_, _| MockReply::Status(400))).await;
    let c = client(mock.endpoint("m", MOCK_KEY_ENV));
    let err = c.complete(&CompletionRequest::eval("q")).await.unwrap_err();
    assert!(matches!(err, Error::Transport { attempts: 1, status: Some(400), .. }));
}

#[tokio::test]
async fn unreachable_host_is_transport_error_after_all_attempts() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let endpoint = ChatEndpoint {
        name: "dead".into(),
        base_url: format!("http://127.0.0.1:{port}/v1"),
        api_key_ref: MOCK_KEY_ENV.into(),
        model_id: "x".into(),
        max_in_flight: 1,
        requests_per_minute: 1000,
        timeout_seconds: 2,
        retry: RetryPolicy {
            base_delay_ms: 1,
            factor: 2,
            max_attempts: 5,
        },
    };
    let err = client(endpoint).complete(&CompletionRequest::eval("q")).await.unwrap_err();
    assert!(matches!(err, Error::Transport { attempts: 5, status: None, .. }), "{err:?}");
    assert_eq!(err.code(), crcal::ErrorCode::Transport);
}

#[tokio::test]
async fn missing_key_is_config_error_before_any_request() {
    let mock = MockServer::always("B").await;
    let c = EndpointClient::new(mock.endpoint("m", "CRCAL_TEST_KEY_THAT_IS_NEVER_SET")).unwrap();
    let err = c.complete(&CompletionRequest::eval("q")).await.unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("CRCAL_TEST_KEY_THAT_IS_NEVER_SET")));
    assert_eq!(mock.stats().total(), 0);
}

#[tokio::test]
async fn in_flight_never_exceeds_limit() {
    let mock = MockServer::start_with_latency(
        Arc::new(|_, _| MockReply::text("B")),
        Duration::from_millis(20),
    )
    .await;
    let mut endpoint = mock.endpoint("m", MOCK_KEY_ENV);
    endpoint.max_in_flight = 3;
    let c = Arc::new(client(endpoint));
    let tasks: Vec<_> = (0..24)
        .map(|i| {
            let c = c.clone();
            tokio::spawn(async move { c.complete(&CompletionRequest::eval(format!("q{i}"))).await })
        })
        .collect();
    for t in tasks {
        t.await.unwrap().unwrap();
    }
    assert_eq!(mock.stats().total(), 24);
    assert!(mock.stats().peak_in_flight() <= 3, "peak {}", mock.stats().peak_in_flight());
    assert!(mock.stats().peak_in_flight() >= 2);
}

#[tokio::test]
async fn resolve_query_on_pronoun_record() {
    let mock = MockServer::always("B. Needed").await;
    let c = client(mock.endpoint("m", MOCK_KEY_ENV));
    let record = fixture_records().into_iter().find(|r| r.id == 4).unwrap();
    let reply = resolve_query(&c, DEFAULT_RESOLUTION_TEMPLATE, &record, &OptionPermutation::identity())
        .await
        .unwrap();
    assert_eq!(reply, "B. Needed");
    let prompt = mock.stats().requests()[0].user_content().to_owned();
    assert!(prompt.contains("u_7f3a: Can mmpose be deployed\non mobile phones?"));
    assert!(prompt.contains("BTW, how to deploy it\non TX2 ?"));
    assert!(prompt.contains("A. Not needed\nB. Needed\nC. Don't know"));
}

#[tokio::test]
async fn template_without_query_fails_before_network() {
    let mock = MockServer::always("B").await;
    let c = client(mock.endpoint("m", MOCK_KEY_ENV));
    let record = fixture_records().remove(0);
    let err = resolve_query(&c, "{history}\n{options}", &record, &OptionPermutation::identity())
        .await
        .unwrap_err();
    assert!(matches!(err, Error::Template(ref m) if m.contains("{query}")));
    assert_eq!(mock.stats().total(), 0);
}

#[tokio::test]
async fn scoring_parses_integer_replies() {
    let mock = MockServer::start(Arc::new(|_, seq| {
        MockReply::text(if seq == 1 { "7" } else { "no idea" })
    }))
    .await;
    let c = client(mock.endpoint("m", MOCK_KEY_ENV));
    let record = fixture_records().remove(0);
    assert_eq!(score_question(&c, &record).await.unwrap(), 7);
    assert!(matches!(score_question(&c, &record).await, Err(Error::ScoringParse(_))));
    let mut empty = record.clone();
    empty.text = "  ".into();
    assert!(matches!(score_question(&c, &empty).await, Err(Error::Validation(_))));
    assert_eq!(mock.stats().total(), 2);
}

#[tokio::test]
async fn identical_requests_get_identical_bodies() {
    let mock = MockServer::always("C").await;
    let c = client(mock.endpoint("m", MOCK_KEY_ENV));
    let record = fixture_records().remove(1);
    let perm = OptionPermutation::for_item(9, record.id);
    for _ in 0..3 {
        resolve_query(&c, DEFAULT_RESOLUTION_TEMPLATE, &record, &perm).await.unwrap();
    }
    let reqs = mock.stats().requests();
    assert!(reqs.windows(2).all(|w| w[0] == w[1]));
}
