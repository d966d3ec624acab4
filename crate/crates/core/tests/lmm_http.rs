mod common;

use std::sync::Arc;
use std::time::Duration;

use coe::lmm::{Backoff, EndpointConfig, GenerationParams, HttpTransport, LmmClient, LmmError, LmmRequest};
use coe::prompt::{build_final_prompt, Stage};
use coe::MemeRecord;
use common::{chat_reply, MockServer};

fn fast() -> Backoff {
    Backoff {
        base: Duration::from_millis(1),
        factor: 2.0,
        cap: Duration::from_millis(5),
    }
}

fn request(image_ref: &str) -> LmmRequest {
    let profile = coe::corpus::builtin_profile("FHM").unwrap();
    let target = MemeRecord::new("t", image_ref, "look at this");
    let prompt = build_final_prompt(&profile, &target, None, None, false).unwrap();
    let mut params = GenerationParams::mmicl_final();
    params.request_timeout = Duration::from_millis(500);
    LmmRequest::from_prompt(prompt, params)
}

fn client(server: &MockServer, auth_env: &str) -> LmmClient {
    let mut endpoint = EndpointConfig::new(&server.base_url, "test-model");
    endpoint.auth_env = auth_env.into();
    LmmClient::new(Arc::new(HttpTransport::new(endpoint))).with_backoff(fast())
}

#[test]
fn sends_chat_completion_and_reads_logprobs() {
    std::env::set_var("COE_HTTP_TEST_TOKEN", "sekrit");
    let server = MockServer::start(vec![chat_reply("not hateful")]);
    let resp = client(&server, "COE_HTTP_TEST_TOKEN")
        .generate(&request("https://example.org/m.png"))
        .unwrap();
    assert_eq!(resp.text, "not hateful");
    assert_eq!(resp.attempts, 1);
    let scores = resp.token_scores.unwrap();
    assert_eq!((scores[0].token.as_str(), scores[0].logprob), ("not", -0.25));

    let seen = server.seen();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].request_line, "POST /v1/chat/completions HTTP/1.1");
    assert_eq!(seen[0].header("authorization"), Some("Bearer sekrit"));
    let body = &seen[0].body;
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.2);
    assert_eq!(body["max_tokens"], 50);
    assert_eq!(body["min_tokens"], 1);
    assert_eq!(body["logprobs"], true);
    let content = body["messages"][0]["content"].as_array().unwrap();
    assert_eq!(content[0]["text"], "Determine if an image ");
    assert_eq!(content[1]["image_url"]["url"], "https://example.org/m.png");
    assert!(content[2]["text"].as_str().unwrap().starts_with(" with its caption: look at this"));
}

#[test]
fn no_token_means_no_auth_header() {
    let server = MockServer::start(vec![chat_reply("hateful")]);
    client(&server, "COE_HTTP_TEST_UNSET_VAR")
        .generate(&request("https://example.org/m.png"))
        .unwrap();
    assert_eq!(server.seen()[0].header("authorization"), None);
}

#[test]
fn retries_server_errors_then_succeeds() {
    let server = MockServer::start(vec![(503, "busy".into()), (429, "slow down".into()), chat_reply("hateful")]);
    let resp = client(&server, "UNSET").generate(&request("https://x/y.png")).unwrap();
    assert_eq!(resp.attempts, 3);
    assert_eq!(server.seen().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = MockServer::start(vec![(400, "{\"error\":\"bad image\"}".into())]);
    let err = client(&server, "UNSET").generate(&request("https://x/y.png")).unwrap_err();
    assert!(matches!(err, LmmError::Status { status: 400, .. }), "{err:?}");
    assert_eq!(server.seen().len(), 1);
}

#[test]
fn response_without_text_is_an_error() {
    let server = MockServer::start(vec![(200, "{\"choices\":[]}".into())]);
    let err = client(&server, "UNSET").generate(&request("https://x/y.png")).unwrap_err();
    assert_eq!(err, LmmError::MissingText);
}

#[test]
fn closed_port_is_unreachable() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = EndpointConfig::new(format!("http://127.0.0.1:{port}/v1"), "m");
    let client = LmmClient::new(Arc::new(HttpTransport::new(endpoint))).with_backoff(fast());
    let err = client.generate(&request("https://x/y.png")).unwrap_err();
    assert!(matches!(err, LmmError::Unreachable(_)), "{err:?}");
}

#[test]
fn silent_server_times_out() {
    let server = MockServer::start(vec![(0, String::new())]);
    let mut req = request("https://x/y.png");
    req.params.max_retries = 1;
    let err = client(&server, "UNSET").generate(&req).unwrap_err();
    assert_eq!(err, LmmError::Timeout);
    assert_eq!(server.seen().len(), 2);
    assert_eq!(req.stage, Stage::Final);
}

#[test]
fn missing_local_image_is_rejected_before_sending() {
    let server = MockServer::start(vec![chat_reply("hateful")]);
    let err = client(&server, "UNSET").generate(&request("/nonexistent/meme.png")).unwrap_err();
    assert!(matches!(err, LmmError::ImageRejected { .. }), "{err:?}");
    assert!(server.seen().is_empty());
}
