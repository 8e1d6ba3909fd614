//! HTTP clients against a local stub server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Value};

use folklore_core::lean::{
    HttpVerifier, LeanServerConfig, VerificationRequest, Verifier, WireSchema, TRANSPORT_FAILURE, VERIFIER_TIMEOUT,
};
use folklore_core::llm::{CallContext, ChatBackend, EndpointConfig, HttpChatBackend, LlmError, RetryPolicy};
use folklore_core::model::{StageConfig, StageKind};
use folklore_core::util::JsonlLog;

#[derive(Debug, Clone)]
struct Seen {
    headers: Vec<(String, String)>,
    body: String,
}

/// Serves one canned (status, body) per connection, in order.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = std::thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    headers.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
                }
            }
            let len = headers.iter().find(|(k, _)| k == "content-length").map_or(0, |(_, v)| v.parse().unwrap());
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen { headers, body: String::from_utf8(buf).unwrap() });
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, seen, handle)
}

fn completion(text: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
           "usage": {"prompt_tokens": 10, "completion_tokens": 3}})
    .to_string()
}

fn endpoint(url: &str) -> EndpointConfig {
    serde_json::from_value(json!({"url": format!("{url}/v1"), "auth_env_var": "UNUSED"})).unwrap()
}

fn ctx() -> CallContext {
    CallContext { stage: StageKind::Judge, key: "k".into(), alias: None, attempt: 0 }
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy { base: Duration::from_millis(1), factor: 2.0, jitter: 0.2, max_retries: 2 }
}

fn judge_request() -> folklore_core::llm::ChatRequest {
    folklore_core::llm::stage_request(&StageConfig::default_for(StageKind::Judge, "gpt-test"), "is it true?")
}

#[test]
fn chat_request_carries_auth_and_fields_but_logs_no_secret() {
    let (url, seen, h) = serve(vec![(200, completion("reasoning\ncorrect"))]);
    let dir = tempfile::tempdir().unwrap();
    let log = Arc::new(JsonlLog::open(dir.path().join("llm.jsonl")).unwrap());
    let backend = HttpChatBackend::new(&endpoint(&url), Some("sk-secret-123".into()), 4).with_log(log);
    let r = backend.complete(&judge_request(), &ctx()).unwrap();
    h.join().unwrap();
    assert_eq!(r.content, "reasoning\ncorrect");
    let seen = seen.lock().unwrap();
    let auth = seen[0].headers.iter().find(|(k, _)| k == "authorization").unwrap();
    assert_eq!(auth.1, "Bearer sk-secret-123");
    let body: Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["model"], "gpt-test");
    assert_eq!(body["max_completion_tokens"], 50_000);
    assert_eq!(body["messages"][0]["role"], "user");
    assert!(body.get("reasoning_effort").is_none());
    let logged = std::fs::read_to_string(dir.path().join("llm.jsonl")).unwrap();
    assert!(logged.contains("is it true?"));
    assert!(!logged.contains("sk-secret-123"));
}

#[test]
fn server_errors_are_retried() {
    let (url, seen, h) = serve(vec![(503, "{}".into()), (429, "{}".into()), (200, completion("ok"))]);
    let backend = HttpChatBackend::new(&endpoint(&url), None, 1).with_retry(fast_retry());
    assert_eq!(backend.complete(&judge_request(), &ctx()).unwrap().content, "ok");
    h.join().unwrap();
    assert_eq!(seen.lock().unwrap().len(), 3);
    assert!(seen.lock().unwrap()[0].headers.iter().all(|(k, _)| k != "authorization"));
}

#[test]
fn persistent_failure_is_an_outage() {
    let (url, _, h) = serve(vec![(500, "{}".into()); 3]);
    let backend = HttpChatBackend::new(&endpoint(&url), None, 1).with_retry(fast_retry());
    let e = backend.complete(&judge_request(), &ctx()).unwrap_err();
    h.join().unwrap();
    assert!(matches!(e, LlmError::BackendUnavailable { attempts: 3, .. }));
    assert!(e.is_outage());
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen, h) = serve(vec![(401, r#"{"error":"bad key"}"#.into())]);
    let backend = HttpChatBackend::new(&endpoint(&url), Some("k".into()), 1).with_retry(fast_retry());
    let e = backend.complete(&judge_request(), &ctx()).unwrap_err();
    h.join().unwrap();
    assert!(matches!(e, LlmError::Rejected { status: 401, .. }));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn truncated_completion_is_surfaced() {
    let body = json!({"choices": [{"message": {"content": ""}, "finish_reason": "length"}]}).to_string();
    let (url, _, h) = serve(vec![(200, body)]);
    let backend = HttpChatBackend::new(&endpoint(&url), None, 1);
    let e = backend.complete(&judge_request(), &ctx()).unwrap_err();
    h.join().unwrap();
    assert_eq!(e, LlmError::Truncated { finish_reason: "length".into() });
    assert!(!e.is_outage());
}

fn lean_cfg(url: &str, schema: WireSchema) -> LeanServerConfig {
    let mut cfg: LeanServerConfig = serde_json::from_value(json!({"url": format!("{url}/verify")})).unwrap();
    cfg.schema = schema;
    cfg
}

fn req(code: &str) -> VerificationRequest {
    VerificationRequest { code: code.into(), timeout_s: 60 }
}

#[test]
fn simple_schema_round_trip() {
    let reply =
        json!({"diagnostics": [{"severity": "warning", "message": "declaration uses 'sorry'", "line": 3, "col": 8}]});
    let (url, seen, h) = serve(vec![(200, reply.to_string())]);
    let dir = tempfile::tempdir().unwrap();
    let log = Arc::new(JsonlLog::open(dir.path().join("lean.jsonl")).unwrap());
    let v = HttpVerifier::new(&lean_cfg(&url, WireSchema::Simple)).with_log(log);
    let code = "import Mathlib\n\ntheorem secret_name : True := by sorry";
    let r = v.check(&req(code));
    h.join().unwrap();
    assert!(r.server_ok);
    assert_eq!(r.diagnostics.len(), 1);
    assert_eq!(r.diagnostics[0].line, Some(3));
    let body: Value = serde_json::from_str(&seen.lock().unwrap()[0].body).unwrap();
    assert_eq!(body, json!({"code": code, "timeout": 60}));
    // the log keeps a hash, not the code
    let logged = std::fs::read_to_string(dir.path().join("lean.jsonl")).unwrap();
    assert!(!logged.contains("secret_name"));
    assert!(logged.contains(&folklore_core::lean::code_hash(code)));
}

#[test]
fn kimina_schema_round_trip_and_timeout() {
    let ok = json!({"results": [{"custom_id": "0", "error": null, "response": {"messages": [
        {"severity": "error", "pos": {"line": 4, "column": 2}, "data": "unsolved goals"}]}}]});
    let timeout = json!({"results": [{"custom_id": "0", "error": "Lean REPL command timed out", "response": null}]});
    let (url, seen, h) = serve(vec![(200, ok.to_string()), (200, timeout.to_string())]);
    let v = HttpVerifier::new(&lean_cfg(&url, WireSchema::Kimina));
    let r = v.check(&req("theorem t : True := by simp"));
    assert!(r.server_ok && r.has_errors());
    assert_eq!(r.diagnostics[0].message, "unsolved goals");
    let r = v.check(&req("theorem t : True := by simp"));
    h.join().unwrap();
    assert!(!r.server_ok && !r.is_transport_failure());
    assert_eq!(r.diagnostics[0].message, VERIFIER_TIMEOUT);
    let body: Value = serde_json::from_str(&seen.lock().unwrap()[0].body).unwrap();
    assert_eq!(body["codes"][0]["proof"], "theorem t : True := by simp");
}

#[test]
fn verifier_http_errors_retry_then_report_transport_failure() {
    let (url, seen, h) = serve(vec![(502, "{}".into()), (502, "{}".into()), (502, "{}".into())]);
    let v = HttpVerifier::new(&lean_cfg(&url, WireSchema::Simple)).with_retry_delays(vec![Duration::ZERO; 2]);
    let r = v.check(&req("theorem t : True := trivial"));
    h.join().unwrap();
    assert!(r.is_transport_failure());
    assert!(r.diagnostics[0].message.starts_with(TRANSPORT_FAILURE));
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn verifier_recovers_within_retries() {
    let ok = json!({"diagnostics": []});
    let (url, _, h) = serve(vec![(503, "{}".into()), (200, ok.to_string())]);
    let v = HttpVerifier::new(&lean_cfg(&url, WireSchema::Simple)).with_retry_delays(vec![Duration::ZERO; 2]);
    let r = v.check(&req("theorem t : True := trivial"));
    h.join().unwrap();
    assert!(r.server_ok && r.diagnostics.is_empty());
}

#[test]
fn unreachable_verifier_is_a_transport_failure() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let v =
        HttpVerifier::new(&lean_cfg(&format!("http://127.0.0.1:{port}"), WireSchema::Simple)).with_retry_delays(vec![]);
    assert!(v.check(&req("theorem t : True := trivial")).is_transport_failure());
}
