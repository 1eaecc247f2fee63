//! The HTTP clients against a local fake service.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use ids_core::agents::{build_classification_prompt, classify, AgentError, RemoteChatAgent};
use ids_core::embedding::{EmbeddingError, RemoteEmbedder};
use ids_core::remote::{HttpTransport, RetryPolicy};
use ids_core::{ClassLabel, ClassSet, Embedder, RetrievalResult};
use serde_json::{json, Value};

#[derive(Clone, Debug)]
struct Seen {
    headers: Vec<(String, String)>,
    body: Value,
}

/// Serves one scripted response per connection: (status, body, delay).
fn serve(script: Vec<(u16, Value, Duration)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body, delay) in script {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    headers.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
                }
            }
            let header = |name: &str| headers.iter().find(|(k, _)| k == name).map(|(_, v)| v.clone());
            let mut raw = Vec::new();
            if let Some(len) = header("content-length") {
                raw.resize(len.parse().unwrap(), 0);
                reader.read_exact(&mut raw).unwrap();
            } else if header("transfer-encoding").is_some_and(|v| v.contains("chunked")) {
                loop {
                    let mut size = String::new();
                    reader.read_line(&mut size).unwrap();
                    let n = usize::from_str_radix(size.trim(), 16).unwrap();
                    let mut chunk = vec![0; n + 2];
                    reader.read_exact(&mut chunk).unwrap();
                    if n == 0 {
                        break;
                    }
                    raw.extend_from_slice(&chunk[..n]);
                }
            }
            log.lock().unwrap().push(Seen {
                headers: headers.clone(),
                body: serde_json::from_slice(&raw).unwrap_or(Value::Null),
            });
            thread::sleep(delay);
            let payload = body.to_string();
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    (url, seen)
}

fn ok(body: Value) -> (u16, Value, Duration) {
    (200, body, Duration::ZERO)
}

#[test]
fn embeddings_request_and_response() {
    std::env::set_var("IDS_WIRE_EMBED_KEY", "sk-wire-embed");
    let (url, seen) = serve(vec![ok(json!({
        "data": [
            {"index": 1, "embedding": [0.0, 2.0, 0.0]},
            {"index": 0, "embedding": [3.0, 0.0, 4.0]},
        ]
    }))]);
    let transport = HttpTransport::new(&url, Some("IDS_WIRE_EMBED_KEY"), Duration::from_secs(5));
    let emb = RemoteEmbedder::new(Box::new(transport), "embed-small", 3, 8);
    let out = emb.embed_batch(&["first", "second"]).unwrap();
    assert_eq!(out[0].values(), &[0.6, 0.0, 0.8]);
    assert_eq!(out[1].values(), &[0.0, 1.0, 0.0]);

    let req = &seen.lock().unwrap()[0];
    assert_eq!(req.body, json!({"model": "embed-small", "input": ["first", "second"]}));
    assert!(req.headers.contains(&("authorization".into(), "Bearer sk-wire-embed".into())));
}

#[test]
fn embeddings_dimension_checked() {
    let (url, _) = serve(vec![ok(json!({"data": [{"embedding": [1.0, 0.0]}]}))]);
    let emb = RemoteEmbedder::new(Box::new(HttpTransport::new(&url, None, Duration::from_secs(5))), "m", 3, 8);
    assert!(matches!(emb.embed("x"), Err(EmbeddingError::DimensionMismatch { expected: 3, found: 2 })));
}

#[test]
fn chat_request_and_label() {
    let (url, seen) = serve(vec![ok(json!({
        "choices": [{"message": {"role": "assistant", "content": "LABEL: Reconnaissance\nSequential port probing."}}]
    }))]);
    let agent = RemoteChatAgent::new(Box::new(HttpTransport::new(&url, None, Duration::from_secs(5))), "chat-model", 64);
    let classes = ClassSet::nf_bot_iot();
    let prompt = build_classification_prompt("{\"dst_port\":22}", &RetrievalResult::NoContext, &classes);
    let v = classify(&agent, &prompt, &classes).unwrap();
    assert_eq!(v.label, ClassLabel::Known("Reconnaissance".into()));

    let req = &seen.lock().unwrap()[0];
    assert_eq!(req.body["model"], "chat-model");
    assert_eq!(req.body["temperature"], json!(0.0));
    assert_eq!(req.body["messages"][0]["role"], "system");
    assert_eq!(req.body["messages"][0]["content"], json!(prompt.system_text));
    assert_eq!(req.body["messages"][1]["role"], "user");
    assert_eq!(req.body["messages"][1]["content"], json!(prompt.user_text));
    assert!(!req.headers.iter().any(|(k, _)| k == "authorization"));
}

#[test]
fn server_errors_are_retried() {
    let (url, seen) = serve(vec![
        (503, json!({"error": "busy"}), Duration::ZERO),
        (500, json!({"error": "oops"}), Duration::ZERO),
        ok(json!({"choices": [{"message": {"content": "LABEL: DoS"}}]})),
    ]);
    let agent = RemoteChatAgent::new(Box::new(HttpTransport::new(&url, None, Duration::from_secs(5))), "m", 16)
        .with_retry(RetryPolicy::no_wait(3));
    let classes = ClassSet::nf_bot_iot();
    let prompt = build_classification_prompt("{}", &RetrievalResult::NoContext, &classes);
    assert_eq!(classify(&agent, &prompt, &classes).unwrap().label, ClassLabel::Known("DoS".into()));
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn auth_failure_is_not_retried() {
    let (url, seen) = serve(vec![(401, json!({"error": "bad key"}), Duration::ZERO)]);
    let agent = RemoteChatAgent::new(Box::new(HttpTransport::new(&url, None, Duration::from_secs(5))), "m", 16)
        .with_retry(RetryPolicy::no_wait(3));
    let classes = ClassSet::nf_bot_iot();
    let prompt = build_classification_prompt("{}", &RetrievalResult::NoContext, &classes);
    assert!(matches!(classify(&agent, &prompt, &classes), Err(AgentError::AgentUnavailable(_))));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn slow_server_times_out() {
    let (url, _) = serve(vec![(200, json!({}), Duration::from_millis(1500))]);
    let agent = RemoteChatAgent::new(Box::new(HttpTransport::new(&url, None, Duration::from_millis(200))), "m", 16)
        .with_retry(RetryPolicy::no_wait(1));
    let classes = ClassSet::nf_bot_iot();
    let prompt = build_classification_prompt("{}", &RetrievalResult::NoContext, &classes);
    assert_eq!(classify(&agent, &prompt, &classes), Err(AgentError::ResponseTimeout));
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}/v1/chat");
    let agent = RemoteChatAgent::new(Box::new(HttpTransport::new(&url, None, Duration::from_secs(2))), "m", 16)
        .with_retry(RetryPolicy::no_wait(2));
    let classes = ClassSet::nf_bot_iot();
    let prompt = build_classification_prompt("{}", &RetrievalResult::NoContext, &classes);
    assert!(matches!(classify(&agent, &prompt, &classes), Err(AgentError::AgentUnavailable(_))));
}
