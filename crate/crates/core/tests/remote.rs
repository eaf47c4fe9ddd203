#![cfg(feature = "remote")]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use treerag::agents::{render_judgement, AgentConfig, GenerationRequest, TextGenerator};
use treerag::config::{BackendKind, BackendSection};
use treerag::remote::{remote_backends, HttpGenerator, HttpService};
use treerag::value::{score_search, SearchCandidate};
use treerag::{BackendError, Trajectory};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

/// Serves every request on a fresh port with `reply(path, body)`.
fn serve(reply: impl Fn(&str, &Value) -> (u16, String) + Send + 'static) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
            let mut length = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            let (status, text) = reply(&path, &body);
            log.lock().unwrap().push(Seen { path, auth, body });
            let response = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}"), seen)
}

#[test]
fn generation_request_shape_and_bearer_token() {
    let (base, seen) = serve(|_, body| {
        let n = body["n"].as_u64().unwrap() as usize;
        (200, json!({ "texts": vec!["**Thought:** t\n**Action:** Finish(x)"; n] }).to_string())
    });
    let service = HttpService::new(format!("{base}/gen"), Some("secret".into()), Duration::from_secs(5)).unwrap();
    let texts = HttpGenerator(service)
        .generate(&GenerationRequest {
            prompt_text: "prompt".into(),
            temperature: 0.7,
            max_new_tokens: 64,
            sample_count: 3,
        })
        .unwrap();
    assert_eq!(texts.len(), 3);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/gen");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer secret"));
    assert_eq!(
        seen[0].body,
        json!({"prompt": "prompt", "temperature": 0.7, "max_tokens": 64, "n": 3})
    );
}

#[test]
fn server_errors_are_unavailable_and_bad_json_is_invalid() {
    let (base, _) = serve(|path, _| match path {
        "/down" => (503, "{}".into()),
        _ => (200, "not json".into()),
    });
    let request = GenerationRequest {
        prompt_text: "p".into(),
        temperature: 0.0,
        max_new_tokens: 1,
        sample_count: 1,
    };
    let down = HttpGenerator(HttpService::new(format!("{base}/down"), None, Duration::from_secs(5)).unwrap());
    assert!(matches!(down.generate(&request), Err(BackendError::Unavailable(_))));
    let garbled = HttpGenerator(HttpService::new(format!("{base}/garbled"), None, Duration::from_secs(5)).unwrap());
    assert!(matches!(garbled.generate(&request), Err(BackendError::InvalidResponse(_))));
}

#[test]
fn unreachable_host_is_unavailable() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let service = HttpService::new(format!("http://{addr}/gen"), None, Duration::from_secs(2)).unwrap();
    let err = HttpGenerator(service)
        .generate(&GenerationRequest {
            prompt_text: "p".into(),
            temperature: 0.0,
            max_new_tokens: 1,
            sample_count: 1,
        })
        .unwrap_err();
    assert!(matches!(err, BackendError::Unavailable(_)));
}

#[test]
fn assembled_backends_talk_to_each_service() {
    let (base, seen) = serve(|path, body| match path {
        "/retrieve" => (
            200,
            json!({"documents": [
                {"doc_id": "d1", "title": "t", "text": "E0001's spouse is E0002.", "score": 2.0},
                {"doc_id": "d2", "title": "t", "text": "other", "score": 1.0}
            ]})
            .to_string(),
        ),
        "/value" => {
            let score = if body["kind"] == "search" { 0.25 } else { -0.5 };
            (200, json!({ "score": score }).to_string())
        }
        _ => (200, json!({"texts": [render_judgement(0.1, 0.2)]}).to_string()),
    });
    let section = BackendSection {
        kind: BackendKind::Remote,
        generation_url: Some(format!("{base}/generate")),
        retrieval_url: Some(format!("{base}/retrieve")),
        value_url: Some(format!("{base}/value")),
        token_env: "TREERAG_TEST_TOKEN_UNSET".into(),
        ..BackendSection::default()
    };
    let backends = remote_backends(&section, &AgentConfig::default(), 1).unwrap();
    let docs = backends.retriever.retrieve("spouse of E0001").unwrap();
    assert_eq!(docs.len(), 1);
    assert_eq!(docs[0].doc_id, "d1");
    let candidate = SearchCandidate {
        traj: Trajectory::new("q"),
        plan_text: "find spouse".into(),
        query: "spouse of E0001".into(),
        docs,
    };
    assert_eq!(score_search(backends.search_value.as_ref(), &candidate).unwrap(), 0.25);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].body, json!({"query": "spouse of E0001", "top_k": 1}));
    assert_eq!(seen[1].body["kind"], "search");
    assert_eq!(seen[1].body["candidate"]["queries"], json!(["spouse of E0001"]));
    assert!(seen.iter().all(|s| s.auth.is_none()));
}
