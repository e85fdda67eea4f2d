use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use memaudit::lm::{self, Model, NGramParams, NGramRefLM, RemoteConfig, RemoteModel, ScoreRequest};
use memaudit::ErrorKind;
use serde_json::{json, Value};

struct Request {
    path: String,
    authorization: Option<String>,
    body: Value,
}

type Handler = dyn Fn(&Request, usize) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server: one request per connection, scripted replies.
/// The handler also gets the running request number.
struct FakeServer {
    url: String,
    seen: Arc<Mutex<Vec<Request>>>,
}

impl FakeServer {
    fn start(handler: Box<Handler>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let seen: Arc<Mutex<Vec<Request>>> = Arc::default();
        let log = Arc::clone(&seen);
        let handler: Arc<Handler> = Arc::from(handler);
        let counter = Arc::new(AtomicUsize::new(0));
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let handler = Arc::clone(&handler);
                let log = Arc::clone(&log);
                let counter = Arc::clone(&counter);
                std::thread::spawn(move || {
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
                    let mut len = 0;
                    let mut authorization = None;
                    loop {
                        line.clear();
                        reader.read_line(&mut line).unwrap();
                        let l = line.trim_end();
                        if l.is_empty() {
                            break;
                        }
                        let (k, v) = l.split_once(':').unwrap();
                        match k.to_ascii_lowercase().as_str() {
                            "content-length" => len = v.trim().parse().unwrap(),
                            "authorization" => authorization = Some(v.trim().to_string()),
                            _ => {}
                        }
                    }
                    let mut body = vec![0; len];
                    reader.read_exact(&mut body).unwrap();
                    let req = Request {
                        path,
                        authorization,
                        body: serde_json::from_slice(&body).unwrap_or(Value::Null),
                    };
                    let n = counter.fetch_add(1, Ordering::SeqCst);
                    let (status, text) = handler(&req, n);
                    log.lock().unwrap().push(req);
                    let resp = format!(
                        "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                        text.len()
                    );
                    let _ = stream.write_all(resp.as_bytes());
                });
            }
        });
        FakeServer { url, seen }
    }

    fn requests(&self) -> usize {
        self.seen.lock().unwrap().len()
    }
}

fn reference() -> Arc<NGramRefLM> {
    let docs: Vec<Vec<u32>> = (0..30u32).map(|i| (0..40).map(|j| (i * 3 + j * j) % 17).collect()).collect();
    Arc::new(NGramRefLM::train(&docs, 17, NGramParams { order: 3, ..Default::default() }).unwrap())
}

/// Answers /score and /generate from a local model, the way a real server would.
fn serve_model(model: Arc<NGramRefLM>) -> Box<Handler> {
    Box::new(move |req, _| match req.path.as_str() {
        "/score" => {
            let seqs: Vec<ScoreRequest> = req.body["sequences"]
                .as_array()
                .unwrap()
                .iter()
                .map(|s| ScoreRequest {
                    sequence_id: s["sequence_id"].as_u64().unwrap(),
                    tokens: serde_json::from_value(s["tokens"].clone()).unwrap(),
                })
                .collect();
            let moments = req.body["with_moments"].as_bool().unwrap();
            let scores: Vec<_> = model.score(&seqs, moments).unwrap().into_iter().flatten().rev().collect();
            (200, json!({ "scores": scores }).to_string())
        }
        "/generate" => {
            let prefix: Vec<u32> = serde_json::from_value(req.body["prefix"].clone()).unwrap();
            let n = req.body["n"].as_u64().unwrap() as usize;
            (200, json!({ "tokens": model.generate_greedy(&prefix, n).unwrap() }).to_string())
        }
        _ => (404, "{}".into()),
    })
}

fn config(url: &str) -> RemoteConfig {
    RemoteConfig {
        batch_size: 3,
        max_in_flight: 2,
        retries: 2,
        timeout_secs: 5,
        ..RemoteConfig::new(url, 17)
    }
}

#[test]
fn remote_scores_equal_local_scores() {
    let local = reference();
    let server = FakeServer::start(serve_model(Arc::clone(&local)));
    let remote = RemoteModel::new(config(&server.url)).unwrap();
    let requests: Vec<ScoreRequest> = (0..10u64)
        .map(|i| ScoreRequest {
            sequence_id: 100 + i,
            tokens: (0..12).map(|j| ((i as u32 + j) * 5) % 17).collect(),
        })
        .collect();
    for moments in [false, true] {
        assert_eq!(remote.score(&requests, moments).unwrap(), local.score(&requests, moments).unwrap());
    }
    // ten sequences in batches of three, twice
    assert_eq!(server.requests(), 8);
    assert_eq!(
        lm::generate_greedy(&remote, &[1, 2, 3], 9).unwrap(),
        lm::generate_greedy(local.as_ref(), &[1, 2, 3], 9).unwrap()
    );
}

#[test]
fn busy_and_failing_servers_are_retried() {
    let local = reference();
    let inner = serve_model(local);
    let server = FakeServer::start(Box::new(move |req, n| match n {
        0 => (429, "{}".into()),
        1 => (503, "{}".into()),
        _ => inner(req, n),
    }));
    let remote = RemoteModel::new(config(&server.url)).unwrap();
    assert_eq!(lm::score_tokens(&remote, &[1, 2, 3], false).unwrap().len(), 3);
    assert_eq!(server.requests(), 3);

    let down = FakeServer::start(Box::new(|_, _| (500, "{}".into())));
    let err = lm::score_tokens(&RemoteModel::new(config(&down.url)).unwrap(), &[1, 2], false).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Remote);
    assert!(err.is_retryable());
    assert_eq!(down.requests(), 3);
}

#[test]
fn malformed_replies_are_not_retried() {
    let cases: Vec<(u16, &str)> = vec![
        (200, "not json"),
        (400, "{}"),
        (200, r#"{"scores": []}"#),
        (200, r#"{"scores": [{"sequence_id": 0, "position": 0, "token_id": 1, "logp": 0.5}]}"#),
        (200, r#"{"scores": [{"sequence_id": 9, "position": 0, "token_id": 1, "logp": -1.0}]}"#),
    ];
    for (status, body) in cases {
        let server = FakeServer::start(Box::new(move |_, _| (status, body.to_string())));
        let remote = RemoteModel::new(config(&server.url)).unwrap();
        let err = lm::score_tokens(&remote, &[1], false).unwrap_err();
        assert_eq!(err.kind(), ErrorKind::Remote, "{status} {body}");
        assert!(!err.is_retryable(), "{status} {body}");
        assert_eq!(server.requests(), 1);
    }
    let server = FakeServer::start(Box::new(|_, _| (200, r#"{"tokens": [1, 2]}"#.into())));
    let err = lm::generate_greedy(&RemoteModel::new(config(&server.url)).unwrap(), &[1], 3).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Remote);
}

#[test]
fn api_key_is_sent_as_bearer_token() {
    std::env::set_var(lm::API_KEY_ENV, "s3cret");
    let server = FakeServer::start(serve_model(reference()));
    let remote = RemoteModel::new(config(&server.url)).unwrap();
    std::env::remove_var(lm::API_KEY_ENV);
    lm::score_tokens(&remote, &[4, 5], true).unwrap();
    let seen = server.seen.lock().unwrap();
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer s3cret"));
    assert_eq!(seen[0].path, "/score");
}
