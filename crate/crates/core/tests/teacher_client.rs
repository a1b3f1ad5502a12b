use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use tracefix::teacher::{
    cached_call, CacheMode, HttpTeacher, ResponseCache, RetryPolicy, ScriptedTeacher, Teacher, TeacherRequest,
};
use tracefix::Error;

fn request(text: &str, temperature: f64) -> TeacherRequest {
    TeacherRequest::user("teacher", text.to_owned(), temperature, 256)
}

#[test]
fn record_then_replay_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(dir.path()).unwrap();
    let teacher = ScriptedTeacher::new(["why\n```\nfix\n```"]);
    let req = request("fix this", 0.0);
    let recorded = cached_call(&teacher, Some(&cache), &req, CacheMode::Record).unwrap();
    let offline = ScriptedTeacher::new(["never used"]);
    let replayed = cached_call(&offline, Some(&cache), &req, CacheMode::Replay).unwrap();
    assert_eq!(recorded, replayed);
    assert_eq!(offline.call_count(), 0);
    // Recording again is served from the cache.
    cached_call(&teacher, Some(&cache), &req, CacheMode::Record).unwrap();
    assert_eq!(teacher.call_count(), 1);
    assert_eq!(cache.len().unwrap(), 1);
}

#[test]
fn replay_miss_names_the_digest() {
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(dir.path()).unwrap();
    let req = request("never recorded", 0.0);
    match cached_call(&ScriptedTeacher::new(["x"]), Some(&cache), &req, CacheMode::Replay) {
        Err(Error::CacheMiss { digest }) => assert_eq!(digest, req.digest()),
        other => panic!("expected cache miss, got {other:?}"),
    }
}

#[test]
fn live_mode_skips_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(dir.path()).unwrap();
    let t = ScriptedTeacher::new(["a", "b"]);
    let req = request("q", 0.0);
    assert_eq!(cached_call(&t, Some(&cache), &req, CacheMode::Live).unwrap().text, "a");
    assert_eq!(cached_call(&t, Some(&cache), &req, CacheMode::Live).unwrap().text, "b");
    assert!(cache.is_empty().unwrap());
}

#[test]
fn digests_do_not_collide() {
    let mut seen = HashSet::new();
    for i in 0..10_000u32 {
        let req = TeacherRequest::user(
            "m",
            format!("prompt {}", i / 4),
            [0.0, 0.2, 0.7, 1.0][(i % 4) as usize],
            64,
        );
        assert!(seen.insert(req.digest()), "collision at {i}");
    }
}

/// Minimal HTTP/1.1 server answering each connection with the next scripted
/// Request body and authorization header of each hit.
type Seen = Arc<std::sync::Mutex<Vec<(String, Option<String>)>>>;

/// (status, body). Records request bodies and authorization headers.
struct FakeServer {
    url: String,
    hits: Arc<AtomicUsize>,
    seen: Seen,
}

fn serve(script: Vec<(u16, String)>) -> FakeServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
    let (h, s) = (hits.clone(), seen.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let n = h.fetch_add(1, Ordering::SeqCst);
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                let lower = l.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(l["authorization:".len()..].trim().to_owned());
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            s.lock().unwrap().push((String::from_utf8(body).unwrap(), auth));
            let (status, reply) = script[n.min(script.len() - 1)].clone();
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    FakeServer { url, hits, seen }
}

const OK_BODY: &str = r#"{"content":"reasoning\n```\nfixed\n```","usage":{"input_tokens":12,"output_tokens":5}}"#;

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        initial_backoff: Duration::from_millis(10),
    }
}

#[test]
fn http_round_trip_and_wire_shape() {
    std::env::set_var("TEACHER_API_KEY", "sk-test-secret");
    let server = serve(vec![(200, OK_BODY.into())]);
    let t = HttpTeacher::new(&server.url, 4, fast_retry(), Duration::from_secs(5)).unwrap();
    assert!(!format!("{t:?}").contains("sk-test-secret"));
    let reply = t.complete(&request("fix", 0.2)).unwrap();
    assert_eq!(reply.parsed_code.as_deref(), Some("fixed\n"));
    assert_eq!(reply.token_usage.input_tokens, 12);
    let seen = server.seen.lock().unwrap();
    let body: serde_json::Value = serde_json::from_str(&seen[0].0).unwrap();
    assert_eq!(body["model"], "teacher");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "fix");
    assert_eq!(body["temperature"], 0.2);
    assert_eq!(body["max_tokens"], 256);
    assert_eq!(seen[0].1.as_deref(), Some("Bearer sk-test-secret"));
}

#[test]
fn http_retries_server_errors() {
    let server = serve(vec![(500, "{}".into()), (503, "{}".into()), (200, OK_BODY.into())]);
    let t = HttpTeacher::new(&server.url, 1, fast_retry(), Duration::from_secs(5)).unwrap();
    assert!(t.complete(&request("fix", 0.0)).is_ok());
    assert_eq!(server.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn http_gives_up_after_three_attempts() {
    let server = serve(vec![(500, "{}".into())]);
    let t = HttpTeacher::new(&server.url, 1, fast_retry(), Duration::from_secs(5)).unwrap();
    match t.complete(&request("fix", 0.0)) {
        Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("expected transport error, got {other:?}"),
    }
    assert_eq!(server.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn http_client_errors_are_not_retried() {
    let server = serve(vec![(401, "{}".into())]);
    let t = HttpTeacher::new(&server.url, 1, fast_retry(), Duration::from_secs(5)).unwrap();
    assert!(matches!(
        t.complete(&request("fix", 0.0)),
        Err(Error::Transport { attempts: 1, .. })
    ));
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let t = HttpTeacher::new(
        &format!("http://127.0.0.1:{port}/"),
        1,
        fast_retry(),
        Duration::from_secs(2),
    )
    .unwrap();
    assert!(matches!(
        t.complete(&request("fix", 0.0)),
        Err(Error::Transport { attempts: 3, .. })
    ));
}
