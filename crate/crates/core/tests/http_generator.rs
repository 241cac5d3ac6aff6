use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use dpksa::generation::{
    GenerationError, GenerationRequest, Generator, GeneratorEndpointConfig, HttpGenerator,
    RetryPolicy,
};

struct Reply {
    status: u16,
    body: String,
    delay: Duration,
}

impl Reply {
    fn ok(content: &str) -> Self {
        Self {
            status: 200,
            body: serde_json::json!({
                "choices": [{ "message": { "role": "assistant", "content": content } }]
            })
            .to_string(),
            delay: Duration::ZERO,
        }
    }

    fn status(status: u16) -> Self {
        Self {
            status,
            body: "{}".into(),
            delay: Duration::ZERO,
        }
    }
}

#[derive(Default)]
struct Seen {
    requests: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    last: Mutex<Option<(String, String)>>,
}

/// A one-request-per-connection HTTP stub. `reply` gets the 0-based request
/// number and the request body.
fn stub<F>(reply: F) -> (String, Arc<Seen>)
where
    F: Fn(usize, &str) -> Reply + Send + Sync + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Seen::default());
    let reply = Arc::new(reply);
    let s = Arc::clone(&seen);
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let (s, reply) = (Arc::clone(&s), Arc::clone(&reply));
            thread::spawn(move || serve(stream, &s, reply.as_ref()));
        }
    });
    (url, seen)
}

fn serve(mut stream: TcpStream, seen: &Seen, reply: &(dyn Fn(usize, &str) -> Reply + Send + Sync)) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
        return;
    }
    let mut length = 0;
    let mut auth = String::new();
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
            "authorization" => auth = value.trim().to_owned(),
            _ => {}
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    let body = String::from_utf8(body).unwrap();

    let n = seen.requests.fetch_add(1, Ordering::SeqCst);
    let now = seen.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    seen.peak.fetch_max(now, Ordering::SeqCst);
    *seen.last.lock().unwrap() = Some((request_line.trim().to_owned(), auth));
    let r = reply(n, &body);
    thread::sleep(r.delay);
    seen.in_flight.fetch_sub(1, Ordering::SeqCst);
    let _ = write!(
        stream,
        "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        r.status,
        r.body.len(),
        r.body
    );
}

fn config(url: &str) -> GeneratorEndpointConfig {
    let mut c = GeneratorEndpointConfig::new(url, "test-model");
    c.retry = RetryPolicy {
        max_retries: 3,
        initial_backoff_ms: 5,
        max_backoff_ms: 20,
    };
    c.timeout_secs = 5.0;
    c
}

fn request(prompt: &str) -> GenerationRequest {
    GenerationRequest::new(prompt.to_owned(), 16)
        .unwrap()
        .with_seed(9)
}

#[test]
fn sends_chat_completion_and_parses_reply() {
    let (url, seen) = stub(|_, body| {
        let v: serde_json::Value = serde_json::from_str(body).unwrap();
        assert_eq!(v["model"], "test-model");
        assert_eq!(v["messages"][0]["role"], "user");
        assert_eq!(v["messages"][0]["content"], "hello there");
        assert_eq!(v["max_tokens"], 16);
        assert_eq!(v["seed"], 9);
        Reply::ok("OK")
    });
    std::env::set_var("STUB_TOKEN_FOR_TEST", "s3cret");
    let mut c = config(&url);
    c.auth_env = Some("STUB_TOKEN_FOR_TEST".into());
    let g = HttpGenerator::new(c).unwrap();
    assert_eq!(g.generate(&request("hello there")).unwrap(), "OK");
    let (line, auth) = seen.last.lock().unwrap().clone().unwrap();
    assert!(line.starts_with("POST /v1/chat/completions"), "{line}");
    assert_eq!(auth, "Bearer s3cret");
}

#[test]
fn missing_auth_variable_is_reported() {
    let mut c = config("http://127.0.0.1:9/v1");
    c.auth_env = Some("SURELY_UNSET_VARIABLE_FOR_TEST".into());
    assert!(matches!(
        HttpGenerator::new(c),
        Err(GenerationError::MissingAuth(_))
    ));
}

#[test]
fn retries_rate_limits_then_succeeds() {
    let (url, seen) = stub(|n, _| {
        if n < 2 {
            Reply::status(429)
        } else {
            Reply::ok("third time")
        }
    });
    let g = HttpGenerator::new(config(&url)).unwrap();
    assert_eq!(g.generate(&request("q")).unwrap(), "third time");
    assert_eq!(seen.requests.load(Ordering::SeqCst), 3);
}

#[test]
fn gives_up_after_retry_budget() {
    let (url, seen) = stub(|_, _| Reply::status(503));
    let g = HttpGenerator::new(config(&url)).unwrap();
    assert!(matches!(
        g.generate(&request("q")),
        Err(GenerationError::Status { status: 503, .. })
    ));
    assert_eq!(seen.requests.load(Ordering::SeqCst), 4);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = stub(|_, _| Reply::status(400));
    let g = HttpGenerator::new(config(&url)).unwrap();
    assert!(matches!(
        g.generate(&request("q")),
        Err(GenerationError::Status { status: 400, .. })
    ));
    assert_eq!(seen.requests.load(Ordering::SeqCst), 1);
}

#[test]
fn malformed_body_is_an_error() {
    let (url, _) = stub(|_, _| Reply {
        status: 200,
        body: r#"{"choices":[]}"#.into(),
        delay: Duration::ZERO,
    });
    let g = HttpGenerator::new(config(&url)).unwrap();
    assert!(matches!(
        g.generate(&request("q")),
        Err(GenerationError::MalformedResponse(_))
    ));
}

#[test]
fn slow_endpoint_times_out() {
    let (url, _) = stub(|_, _| Reply {
        delay: Duration::from_secs(3),
        ..Reply::ok("late")
    });
    let mut c = config(&url);
    c.timeout_secs = 0.3;
    c.retry.max_retries = 0;
    let g = HttpGenerator::new(c).unwrap();
    assert!(matches!(
        g.generate(&request("q")),
        Err(GenerationError::Timeout)
    ));
}

#[test]
fn in_flight_requests_are_capped() {
    let (url, seen) = stub(|_, _| Reply {
        delay: Duration::from_millis(100),
        ..Reply::ok("x")
    });
    let mut c = config(&url);
    c.max_parallel = 2;
    let g = Arc::new(HttpGenerator::new(c).unwrap());
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let g = Arc::clone(&g);
            thread::spawn(move || g.generate(&request("q")).unwrap())
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap(), "x");
    }
    assert_eq!(seen.requests.load(Ordering::SeqCst), 8);
    assert_eq!(seen.peak.load(Ordering::SeqCst), 2);
}
