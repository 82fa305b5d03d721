use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use dnc_core::backend::{Backend, CompletionRequest, HttpBackend, HttpConfig, Phase, RetryPolicy};
use dnc_core::Error;

/// Serves one canned `(status, body)` per connection, returning the request bodies seen.
fn serve(responses: Vec<(u16, &'static str)>) -> (String, thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            seen.push(String::from_utf8(buf).unwrap());
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
        seen
    });
    (url, handle)
}

fn backend(url: String, attempts: u32) -> HttpBackend {
    HttpBackend::new(HttpConfig {
        endpoint: url,
        model: "m".into(),
        api_key: "k".into(),
        timeout: Duration::from_secs(5),
        retry: RetryPolicy {
            max_attempts: attempts,
            base_delay: Duration::from_millis(1),
            factor: 2.0,
            jitter: false,
        },
    })
}

fn request() -> CompletionRequest {
    CompletionRequest::new("q1", Phase::Divide, 0, "Q: 1+1?", 0.7, 64).unwrap()
}

const OK: &str = r#"{"choices":[{"message":{"content":"So the answer is (B)."}}],"usage":{"prompt_tokens":7,"completion_tokens":6}}"#;

#[test]
fn retries_transient_statuses_then_succeeds() {
    let (url, server) = serve(vec![(429, "{}"), (500, "{}"), (200, OK)]);
    let c = backend(url, 5).complete(&request()).unwrap();
    assert_eq!(c.text, "So the answer is (B).");
    assert_eq!((c.prompt_tokens, c.output_tokens), (7, 6));
    let bodies = server.join().unwrap();
    assert_eq!(bodies.len(), 3);
    assert!(bodies.iter().all(|b| b == &bodies[0]), "retries resend the same body");
    let body: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(body["temperature"], 0.7);
    assert_eq!(body["max_tokens"], 64);
}

#[test]
fn gives_up_after_max_attempts() {
    let (url, server) = serve(vec![(503, "{}"), (503, "{}")]);
    match backend(url, 2).complete(&request()) {
        Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("{other:?}"),
    }
    server.join().unwrap();
}

#[test]
fn rejected_credentials_are_not_retried() {
    let (url, server) = serve(vec![(401, "{}")]);
    let err = backend(url, 5).complete(&request()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err:?}");
    assert_eq!(server.join().unwrap().len(), 1);
}
