use counterstyle_core::client::{external_generate, EndpointConfig, ExternalReply};
use counterstyle_core::pairs::{
    generate_pairs, ExternalGenerator, PairKind, Prompt, StyleRole, StyleSpec,
};
use counterstyle_core::world;
use counterstyle_core::Error;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

/// Serves scripted HTTP statuses, one connection per script entry. A 200
/// status answers with a chat-completion body whose content comes from
/// `reply_for` applied to the request body; other statuses send a stub
/// error body.
fn spawn_mock(
    script: Vec<u16>,
    reply_for: impl Fn(&str) -> String + Send + 'static,
) -> (String, Arc<AtomicUsize>, std::thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let hits2 = hits.clone();
    let handle = std::thread::spawn(move || {
        for status in script {
            let (mut stream, _) = listener.accept().unwrap();
            hits2.fetch_add(1, Ordering::SeqCst);
            let mut buf = Vec::new();
            let mut chunk = [0u8; 1024];
            let body_start;
            loop {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                    body_start = pos + 4;
                    break;
                }
            }
            let head = String::from_utf8_lossy(&buf[..body_start]).to_string();
            assert!(
                head.contains("Authorization: Bearer "),
                "missing bearer credential in request:\n{head}"
            );
            assert!(head.starts_with("POST /v1/chat/completions"));
            let content_length: usize = head
                .lines()
                .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length: ").map(str::to_string))
                .and_then(|v| v.trim().parse().ok())
                .expect("request must carry a content length");
            while buf.len() < body_start + content_length {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
            }
            let request_body = String::from_utf8_lossy(&buf[body_start..]).to_string();
            let (status_line, body) = if status == 200 {
                let content = reply_for(&request_body);
                let payload = serde_json::json!({
                    "choices": [{"message": {"role": "assistant", "content": content}}]
                })
                .to_string();
                ("HTTP/1.1 200 OK", payload)
            } else {
                (
                    match status {
                        500 => "HTTP/1.1 500 Internal Server Error",
                        503 => "HTTP/1.1 503 Service Unavailable",
                        401 => "HTTP/1.1 401 Unauthorized",
                        _ => "HTTP/1.1 400 Bad Request",
                    },
                    format!("{{\"error\":\"scripted {status}\"}}"),
                )
            };
            let response = format!(
                "{status_line}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}"), hits, handle)
}

fn test_endpoint(base_url: &str, key_env: &str) -> EndpointConfig {
    let mut cfg = EndpointConfig::new(base_url, "mock-model");
    cfg.api_key_env = key_env.to_string();
    cfg.backoff_ms = 5;
    cfg.max_retries = 3;
    cfg
}

#[test]
fn fixed_reply_comes_back_verbatim() {
    let (url, hits, handle) = spawn_mock(vec![200], |_| "OK".to_string());
    std::env::set_var("COUNTERSTYLE_API_KEY_MOCK_A", "k-1");
    let cfg = test_endpoint(&url, "COUNTERSTYLE_API_KEY_MOCK_A");
    let reply = external_generate(&cfg, "hello", 1.0, 16).unwrap();
    assert_eq!(reply, ExternalReply { text: "OK".into(), retries: 0 });
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    handle.join().unwrap();
}

#[test]
fn transient_500_is_retried_once_and_recorded() {
    let (url, hits, handle) = spawn_mock(vec![500, 200], |_| "recovered".to_string());
    std::env::set_var("COUNTERSTYLE_API_KEY_MOCK_B", "k-2");
    let cfg = test_endpoint(&url, "COUNTERSTYLE_API_KEY_MOCK_B");
    let reply = external_generate(&cfg, "hello", 0.7, 16).unwrap();
    assert_eq!(reply.text, "recovered");
    assert_eq!(reply.retries, 1);
    assert_eq!(hits.load(Ordering::SeqCst), 2);
    handle.join().unwrap();
}

#[test]
fn missing_credential_fails_before_any_request() {
    let (url, hits, _handle) = spawn_mock(vec![], |_| String::new());
    let cfg = test_endpoint(&url, "COUNTERSTYLE_API_KEY_MOCK_UNSET");
    let err = external_generate(&cfg, "hello", 1.0, 16).unwrap_err();
    assert!(matches!(err, Error::MissingCredential(name) if name.contains("MOCK_UNSET")));
    assert_eq!(hits.load(Ordering::SeqCst), 0, "no request may be issued");
}

#[test]
fn persistent_failures_exhaust_retries() {
    let (url, hits, handle) = spawn_mock(vec![503, 503, 503, 503], |_| String::new());
    std::env::set_var("COUNTERSTYLE_API_KEY_MOCK_C", "k-3");
    let cfg = test_endpoint(&url, "COUNTERSTYLE_API_KEY_MOCK_C");
    let err = external_generate(&cfg, "hello", 1.0, 16).unwrap_err();
    match err {
        Error::Endpoint { attempts, msg } => {
            assert_eq!(attempts, 4);
            assert!(msg.contains("503"), "{msg}");
        }
        other => panic!("expected endpoint error, got {other}"),
    }
    assert_eq!(hits.load(Ordering::SeqCst), 4);
    handle.join().unwrap();
}

#[test]
fn client_errors_are_not_retried() {
    let (url, hits, handle) = spawn_mock(vec![401], |_| String::new());
    std::env::set_var("COUNTERSTYLE_API_KEY_MOCK_D", "k-4");
    let cfg = test_endpoint(&url, "COUNTERSTYLE_API_KEY_MOCK_D");
    let err = external_generate(&cfg, "hello", 1.0, 16).unwrap_err();
    match err {
        Error::Endpoint { attempts, msg } => {
            assert_eq!(attempts, 1);
            assert!(msg.contains("401"), "{msg}");
        }
        other => panic!("expected endpoint error, got {other}"),
    }
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    handle.join().unwrap();
}

#[test]
fn pair_generation_consumes_mock_responses() {
    // two pairs, two variants each: the mock echoes a response whose
    // filler depends on whether the request was styled
    let (url, _hits, handle) = spawn_mock(vec![200; 4], |request| {
        if request.contains("STYLE_REDACT") {
            "RESP REDACTED w01 EOS".to_string()
        } else {
            "RESP NAME_0 w01".to_string()
        }
    });
    std::env::set_var("COUNTERSTYLE_API_KEY_MOCK_E", "k-5");
    let generator = ExternalGenerator {
        config: test_endpoint(&url, "COUNTERSTYLE_API_KEY_MOCK_E"),
        temperature: 1.0,
        max_tokens: 32,
    };
    let arts = world::synth_articles(3, 2, (8, 8));
    let prompts: Vec<Prompt> = arts
        .iter()
        .map(|a| Prompt::Tokens(world::prompt_tokens(a, world::Style::None)))
        .collect();
    let desired = StyleSpec::token(world::Style::Redact, StyleRole::Desired).unwrap();
    let (set, report) = generate_pairs(
        &generator,
        &prompts,
        &desired,
        &StyleSpec::null(),
        PairKind::Enc,
        11,
        2,
        1,
    )
    .unwrap();
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    assert_eq!(set.pairs.len(), 2);
    for p in &set.pairs {
        assert_eq!(p.chosen, world::encode("RESP REDACTED w01 EOS").unwrap());
        // the unstyled reply had no terminator; ingestion appends one
        assert_eq!(p.rejected, world::encode("RESP NAME_0 w01 EOS").unwrap());
        assert_eq!(p.perceived_prompt, p.provenance.control_prompt);
    }
    handle.join().unwrap();
}
