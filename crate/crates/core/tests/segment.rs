use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use mintiqa::segment::{segment_external, segment_external_batch, segment_rule_based, EndpointConfig, SegmentError};
use mintiqa::StyleLexicon;
use proptest::prelude::*;

/// What the stub service does with each request.
#[derive(Clone, Copy)]
enum Reply {
    Json(&'static str),
    Status(u16),
    Stall,
}

struct Seen {
    authorization: Option<String>,
    body: String,
}

/// One-thread HTTP stub; returns its URL and a channel of observed requests.
fn stub(reply: Reply) -> (String, mpsc::Receiver<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/segment", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let (mut len, mut auth) = (0usize, None);
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(line["authorization:".len()..].trim().to_owned());
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let _ = tx.send(Seen {
                authorization: auth,
                body: String::from_utf8(body).unwrap(),
            });
            let (status, payload) = match reply {
                Reply::Json(p) => (200, p),
                Reply::Status(s) => (s, "{}"),
                Reply::Stall => {
                    thread::sleep(Duration::from_millis(800));
                    (200, "{}")
                }
            };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    (url, rx)
}

fn config(url: String) -> EndpointConfig {
    EndpointConfig {
        endpoint: Some(url),
        timeout_ms: 300,
        bearer_token: Some("s3cret".into()),
        max_in_flight: 2,
    }
}

const RAW: &str = "a gloomy castle, oil painting";

#[test]
fn service_answer_is_used_verbatim() {
    let (url, seen) = stub(Reply::Json(
        r#"{"style":"oil painting","content":"a castle","atmosphere":"gloomy"}"#,
    ));
    let r = segment_external(RAW, &config(url), &StyleLexicon::default()).unwrap();
    assert!(!r.fallback);
    assert_eq!(r.segmented.style, "oil painting");
    assert_eq!(
        r.segmented.composed,
        format!("{RAW} style: oil painting; content: a castle; atmosphere: gloomy")
    );
    let req = seen.recv().unwrap();
    assert_eq!(req.authorization.as_deref(), Some("Bearer s3cret"));
    let body: serde_json::Value = serde_json::from_str(&req.body).unwrap();
    assert_eq!(
        body,
        serde_json::json!({"prompt": RAW, "fields": ["style", "content", "atmosphere"]})
    );
}

#[test]
fn failures_fall_back_to_the_rules() {
    let lex = StyleLexicon::default();
    let rules = segment_rule_based(RAW, &lex).unwrap();
    for reply in [
        Reply::Stall,
        Reply::Status(500),
        Reply::Json("not json"),
        Reply::Json(r#"{"style":"x"}"#),
        Reply::Json(r#"{"style":" ","content":"c","atmosphere":"a"}"#),
    ] {
        let (url, _seen) = stub(reply);
        let r = segment_external(RAW, &config(url), &lex).unwrap();
        assert!(r.fallback);
        assert!(r.warning.is_some());
        assert_eq!(r.segmented, rules);
    }
}

#[test]
fn unreachable_service_falls_back() {
    // Bind then drop to get a port that refuses connections.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let r = segment_external(
        RAW,
        &config(format!("http://127.0.0.1:{port}/")),
        &StyleLexicon::default(),
    )
    .unwrap();
    assert!(r.fallback);
}

#[test]
fn missing_endpoint_and_blank_prompt_are_errors() {
    let lex = StyleLexicon::default();
    assert!(matches!(
        segment_external(RAW, &EndpointConfig::default(), &lex),
        Err(SegmentError::NoEndpoint)
    ));
    let (url, _seen) = stub(Reply::Status(500));
    assert!(matches!(
        segment_external("   ", &config(url), &lex),
        Err(SegmentError::EmptyPrompt)
    ));
    assert!(segment_rule_based("", &lex).is_none());
}

#[test]
fn batch_keeps_input_order() {
    let (url, seen) = stub(Reply::Json(r#"{"style":"anime","content":"c","atmosphere":""}"#));
    let raws: Vec<String> = (0..5).map(|i| format!("prompt number {i}")).collect();
    let out = segment_external_batch(&raws, &config(url), &StyleLexicon::default()).unwrap();
    assert_eq!(out.len(), 5);
    for (r, raw) in out.iter().zip(&raws) {
        assert!(r.segmented.composed.starts_with(raw.as_str()));
        assert!(!r.fallback);
    }
    assert_eq!(seen.try_iter().count(), 5);
}

#[test]
fn env_overrides_apply() {
    let cfg = EndpointConfig::default()
        .with_env(|k| match k {
            "MINTIQA_SEGMENT_ENDPOINT" => Some("http://h/x".into()),
            "MINTIQA_SEGMENT_TIMEOUT_MS" => Some("42".into()),
            _ => None,
        })
        .unwrap();
    assert_eq!(cfg.endpoint.as_deref(), Some("http://h/x"));
    assert_eq!(cfg.timeout_ms, 42);
    assert!(EndpointConfig::default()
        .with_env(|k| (k == "MINTIQA_SEGMENT_MAX_IN_FLIGHT").then(|| "many".into()))
        .is_err());
    assert!(EndpointConfig::from_toml("endpoint = 'http://h'\nretries = 3").is_err());
}

const WORDS: &[&str] = &[
    "a",
    "red",
    "cube",
    "on",
    "the",
    "table",
    "castle",
    "dog",
    "running",
    "city",
    "night",
    "painting",
    "anime",
    "sketch",
    "gloomy",
    "cheerful",
    "serene",
    "photograph",
    "with",
    "two",
    "cats",
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn segmenting_the_composed_prompt_keeps_the_style(idx in prop::collection::vec(0..WORDS.len(), 1..12)) {
        let lex = StyleLexicon::default();
        let raw = idx.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" ");
        let once = segment_rule_based(&raw, &lex).unwrap();
        prop_assert!(once.composed.starts_with(&raw));
        let twice = segment_rule_based(&once.composed, &lex).unwrap();
        prop_assert_eq!(twice.style, once.style);
    }

    #[test]
    fn rules_are_a_pure_function(idx in prop::collection::vec(0..WORDS.len(), 1..12)) {
        let lex = StyleLexicon::default();
        let raw = idx.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" ");
        prop_assert_eq!(segment_rule_based(&raw, &lex), segment_rule_based(&raw, &lex));
    }
}
