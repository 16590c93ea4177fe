use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use ndarray::Array2;
use proptest::prelude::*;
use segchange::textcond::{
    aggregate_temporal, condition_pair, conditioning, fit_length, ConditioningMode, HttpProvider, StubProvider,
    TextEmbedding, TextProvider,
};
use segchange::Error;

/// Serves one canned response per connection and reports each request body.
fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/embed", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut req = vec![0; len];
            reader.read_exact(&mut req).unwrap();
            tx.send(String::from_utf8(req).unwrap()).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn provider(url: &str, dim: usize) -> HttpProvider {
    HttpProvider::new(url, dim, Duration::from_secs(5))
}

#[test]
fn http_provider_parses_vectors() {
    let (url, rx) = serve(vec![(200, r#"{"vectors": [[1.0, 2.0], [0.5, -0.5]]}"#.into())]);
    let e = provider(&url, 2).embed("new roofs").unwrap();
    assert_eq!(e.valid_length(), 2);
    assert_eq!(e.vectors()[[1, 1]], -0.5);
    let sent: serde_json::Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
    assert_eq!(sent["prompt"], "new roofs");
}

#[test]
fn http_errors_are_classified() {
    let (url, _rx) = serve(vec![
        (503, "{}".into()),
        (429, "{}".into()),
        (400, "{}".into()),
        (200, r#"{"vectors": [[1.0, 2.0, 3.0]]}"#.into()),
        (200, "not json".into()),
    ]);
    let p = provider(&url, 2);
    let retriable = |r: segchange::Result<TextEmbedding>| match r {
        Err(Error::Provider { retriable, .. }) => retriable,
        other => panic!("expected a provider error, got {:?}", other.map(|e| e.len())),
    };
    assert!(retriable(p.embed("a")));
    assert!(retriable(p.embed("a")));
    assert!(!retriable(p.embed("a")));
    assert!(!retriable(p.embed("a")));
    assert!(!retriable(p.embed("a")));
}

#[test]
fn unreachable_service_is_retriable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let p = provider(&format!("http://127.0.0.1:{port}/embed"), 2);
    assert!(matches!(p.embed("x"), Err(Error::Provider { retriable: true, .. })));
}

#[test]
fn stub_is_deterministic_and_token_wise() {
    let a = StubProvider::new(6, 3);
    let e1 = a.embed("red roof appeared").unwrap();
    let e2 = StubProvider::new(6, 3).embed("red roof appeared").unwrap();
    assert_eq!(e1, e2);
    assert_eq!(e1.len(), 3);
    let single = a.embed("roof").unwrap();
    assert_eq!(single.vectors().row(0), e1.vectors().row(1));
    assert_ne!(StubProvider::new(6, 4).embed("roof").unwrap(), single);
    assert!(e1.vectors().iter().all(|v| (-1.0..1.0).contains(v)));
}

#[test]
fn static_mode_ignores_prompts_and_needs_a_template() {
    let p = StubProvider::new(4, 0);
    let a = conditioning(ConditioningMode::Static, Some("one"), "fixed words", &p).unwrap();
    let b = conditioning(ConditioningMode::Static, Some("two"), "fixed words", &p).unwrap();
    assert_eq!(a, b);
    assert!(matches!(conditioning(ConditioningMode::Static, None, "  ", &p), Err(Error::Config(_))));
    assert!(conditioning(ConditioningMode::None, Some("x"), "", &p).unwrap().is_none());
    let fallback = conditioning(ConditioningMode::Dynamic, None, "fixed words", &p).unwrap();
    assert_eq!(fallback, a);
}

#[test]
fn pair_aggregation_concatenates_valid_rows() {
    let p = StubProvider::new(3, 1);
    let e = condition_pair(ConditioningMode::Dynamic, Some("a b"), Some("c"), "", &p, 4).unwrap().unwrap();
    assert_eq!((e.len(), e.valid_length()), (4, 3));
    let c = p.embed("c").unwrap();
    assert_eq!(e.vectors().row(2), c.vectors().row(0));
    assert!(e.vectors().row(3).iter().all(|&v| v == 0.0));
    let one = condition_pair(ConditioningMode::Dynamic, Some("a"), None, "", &p, 4).unwrap().unwrap();
    assert_eq!(one.valid_length(), 2);
    assert_eq!(one.vectors().row(0), one.vectors().row(1));
    assert!(aggregate_temporal(&TextEmbedding::empty(2, 3), &TextEmbedding::empty(2, 4)).is_err());
    assert!(aggregate_temporal(&TextEmbedding::empty(2, 3), &TextEmbedding::empty(3, 3)).is_err());
}

#[test]
fn embedding_rejects_nonzero_padding() {
    let mut v = Array2::zeros((3, 2));
    v[[2, 0]] = 1.0;
    assert!(TextEmbedding::new(v, 1).is_err());
}

proptest! {
    #[test]
    fn fit_length_zeroes_padding(words in 0usize..10, max_len in 1usize..8, seed in any::<u64>()) {
        let prompt: Vec<String> = (0..words).map(|i| format!("w{i}")).collect();
        let e = StubProvider::new(3, seed).embed(&prompt.join(" ")).unwrap();
        let f = fit_length(&e, max_len);
        prop_assert_eq!(f.len(), max_len);
        prop_assert_eq!(f.valid_length(), words.min(max_len));
        for r in f.valid_length()..max_len {
            prop_assert!(f.vectors().row(r).iter().all(|&v| v == 0.0));
        }
    }
}
