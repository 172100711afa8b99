//! The LLM oracle against a scripted local endpoint.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use cbdebug_core::feedback::{llm_oracle, task_description, FeedbackSource, LlmEndpoint};
use serde_json::Value;

/// Answers each request with the body `script(user message)` and records the
/// request bodies.
fn stub(script: fn(&str) -> String, n: usize) -> (String, Arc<Mutex<Vec<Value>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = thread::spawn(move || {
        for stream in listener.incoming().take(n) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let req: Value = serde_json::from_slice(&body).unwrap();
            let user = req["messages"][1]["content"].as_str().unwrap_or("").to_string();
            log.lock().unwrap().push(req);
            let reply = script(&user);
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.len(),
                reply
            )
            .unwrap();
        }
    });
    (url, seen, handle)
}

fn scripted(name: &str) -> String {
    let text = match name {
        "water background" | "sky colour" => "SPURIOUS: scenery, not the bird",
        "beak shape" | "wing pattern" => "NOT SPURIOUS. Part of the bird.",
        _ => "I would rather not say {}",
    };
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

#[test]
fn feedback_is_exactly_the_scripted_set() {
    let concepts: Vec<(usize, String)> = ["water background", "beak shape", "sky colour", "wing pattern", "mystery unit"]
        .iter()
        .enumerate()
        .map(|(i, n)| (i, n.to_string()))
        .collect();
    let (url, seen, handle) = stub(scripted, concepts.len());
    let fb = llm_oracle(&concepts, task_description("waterbirds").unwrap(), &LlmEndpoint::new(url)).unwrap();
    handle.join().unwrap();

    assert_eq!(fb.source, FeedbackSource::LlmOracle);
    assert_eq!(fb.c_spur, BTreeSet::from([0, 2]));
    assert_eq!(fb.abstained(), vec![4]);
    assert!(!fb.verdicts[&4].spurious);
    assert_eq!(fb.verdicts.len(), 5);
    assert_eq!(fb.warnings.len(), 1);

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 5);
    for (req, (_, name)) in seen.iter().zip(&concepts) {
        assert_eq!(req["temperature"], 0);
        assert_eq!(req["messages"][0]["role"], "system");
        assert_eq!(req["messages"][1]["content"], name.as_str());
    }
}

#[test]
fn non_json_reply_abstains() {
    let (url, _, handle) = stub(|_| "not json at all".into(), 1);
    let fb = llm_oracle(&[(7, "tail".into())], "birds", &LlmEndpoint::new(url)).unwrap();
    handle.join().unwrap();
    assert!(fb.c_spur.is_empty());
    assert_eq!(fb.abstained(), vec![7]);
}
