//! The HTTP transport against a one-shot local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;

use featgen::agents::{
    Agent, AgentContext, AgentError, ChatMessage, ChatRequest, ChatTransport, HttpTransport, LlmAgent,
    LlmSettings,
};
use featgen::expr::{FeatureExpr, FeatureSubset};

/// Serves `replies` in order, one per connection, and returns the raw
/// requests it saw.
fn serve(replies: Vec<String>) -> (String, thread::JoinHandle<Vec<(String, String)>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        let mut seen = Vec::new();
        for body in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut head = String::new();
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
                head.push_str(&line);
            }
            let mut req = vec![0; len];
            reader.read_exact(&mut req).unwrap();
            seen.push((head, String::from_utf8(req).unwrap()));
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
        seen
    });
    (url, handle)
}

fn settings(url: String) -> LlmSettings {
    LlmSettings {
        base_url: url,
        model: "test-model".into(),
        temperature: 0.2,
        timeout_secs: 5,
    }
}

fn chat(content: &str) -> String {
    serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] }).to_string()
}

#[test]
fn posts_json_with_bearer_key() {
    let (url, server) = serve(vec![chat("hello")]);
    let t = HttpTransport::with_key(&settings(url), Some("sk-test".into()));
    let req = ChatRequest {
        model: "test-model".into(),
        messages: vec![ChatMessage::new("user", "hi")],
        temperature: 0.2,
    };
    assert_eq!(t.complete(&req).unwrap(), "hello");
    let seen = server.join().unwrap();
    let (head, body) = &seen[0];
    assert!(head.starts_with("POST /v1/chat/completions"));
    assert!(head.to_ascii_lowercase().contains("authorization: bearer sk-test"));
    let json: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(json["model"], "test-model");
    assert_eq!(json["temperature"], 0.2);
    assert_eq!(json["messages"][0]["content"], "hi");
}

#[test]
fn agent_retries_over_http() {
    let (url, server) = serve(vec![
        chat("I think multiplying is good."),
        chat("```\nGEN multiply f1 f2\nRATIONALE: the product tracks the label\n```"),
    ]);
    let s = settings(url);
    let agent = LlmAgent::new(Box::new(HttpTransport::with_key(&s, None)), &s, "pairwise interactions");
    let ctx = AgentContext::new(0, FeatureSubset::new(["f1", "f2"].map(FeatureExpr::base), None));
    let p = agent.propose(&ctx).unwrap();
    assert_eq!(p.generate_count(), 1);
    assert_eq!(p.rationale, "the product tracks the label");
    let seen = server.join().unwrap();
    assert_eq!(seen.len(), 2);
    let second: serde_json::Value = serde_json::from_str(&seen[1].1).unwrap();
    assert_eq!(second["messages"].as_array().unwrap().len(), 4);
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let s = settings(format!("http://127.0.0.1:{port}/v1"));
    let agent = LlmAgent::new(Box::new(HttpTransport::with_key(&s, None)), &s, "x");
    let ctx = AgentContext::new(0, FeatureSubset::new(["f1"].map(FeatureExpr::base), None));
    assert!(matches!(agent.propose(&ctx), Err(AgentError::AgentUnavailable { attempts: 3, .. })));
}
