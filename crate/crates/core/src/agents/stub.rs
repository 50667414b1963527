//! A tiny HTTP server that answers chat-completions requests from fixtures.
//!
//! Fixture file format: a JSON array of rules, tried in order.
//!
//! ```json
//! [{"model": "m", "last_message_contains": "Hi", "status": 200,
//!   "body": {"choices": [{"message": {"content": "..."}}]}, "times": 1}]
//! ```
//!
//! `model` and `last_message_contains` are optional matchers; `times` limits
//! how often a rule fires. Unmatched requests get a 404.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_message_contains: Option<String>,
    #[serde(default = "ok")]
    pub status: u16,
    pub body: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<usize>,
}

fn ok() -> u16 {
    200
}

impl StubRule {
    fn matches(&self, request: &Value) -> bool {
        if let Some(m) = &self.model {
            if request.get("model").and_then(Value::as_str) != Some(m) {
                return false;
            }
        }
        if let Some(needle) = &self.last_message_contains {
            let last = request
                .get("messages")
                .and_then(Value::as_array)
                .and_then(|a| a.last())
                .and_then(|m| m.get("content"))
                .and_then(Value::as_str)
                .unwrap_or("");
            if !last.contains(needle.as_str()) {
                return false;
            }
        }
        true
    }
}

/// Build a chat-completions response body around `content`.
pub fn completion_body(content: &str, reasoning_tokens: Option<u64>) -> Value {
    let mut usage = serde_json::json!({"prompt_tokens": 100, "completion_tokens": 20});
    if let Some(r) = reasoning_tokens {
        usage["completion_tokens_details"] = serde_json::json!({"reasoning_tokens": r});
    }
    serde_json::json!({
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}],
        "usage": usage,
    })
}

struct Shared {
    rules: Mutex<Vec<(StubRule, usize)>>,
    requests: Mutex<Vec<RecordedRequest>>,
    stop: AtomicBool,
}

#[derive(Debug, Clone)]
pub struct RecordedRequest {
    pub authorization: Option<String>,
    pub body: Value,
}

pub struct StubServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(rules: Vec<StubRule>) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            rules: Mutex::new(rules.into_iter().map(|r| (r, 0)).collect()),
            requests: Mutex::new(Vec::new()),
            stop: AtomicBool::new(false),
        });
        let s = shared.clone();
        let handle = thread::spawn(move || {
            for stream in listener.incoming() {
                if s.stop.load(Ordering::SeqCst) {
                    break;
                }
                if let Ok(stream) = stream {
                    let s = s.clone();
                    thread::spawn(move || {
                        let _ = serve(stream, &s);
                    });
                }
            }
        });
        Ok(StubServer {
            addr,
            shared,
            handle: Some(handle),
        })
    }

    pub fn from_fixture_file(path: impl AsRef<std::path::Path>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let rules: Vec<StubRule> = serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Self::start(rules)
    }

    /// Base URL to put in a remote agent spec.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.shared.requests.lock().unwrap().clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(mut stream: TcpStream, shared: &Shared) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.is_empty() {
        return Ok(());
    }
    let mut content_length = 0usize;
    let mut authorization = None;
    loop {
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some((name, value)) = header.split_once(':') {
            match name.trim().to_ascii_lowercase().as_str() {
                "content-length" => content_length = value.trim().parse().unwrap_or(0),
                "authorization" => authorization = Some(value.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let request: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    shared.requests.lock().unwrap().push(RecordedRequest {
        authorization,
        body: request.clone(),
    });

    let (status, payload) = {
        let mut rules = shared.rules.lock().unwrap();
        let hit = rules
            .iter_mut()
            .find(|(r, used)| r.times.map_or(true, |t| *used < t) && r.matches(&request));
        match hit {
            Some((rule, used)) => {
                *used += 1;
                (rule.status, rule.body.to_string())
            }
            None => (404, r#"{"error":"no stub rule matched"}"#.to_string()),
        }
    };
    let response = format!(
        "HTTP/1.1 {status} STUB\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    stream.write_all(response.as_bytes())?;
    stream.flush()
}
