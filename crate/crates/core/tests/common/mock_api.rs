//! Scripted OpenAI-compatible endpoint on a loopback port.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};

#[derive(Clone, Debug)]
pub struct Captured {
    pub head: String,
    pub body: Value,
}

pub struct Reply {
    pub status: u16,
    pub content_type: &'static str,
    pub body: String,
}

impl Reply {
    pub fn chat(content: &str) -> Self {
        Self {
            status: 200,
            content_type: "application/json",
            body: json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]}).to_string(),
        }
    }

    /// Streamed reply split into `parts` deltas.
    pub fn sse(content: &str, parts: usize) -> Self {
        let chars: Vec<char> = content.chars().collect();
        let size = chars.len().div_ceil(parts.max(1)).max(1);
        let mut body = String::new();
        body.push_str(&format!("data: {}\n\n", json!({"choices": [{"delta": {"role": "assistant"}}]})));
        for chunk in chars.chunks(size) {
            let piece: String = chunk.iter().collect();
            body.push_str(&format!("data: {}\n\n", json!({"choices": [{"delta": {"content": piece}}]})));
        }
        body.push_str("data: [DONE]\n\n");
        Self {
            status: 200,
            content_type: "text/event-stream",
            body,
        }
    }

    pub fn status(status: u16) -> Self {
        Self {
            status,
            content_type: "application/json",
            body: json!({"error": {"message": "scripted failure"}}).to_string(),
        }
    }
}

type Responder = dyn Fn(usize, &Value) -> Reply + Send + Sync;

pub struct MockApi {
    pub url: String,
    requests: Arc<Mutex<Vec<Captured>>>,
}

impl MockApi {
    /// `respond(call_index, request_body)` scripts every reply.
    pub fn start(respond: impl Fn(usize, &Value) -> Reply + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let respond: Arc<Responder> = Arc::new(respond);
        let counter = Arc::new(AtomicUsize::new(0));
        let log = Arc::clone(&requests);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let (respond, log, counter) = (Arc::clone(&respond), Arc::clone(&log), Arc::clone(&counter));
                thread::spawn(move || serve(stream, &*respond, &log, &counter));
            }
        });
        Self { url, requests }
    }

    /// Always answers with the user message, reversed, streamed when the
    /// request asks for it.
    pub fn echo_reversed() -> Self {
        Self::start(|_, body| {
            let answer: String = user_message(body).chars().rev().collect();
            if body["stream"] == true {
                Reply::sse(&answer, 3)
            } else {
                Reply::chat(&answer)
            }
        })
    }

    pub fn requests(&self) -> Vec<Captured> {
        self.requests.lock().unwrap().clone()
    }
}

pub fn user_message(body: &Value) -> String {
    body["messages"][1]["content"].as_str().unwrap_or_default().to_string()
}

fn serve(stream: TcpStream, respond: &Responder, log: &Mutex<Vec<Captured>>, counter: &AtomicUsize) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut head = String::new();
    let mut length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap_or(0);
            }
        }
        let end = line == "\r\n";
        head.push_str(&line);
        if end {
            break;
        }
    }
    let mut body = vec![0u8; length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let index = counter.fetch_add(1, Ordering::SeqCst);
    log.lock().unwrap().push(Captured { head, body: body.clone() });
    let reply = respond(index, &body);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {} X\r\nContent-Type: {}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        reply.status,
        reply.content_type,
        reply.body.len(),
        reply.body
    );
    let _ = stream.flush();
}
