//! A minimal chat-completions server for tests. Replies come from a
//! transcript fixture: reformulation prompts are answered with the aspect's
//! template (the question substituted for `{question}`), audit prompts with
//! the audit reply.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
pub struct Transcript {
    pub reformulation: BTreeMap<String, String>,
    pub audit: String,
    /// Audit reply for rewrites containing this aspect's marker, if any.
    #[serde(default)]
    pub audit_overrides: BTreeMap<String, String>,
}

impl Transcript {
    pub fn load(name: &str) -> Self {
        // Resolves from either crate that includes this module.
        let path = format!("{}/../core/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
    }

    fn reply(&self, prompt: &str) -> String {
        if prompt.starts_with("You are an expert in mathematics and logic.") {
            let rewritten = between(prompt, "#Rewritten Question Start#\n", "\n#Rewritten Question End#");
            for (marker, reply) in &self.audit_overrides {
                if rewritten.contains(marker.as_str()) {
                    return reply.clone();
                }
            }
            return self.audit.clone();
        }
        let question = between(prompt, "#Given Question Start#\n", "\n#Given Question End#");
        let aspect = if prompt.contains("Add a story background") {
            "background"
        } else if prompt.contains("Invent a new, abstract mathematical term") {
            "term"
        } else {
            "subproblem"
        };
        self.reformulation[aspect].replace("{question}", question)
    }
}

fn between<'a>(s: &'a str, start: &str, end: &str) -> &'a str {
    let a = s.find(start).map(|i| i + start.len()).unwrap_or(0);
    let b = s[a..].find(end).map(|i| a + i).unwrap_or(s.len());
    &s[a..b]
}

pub struct MockServer {
    pub url: String,
    pub requests: Arc<AtomicUsize>,
    pub bodies: Arc<Mutex<Vec<serde_json::Value>>>,
    pub auth_headers: Arc<Mutex<Vec<Option<String>>>>,
}

impl MockServer {
    /// Serves `transcript`; the first `fail_first` requests get HTTP 503.
    pub fn start(transcript: Transcript, fail_first: usize) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let auth_headers = Arc::new(Mutex::new(Vec::new()));
        let transcript = Arc::new(transcript);
        {
            let (requests, bodies, auth_headers) = (requests.clone(), bodies.clone(), auth_headers.clone());
            thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(stream) = stream else { continue };
                    let (t, r, b, a) = (
                        transcript.clone(),
                        requests.clone(),
                        bodies.clone(),
                        auth_headers.clone(),
                    );
                    thread::spawn(move || serve(stream, &t, &r, &b, &a, fail_first));
                }
            });
        }
        Self {
            url,
            requests,
            bodies,
            auth_headers,
        }
    }

    pub fn count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

fn serve(
    stream: TcpStream,
    transcript: &Transcript,
    requests: &AtomicUsize,
    bodies: &Mutex<Vec<serde_json::Value>>,
    auth_headers: &Mutex<Vec<Option<String>>>,
    fail_first: usize,
) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let mut content_length = 0usize;
        let mut auth = None;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((name, value)) = line.split_once(':') {
                match name.trim().to_ascii_lowercase().as_str() {
                    "content-length" => content_length = value.trim().parse().unwrap_or(0),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
        }
        let mut body = vec![0u8; content_length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let n = requests.fetch_add(1, Ordering::SeqCst);
        auth_headers.lock().unwrap().push(auth);
        let (status, payload) = if !request_line.starts_with("POST ") || !request_line.contains("/v1/chat/completions")
        {
            ("404 Not Found", r#"{"error":"not found"}"#.to_string())
        } else if n < fail_first {
            ("503 Service Unavailable", r#"{"error":"busy"}"#.to_string())
        } else {
            let json: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let prompt = json["messages"][0]["content"].as_str().unwrap_or_default().to_string();
            bodies.lock().unwrap().push(json);
            let reply = transcript.reply(&prompt);
            (
                "200 OK",
                serde_json::json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": reply}}]})
                    .to_string(),
            )
        };
        let response = format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}",
            payload.len()
        );
        if writer.write_all(response.as_bytes()).is_err() {
            return;
        }
    }
}
