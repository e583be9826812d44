//! A local chat-completions stub that records request bodies.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub struct Recorded {
    pub path: String,
    pub body: String,
    pub authorization: Option<String>,
}

pub struct Reply {
    pub status: u16,
    pub body: String,
    pub delay: Duration,
}

impl Reply {
    pub fn ok(body: String) -> Self {
        Reply { status: 200, body, delay: Duration::ZERO }
    }

    pub fn status(status: u16) -> Self {
        Reply { status, body: r#"{"error":"stub"}"#.into(), delay: Duration::ZERO }
    }

    pub fn after(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

type Handler = dyn Fn(usize, &str) -> Reply + Send + Sync;

/// One connection per request (`Connection: close`), one thread per
/// connection.
pub struct StubServer {
    pub url: String,
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    requests: Arc<Mutex<Vec<Recorded>>>,
    worker: Option<JoinHandle<()>>,
}

impl StubServer {
    /// `handler` gets the 0-based arrival number and the request body.
    pub fn start(handler: impl Fn(usize, &str) -> Reply + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
        let addr = listener.local_addr().unwrap();
        let stop = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let worker = {
            let stop = Arc::clone(&stop);
            let requests = Arc::clone(&requests);
            thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    let requests = Arc::clone(&requests);
                    let handler = Arc::clone(&handler);
                    thread::spawn(move || serve(conn, &requests, handler.as_ref()));
                }
            })
        };
        StubServer { url: format!("http://{addr}"), addr, stop, requests, worker: Some(worker) }
    }

    pub fn requests(&self) -> Vec<Recorded> {
        self.requests.lock().unwrap().clone()
    }
}

fn serve(conn: TcpStream, requests: &Mutex<Vec<Recorded>>, handler: &Handler) {
    let mut reader = BufReader::new(conn.try_clone().expect("clone stream"));
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).is_err() {
        return;
    }
    let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
    let mut length = 0usize;
    let mut authorization = None;
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
            let value = value.trim();
            if name.eq_ignore_ascii_case("content-length") {
                length = value.parse().unwrap_or(0);
            } else if name.eq_ignore_ascii_case("authorization") {
                authorization = Some(value.to_string());
            }
        }
    }
    let mut body = vec![0u8; length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let body = String::from_utf8_lossy(&body).into_owned();
    let n = {
        let mut log = requests.lock().unwrap();
        log.push(Recorded { path, body: body.clone(), authorization });
        log.len() - 1
    };
    let reply = handler(n, &body);
    thread::sleep(reply.delay);
    let head = format!(
        "HTTP/1.1 {} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        reply.status,
        reply.body.len()
    );
    let mut conn = conn;
    let _ = conn.write_all(head.as_bytes()).and_then(|_| conn.write_all(reply.body.as_bytes()));
    let _ = conn.flush();
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

/// Text the stub returns for choice `i` of a request carrying `seed`.
pub fn choice_text(seed: u64, i: usize) -> String {
    format!("segment seed={seed} choice={i}")
}

/// Full-length choices labelled by seed and index, listed in reverse index
/// order. Requests without a seed use 0.
pub fn echo_choices(body: &str) -> String {
    let req: Value = serde_json::from_str(body).expect("request is JSON");
    let n = req["n"].as_u64().expect("n") as usize;
    let seed = req["seed"].as_u64().unwrap_or(0);
    let choices: Vec<Value> = (0..n)
        .rev()
        .map(|i| json!({"index": i, "message": {"role": "assistant", "content": choice_text(seed, i)}, "finish_reason": "length"}))
        .collect();
    json!({"choices": choices, "usage": {"completion_tokens": 30 * n}}).to_string()
}

/// A delay in `0..max_ms` derived from the request seed.
pub fn seeded_delay(body: &str, salt: u64, max_ms: u64) -> Duration {
    let req: Value = serde_json::from_str(body).expect("request is JSON");
    let seed = req["seed"].as_u64().unwrap_or(0);
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    Duration::from_millis((z ^ (z >> 31)) % max_ms)
}
