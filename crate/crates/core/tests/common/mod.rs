#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::json;

use parallel_icl::domain::{Demonstration, Query};

/// Next-token probabilities by direct enumeration over tasks, computed in
/// probability space. `tables[t][q]` is task `t`'s answer to symbol `q`.
pub fn oracle_probabilities(
    tables: &[Vec<usize>],
    epsilon: f64,
    answers: usize,
    demos: &[(usize, usize)],
    query: usize,
    after_first_token: bool,
) -> Vec<f64> {
    let lik = |t: usize, q: usize, a: usize| {
        if tables[t][q] == a {
            1.0 - epsilon
        } else {
            epsilon / (answers as f64 - 1.0)
        }
    };
    let joint: Vec<f64> = (0..tables.len())
        .map(|t| {
            demos
                .iter()
                .fold(1.0 / tables.len() as f64, |acc, (q, a)| acc * lik(t, *q, *a))
        })
        .collect();
    let evidence: f64 = joint.iter().sum();
    let mut p = vec![0.0; answers + 1];
    for (t, j) in joint.iter().enumerate() {
        for (a, slot) in p.iter_mut().take(answers).enumerate() {
            *slot += j / evidence * lik(t, query, a);
        }
    }
    let answer_mass = if after_first_token { 1e-9 } else { 1.0 - 1e-9 };
    for x in p.iter_mut().take(answers) {
        *x *= answer_mass;
    }
    p[answers] = 1.0 - answer_mass;
    p
}

pub fn synthetic_demo(id: &str, q: usize, a: usize, feature: &[f64]) -> Demonstration {
    Demonstration {
        id: id.into(),
        image_feature: Some(parallel_icl::numeric::FeatureVector::new(feature.to_vec()).unwrap()),
        text_feature: Some(parallel_icl::numeric::FeatureVector::new(feature.to_vec()).unwrap()),
        payload: json!({"query_symbol": q, "answer_symbol": a}),
        task: None,
    }
}

pub fn synthetic_query(id: &str, q: usize, feature: &[f64]) -> Query {
    Query {
        id: id.into(),
        image_feature: Some(parallel_icl::numeric::FeatureVector::new(feature.to_vec()).unwrap()),
        text_feature: Some(parallel_icl::numeric::FeatureVector::new(feature.to_vec()).unwrap()),
        payload: json!({"query_symbol": q}),
        reference_answer: None,
        task: None,
    }
}

/// A received request.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub method: String,
    pub path: String,
    pub body: Vec<u8>,
}

type Handler = dyn Fn(&Recorded) -> (u16, Vec<u8>) + Send + Sync;

/// Minimal HTTP/1.1 server answering every request through `handler`, one
/// thread per connection, closing after each response.
pub struct StubServer {
    pub url: String,
    pub log: Arc<Mutex<Vec<Recorded>>>,
}

impl StubServer {
    pub fn start(handler: impl Fn(&Recorded) -> (u16, Vec<u8>) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let log = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let shared = Arc::clone(&log);
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let (handler, log) = (Arc::clone(&handler), Arc::clone(&shared));
                thread::spawn(move || serve(stream, &*handler, &log));
            }
        });
        Self { url, log }
    }

    pub fn requests(&self) -> Vec<Recorded> {
        self.log.lock().unwrap().clone()
    }

    pub fn count(&self, path: &str) -> usize {
        self.requests().iter().filter(|r| r.path == path).count()
    }
}

fn serve(stream: TcpStream, handler: &Handler, log: &Mutex<Vec<Recorded>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut length = 0;
    loop {
        let mut header = String::new();
        reader.read_line(&mut header).unwrap();
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some((k, v)) = header.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap();
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    let req = Recorded { method, path, body };
    log.lock().unwrap().push(req.clone());
    let (status, body) = handler(&req);
    let mut stream = stream;
    let head = format!(
        "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(&body);
    let _ = stream.flush();
}

pub fn handshake_body(vocab: usize) -> Vec<u8> {
    json!({"vocab_size": vocab, "model_id": "stub"})
        .to_string()
        .into_bytes()
}
