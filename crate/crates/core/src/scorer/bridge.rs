//! Client for an external scorer process speaking newline-delimited JSON.
//!
//! ```text
//! {"type":"hello","id":0}
//!   -> {"type":"hello","id":0,"model_id":..,"mask_token":..,"vocab_size":..}
//! {"type":"tokenize_check","id":n,"words":[..]}
//!   -> {"id":n,"single":[bool,..]}
//! {"type":"score","id":n,"text":..,"candidates":[..],"want_hidden":bool}
//!   -> {"id":n,"log_probs":[..],"hidden":[..]?}
//! ```
//!
//! Any request may instead be answered with
//! `{"type":"error","id":n,"message":..}`. One request is in flight per
//! connection at a time.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{ScoreRequest, ScoreResponse, Scorer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BridgeEndpoint {
    /// `tcp://host:port`
    Tcp(String),
    /// Any other string: a command line spawned with piped stdio.
    Command(Vec<String>),
}

impl BridgeEndpoint {
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if let Some(addr) = spec.strip_prefix("tcp://") {
            if addr.is_empty() {
                return Err(Error::Bridge("empty tcp address".into()));
            }
            return Ok(BridgeEndpoint::Tcp(addr.to_owned()));
        }
        let argv: Vec<String> = spec.split_whitespace().map(str::to_owned).collect();
        if argv.is_empty() {
            return Err(Error::Bridge("empty bridge endpoint".into()));
        }
        Ok(BridgeEndpoint::Command(argv))
    }

    /// `override_spec` (from the environment) wins over the configured spec.
    pub fn resolve(spec: &str, override_spec: Option<&str>) -> Result<Self> {
        match override_spec.filter(|s| !s.trim().is_empty()) {
            Some(o) => Self::parse(o),
            None => Self::parse(spec),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct BridgeHello {
    pub model_id: String,
    pub mask_token: String,
    pub vocab_size: u64,
    #[serde(default)]
    pub leading_space: Option<bool>,
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    next_id: u64,
}

impl Connection {
    fn call(&mut self, mut message: Value) -> Result<Value> {
        let id = self.next_id;
        self.next_id += 1;
        message["id"] = json!(id);
        let mut line = serde_json::to_string(&message)?;
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::Bridge(format!("write failed: {e}")))?;

        let mut buf = String::new();
        let n = self
            .reader
            .read_line(&mut buf)
            .map_err(|e| Error::Bridge(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(Error::Bridge("bridge closed the connection".into()));
        }
        let response: Value = serde_json::from_str(buf.trim())
            .map_err(|e| Error::Bridge(format!("malformed response {buf:?}: {e}")))?;
        if response.get("id").and_then(Value::as_u64) != Some(id) {
            return Err(Error::Bridge(format!(
                "response id {:?} does not match request id {id}",
                response.get("id")
            )));
        }
        if response.get("type").and_then(Value::as_str) == Some("error") {
            let msg = response
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or("unspecified error");
            return Err(Error::Bridge(msg.to_owned()));
        }
        Ok(response)
    }
}

pub struct BridgeScorer {
    conn: Mutex<Connection>,
    hello: BridgeHello,
    child: Option<Child>,
}

impl std::fmt::Debug for BridgeScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeScorer").field("hello", &self.hello).finish()
    }
}

impl BridgeScorer {
    pub fn connect(endpoint: &BridgeEndpoint) -> Result<Self> {
        match endpoint {
            BridgeEndpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)
                    .map_err(|e| Error::Bridge(format!("connect {addr}: {e}")))?;
                let reader = stream
                    .try_clone()
                    .map_err(|e| Error::Bridge(e.to_string()))?;
                Self::from_streams(Box::new(BufReader::new(reader)), Box::new(stream))
            }
            BridgeEndpoint::Command(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| Error::Bridge(format!("spawn {:?}: {e}", argv[0])))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                let mut scorer =
                    Self::from_streams(Box::new(BufReader::new(stdout)), Box::new(stdin))?;
                scorer.child = Some(child);
                Ok(scorer)
            }
        }
    }

    /// Performs the hello handshake over an already-open transport.
    pub fn from_streams(
        reader: Box<dyn BufRead + Send>,
        writer: Box<dyn Write + Send>,
    ) -> Result<Self> {
        let mut conn = Connection {
            reader,
            writer,
            next_id: 0,
        };
        let response = conn.call(json!({"type": "hello"}))?;
        let hello: BridgeHello = serde_json::from_value(response)
            .map_err(|e| Error::Bridge(format!("bad hello: {e}")))?;
        if hello.mask_token.is_empty() {
            return Err(Error::Bridge("hello carries an empty mask token".into()));
        }
        Ok(BridgeScorer {
            conn: Mutex::new(conn),
            hello,
            child: None,
        })
    }

    pub fn hello(&self) -> &BridgeHello {
        &self.hello
    }

    fn call(&self, message: Value) -> Result<Value> {
        self.conn
            .lock()
            .map_err(|_| Error::Bridge("connection poisoned".into()))?
            .call(message)
    }
}

impl Drop for BridgeScorer {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn f64_array(v: &Value, field: &str) -> Result<Vec<Option<f64>>> {
    v.get(field)
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Bridge(format!("response lacks {field}")))
        .map(|xs| xs.iter().map(Value::as_f64).collect())
}

impl Scorer for BridgeScorer {
    fn model_id(&self) -> &str {
        &self.hello.model_id
    }

    fn mask_token(&self) -> &str {
        &self.hello.mask_token
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse> {
        if request.candidates.is_empty() {
            return Err(Error::invalid("empty candidate list"));
        }
        let n_masks = request.text.matches(self.mask_token()).count();
        if n_masks != 1 {
            return Err(Error::MaskCount(n_masks));
        }
        let response = self.call(json!({
            "type": "score",
            "text": request.text,
            "candidates": request.candidates,
            "want_hidden": request.want_hidden,
        }))?;
        let raw = f64_array(&response, "log_probs")?;
        if raw.len() != request.candidates.len() {
            return Err(Error::Bridge(format!(
                "{} scores for {} candidates",
                raw.len(),
                request.candidates.len()
            )));
        }
        let mut log_scores = Vec::with_capacity(raw.len());
        for (score, cand) in raw.into_iter().zip(&request.candidates) {
            match score {
                Some(x) if x.is_finite() => log_scores.push(x),
                _ => return Err(Error::OutOfVocabulary(cand.clone())),
            }
        }
        let hidden = match response.get("hidden") {
            Some(Value::Array(_)) if request.want_hidden => Some(
                f64_array(&response, "hidden")?
                    .into_iter()
                    .map(|x| x.ok_or_else(|| Error::Bridge("non-numeric hidden value".into())))
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        Ok(ScoreResponse {
            log_scores,
            hidden,
            model_id: self.hello.model_id.clone(),
        })
    }

    fn tokenize_check(&self, words: &[String]) -> Result<Vec<bool>> {
        let response = self.call(json!({"type": "tokenize_check", "words": words}))?;
        let single: Vec<bool> = response
            .get("single")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Bridge("response lacks single".into()))?
            .iter()
            .map(|b| b.as_bool().unwrap_or(false))
            .collect();
        if single.len() != words.len() {
            return Err(Error::Bridge(format!(
                "{} verdicts for {} words",
                single.len(),
                words.len()
            )));
        }
        Ok(single)
    }

    fn supports_hidden(&self) -> bool {
        true
    }
}
