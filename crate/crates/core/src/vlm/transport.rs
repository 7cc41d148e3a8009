//! Ways of answering prompts: a live chat-completion endpoint, recorded
//! replay fixtures, and scripted answers for building those fixtures.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::prompt::PromptRequest;
use super::{io_err, Result, VlmError};

pub trait Transport {
    fn send(&mut self, request: &PromptRequest) -> Result<String>;
}

/// Stable SHA-256 over everything that shapes the answer. Images enter by
/// size and pixel digest, so re-encoding a PNG does not change the key.
pub fn request_hash(request: &PromptRequest) -> String {
    let images: Vec<String> = request
        .images
        .iter()
        .map(|img| {
            let mut h = Sha256::new();
            for p in &img.pixels {
                h.update(p);
            }
            format!("{}x{}:{}", img.width, img.height, hex::encode(h.finalize()))
        })
        .collect();
    let key = json!({
        "template": request.template.as_str(),
        "model": request.model,
        "temperature": request.temperature,
        "sample": request.sample,
        "text": request.text,
        "images": images,
        "segmentations": request.segmentations,
    });
    hex::encode(Sha256::digest(key.to_string().as_bytes()))
}

/// Recorded answers, one `<hash>.txt` per request.
#[derive(Clone, Debug)]
pub struct ReplayTransport {
    pub dir: PathBuf,
}

impl ReplayTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayTransport { dir: dir.into() }
    }

    pub fn path_for(dir: &Path, hash: &str) -> PathBuf {
        dir.join(format!("{hash}.txt"))
    }
}

impl Transport for ReplayTransport {
    fn send(&mut self, request: &PromptRequest) -> Result<String> {
        request.validate()?;
        let hash = request_hash(request);
        let path = Self::path_for(&self.dir, &hash);
        match std::fs::read_to_string(&path) {
            Ok(text) => Ok(text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(VlmError::FixtureMiss { hash }),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

/// Hands out queued answers in order, regardless of the request.
#[derive(Clone, Debug, Default)]
pub struct ScriptedTransport {
    pub answers: VecDeque<std::result::Result<String, String>>,
}

impl ScriptedTransport {
    pub fn new(answers: impl IntoIterator<Item = String>) -> Self {
        ScriptedTransport {
            answers: answers.into_iter().map(Ok).collect(),
        }
    }

    /// Queues a simulated transport failure.
    pub fn push_failure(&mut self, message: &str) {
        self.answers.push_back(Err(message.to_string()));
    }
}

impl Transport for ScriptedTransport {
    fn send(&mut self, request: &PromptRequest) -> Result<String> {
        request.validate()?;
        match self.answers.pop_front() {
            Some(Ok(a)) => Ok(a),
            Some(Err(m)) => Err(VlmError::Network(m)),
            None => Err(VlmError::Unavailable("scripted answers exhausted".into())),
        }
    }
}

/// Writes every successful answer of `inner` into a replay directory.
pub struct RecordingTransport<T> {
    pub inner: T,
    pub dir: PathBuf,
    pub recorded: usize,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(RecordingTransport { inner, dir, recorded: 0 })
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn send(&mut self, request: &PromptRequest) -> Result<String> {
        let answer = self.inner.send(request)?;
        let path = ReplayTransport::path_for(&self.dir, &request_hash(request));
        std::fs::write(&path, &answer).map_err(io_err(&path))?;
        self.recorded += 1;
        Ok(answer)
    }
}

/// OpenAI-style chat-completion endpoint. The bearer credential is read
/// from an environment variable at send time.
#[derive(Clone, Debug)]
pub struct LiveTransport {
    pub endpoint: String,
    pub credential_env: String,
    pub timeout: Duration,
}

pub const DEFAULT_CREDENTIAL_ENV: &str = "VISTREE_API_KEY";

impl LiveTransport {
    pub fn new(endpoint: &str) -> Self {
        LiveTransport {
            endpoint: endpoint.to_string(),
            credential_env: DEFAULT_CREDENTIAL_ENV.to_string(),
            timeout: Duration::from_secs(120),
        }
    }

    /// Request body with images inlined as base64 PNG data URLs, each
    /// followed by its segmentation when present.
    pub fn payload(request: &PromptRequest) -> Result<Value> {
        let mut content = vec![json!({"type": "text", "text": request.text})];
        for (i, img) in request.images.iter().enumerate() {
            let png = img.to_png()?;
            let url = format!(
                "data:image/png;base64,{}",
                base64::engine::general_purpose::STANDARD.encode(png)
            );
            content.push(json!({"type": "image_url", "image_url": {"url": url}}));
            if let Some(seg) = request.segmentations.get(i) {
                content.push(json!({"type": "text", "text": format!("Objects in image {}:\n{seg}", i + 1)}));
            }
        }
        Ok(json!({
            "model": request.model,
            "temperature": request.temperature,
            "messages": [{"role": "user", "content": content}],
        }))
    }
}

impl Transport for LiveTransport {
    fn send(&mut self, request: &PromptRequest) -> Result<String> {
        request.validate()?;
        let key = std::env::var(&self.credential_env)
            .map_err(|_| VlmError::Auth(format!("environment variable {} is not set", self.credential_env)))?;
        let body = Self::payload(request)?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let resp = agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(&body)
            .map_err(|e| VlmError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(|e| VlmError::Network(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(VlmError::Auth(format!("status {status}: {text}"))),
            _ => return Err(VlmError::Network(format!("status {status}: {text}"))),
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| VlmError::Parse {
            message: format!("response is not JSON: {e}"),
            raw: text.clone(),
        })?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| VlmError::Parse {
                message: "response has no choices[0].message.content".into(),
                raw: text,
            })
    }
}
