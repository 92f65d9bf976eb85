//! Completion backends: the remote chat-completions client, the scripted
//! fixture backend for deterministic tests, and a recording wrapper that
//! turns live runs into replayable fixtures.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CompletionRequest, GatewayError, TokenUsage};

/// What a backend hands back for one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendResponse {
    pub text: String,
    pub usage: Option<TokenUsage>,
}

impl BackendResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: None,
        }
    }
}

/// A completion source. Implementations must be safe to call from several
/// worker threads at once.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<BackendResponse, GatewayError>;
}

/// Fixture key for a user prompt: hex sha-256 of its bytes.
pub fn prompt_key(user: &str) -> String {
    hex::encode(Sha256::digest(user.as_bytes()))
}

// ---------------------------------------------------------------------------
// Remote backend

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_k: Option<u32>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<TokenUsage>,
}

const ERROR_BODY_LIMIT: usize = 2048;

fn truncate_body(body: String) -> String {
    if body.len() > ERROR_BODY_LIMIT {
        let mut cut = ERROR_BODY_LIMIT;
        while !body.is_char_boundary(cut) {
            cut -= 1;
        }
        format!("{}… ({} bytes total)", &body[..cut], body.len())
    } else {
        body
    }
}

/// Chat-completions client: POST `{base_url}/chat/completions`, answer read
/// from `choices[0].message.content`. Bearer auth comes from the named
/// environment variable; when unset, the request goes out without an
/// Authorization header (local deployments often need none).
pub struct RemoteBackend {
    base_url: String,
    auth_env: String,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(
        base_url: impl Into<String>,
        timeout: Duration,
        auth_env: impl Into<String>,
    ) -> Result<Self, GatewayError> {
        let base_url = base_url.into();
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::InvalidRequest {
                model_id: String::new(),
                message: format!("cannot build http client: {e}"),
            })?;
        Ok(Self {
            base_url,
            auth_env: auth_env.into(),
            client,
        })
    }
}

impl Backend for RemoteBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<BackendResponse, GatewayError> {
        let model_id = request.model_id.clone();
        let url = format!(
            "{}/chat/completions",
            self.base_url.trim_end_matches('/')
        );
        let mut messages = Vec::with_capacity(2);
        if !request.system.is_empty() {
            messages.push(WireMessage {
                role: "system",
                content: &request.system,
            });
        }
        messages.push(WireMessage {
            role: "user",
            content: &request.user,
        });
        let body = WireRequest {
            model: &request.model_id,
            messages,
            temperature: request.params.temperature,
            top_p: request.params.top_p,
            max_tokens: request.params.max_tokens,
            top_k: request.params.top_k,
        };
        let mut http = self.client.post(&url).json(&body);
        if let Ok(token) = std::env::var(&self.auth_env) {
            if !token.is_empty() {
                http = http.bearer_auth(token);
            }
        }
        let response = http.send().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout {
                    model_id: model_id.clone(),
                }
            } else {
                GatewayError::Transport {
                    model_id: model_id.clone(),
                    message: e.to_string(),
                }
            }
        })?;
        let status = response.status().as_u16();
        let text = response.text().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout {
                    model_id: model_id.clone(),
                }
            } else {
                GatewayError::Transport {
                    model_id: model_id.clone(),
                    message: format!("reading response body: {e}"),
                }
            }
        })?;
        if !(200..300).contains(&status) {
            return Err(GatewayError::Api {
                model_id,
                status,
                body: truncate_body(text),
            });
        }
        let parsed: WireResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::MalformedResponse {
                model_id: model_id.clone(),
                detail: format!("{e}; body: {}", truncate_body(text.clone())),
            })?;
        let content = parsed
            .choices
            .first()
            .and_then(|c| c.message.content.clone())
            .ok_or_else(|| GatewayError::MalformedResponse {
                model_id: model_id.clone(),
                detail: "response carries no choices[0].message.content".to_string(),
            })?;
        Ok(BackendResponse {
            text: content,
            usage: parsed.usage,
        })
    }
}

// ---------------------------------------------------------------------------
// Scripted backend

/// One replayable fixture line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub model_id: String,
    /// Either the hex digest of the exact user prompt, `kind:<call-kind>`
    /// to answer every call of that kind, or `*` to answer anything.
    pub key: String,
    pub response: String,
}

/// Deterministic backend answering from a fixture table. Lookup order per
/// call: exact prompt digest, then `kind:<kind>`, then `*`; a miss reports
/// the digest that was probed.
#[derive(Debug)]
pub struct ScriptedBackend {
    entries: BTreeMap<(String, String), String>,
}

impl ScriptedBackend {
    pub fn from_entries(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        Self {
            entries: entries
                .into_iter()
                .map(|e| ((e.model_id, e.key), e.response))
                .collect(),
        }
    }

    /// Load a JSONL fixture (`{"model_id": …, "key": …, "response": …}` per
    /// line). Malformed lines are reported with their line number.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| GatewayError::Io {
            context: format!("opening fixture {}", path.display()),
            source,
        })?;
        let mut entries = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| GatewayError::Io {
                context: format!("reading fixture {}", path.display()),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry =
                serde_json::from_str(&line).map_err(|e| GatewayError::FixtureFile {
                    path: path.display().to_string(),
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            entries.push(entry);
        }
        Ok(Self::from_entries(entries))
    }

    fn lookup(&self, model_id: &str, key: &str) -> Option<&String> {
        self.entries
            .get(&(model_id.to_string(), key.to_string()))
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<BackendResponse, GatewayError> {
        let digest = prompt_key(&request.user);
        let kind_key = format!("kind:{}", request.kind.as_str());
        let hit = self
            .lookup(&request.model_id, &digest)
            .or_else(|| self.lookup(&request.model_id, &kind_key))
            .or_else(|| self.lookup(&request.model_id, "*"));
        match hit {
            Some(text) => Ok(BackendResponse::text(text.clone())),
            None => Err(GatewayError::FixtureMiss {
                model_id: request.model_id.clone(),
                key: digest,
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Recording wrapper

/// Pass-through backend that captures every successful completion keyed by
/// exact prompt digest, for later replay through [`ScriptedBackend`].
pub struct RecordingBackend<B> {
    inner: B,
    recorded: Mutex<Vec<FixtureEntry>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            recorded: Mutex::new(Vec::new()),
        }
    }

    pub fn entries(&self) -> Vec<FixtureEntry> {
        self.recorded.lock().expect("recorder mutex poisoned").clone()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), GatewayError> {
        let path = path.as_ref();
        let mut file = File::create(path).map_err(|source| GatewayError::Io {
            context: format!("creating {}", path.display()),
            source,
        })?;
        for entry in self.entries() {
            let line = serde_json::to_string(&entry).expect("fixture entry serializes");
            writeln!(file, "{line}").map_err(|source| GatewayError::Io {
                context: format!("writing {}", path.display()),
                source,
            })?;
        }
        Ok(())
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<BackendResponse, GatewayError> {
        let response = self.inner.complete(request)?;
        self.recorded
            .lock()
            .expect("recorder mutex poisoned")
            .push(FixtureEntry {
                model_id: request.model_id.clone(),
                key: prompt_key(&request.user),
                response: response.text.clone(),
            });
        Ok(response)
    }
}

// ---------------------------------------------------------------------------
