use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::provider::{Provider, ProviderError, Request, RetryPolicy};

/// Wire format spoken by the endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiKind {
    /// `POST {endpoint}/models/{model}:generateContent` with an
    /// `x-goog-api-key` header.
    #[default]
    Gemini,
    /// `POST {endpoint}/chat/completions` with a bearer token.
    #[serde(rename = "openai", alias = "open_ai")]
    OpenAi,
}

/// Connection settings for [`HttpProvider`]. The key itself is never stored
/// here, only the name of the environment variable that holds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub api: ApiKind,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_min_secs: f64,
    pub backoff_max_secs: f64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            endpoint: "https://generativelanguage.googleapis.com/v1beta".into(),
            model: "gemini-3-pro-preview".into(),
            api_key_env: "GEMINI_API_KEY".into(),
            api: ApiKind::Gemini,
            timeout_secs: 300,
            max_retries: 2,
            backoff_min_secs: 1.0,
            backoff_max_secs: 4.0,
        }
    }
}

impl ProviderConfig {
    pub fn retry_policy(&self) -> RetryPolicy {
        let d = |s: f64| Duration::try_from_secs_f64(s.max(0.0)).unwrap_or(Duration::ZERO);
        RetryPolicy {
            max_retries: self.max_retries,
            backoff_min: d(self.backoff_min_secs),
            backoff_max: d(self.backoff_max_secs),
        }
    }
}

/// JSON-over-HTTPS chat/vision backend.
pub struct HttpProvider {
    config: ProviderConfig,
    key: String,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpProvider")
            .field("config", &self.config)
            .field("key", &"<redacted>")
            .finish()
    }
}

impl HttpProvider {
    /// Reads the key from the configured environment variable.
    pub fn from_env(config: ProviderConfig) -> Result<Self, ProviderError> {
        let key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| ProviderError::MissingKey(config.api_key_env.clone()))?;
        Self::with_key(config, key)
    }

    pub fn with_key(config: ProviderConfig, key: String) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| ProviderError::Network(e.to_string()))?;
        Ok(HttpProvider { config, key, client })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn scrub(&self, s: &str) -> String {
        if self.key.is_empty() {
            s.to_string()
        } else {
            s.replace(&self.key, "<redacted>")
        }
    }

    fn body(&self, req: &Request) -> (String, Value) {
        let b64 = req
            .image_png
            .as_ref()
            .map(|png| base64::engine::general_purpose::STANDARD.encode(png));
        let base = self.config.endpoint.trim_end_matches('/');
        match self.config.api {
            ApiKind::Gemini => {
                let mut parts = vec![json!({ "text": req.user })];
                if let Some(data) = b64 {
                    parts.push(json!({ "inline_data": { "mime_type": "image/png", "data": data } }));
                }
                let body = json!({
                    "systemInstruction": { "parts": [{ "text": req.system }] },
                    "contents": [{ "role": "user", "parts": parts }],
                });
                (format!("{base}/models/{}:generateContent", self.config.model), body)
            }
            ApiKind::OpenAi => {
                let user = match b64 {
                    Some(data) => json!([
                        { "type": "text", "text": req.user },
                        { "type": "image_url", "image_url": { "url": format!("data:image/png;base64,{data}") } },
                    ]),
                    None => json!(req.user),
                };
                let body = json!({
                    "model": self.config.model,
                    "messages": [
                        { "role": "system", "content": req.system },
                        { "role": "user", "content": user },
                    ],
                });
                (format!("{base}/chat/completions"), body)
            }
        }
    }

    fn send_once(&self, req: &Request) -> Result<String, ProviderError> {
        let (url, body) = self.body(req);
        tracing::debug!(
            url = %url,
            model = %self.config.model,
            user_bytes = req.user.len(),
            image_bytes = req.image_png.as_ref().map_or(0, Vec::len),
            "provider request (sampling settings: provider defaults)"
        );
        let rb = self.client.post(&url).json(&body);
        let rb = match self.config.api {
            ApiKind::Gemini => rb.header("x-goog-api-key", &self.key),
            ApiKind::OpenAi => rb.bearer_auth(&self.key),
        };
        let resp = rb.send().map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout
            } else {
                ProviderError::Network(self.scrub(&e.without_url().to_string()))
            }
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .text()
            .map_err(|e| ProviderError::Network(self.scrub(&e.without_url().to_string())))?;
        if status == 401 || status == 403 {
            return Err(ProviderError::Auth(status));
        }
        if !(200..300).contains(&status) {
            let mut message = self.scrub(&text);
            if message.len() > 500 {
                let cut = (0..=500).rev().find(|&i| message.is_char_boundary(i)).unwrap_or(0);
                message.truncate(cut);
            }
            return Err(ProviderError::Status { status, message });
        }
        let v: Value =
            serde_json::from_str(&text).map_err(|e| ProviderError::Decode(e.to_string()))?;
        tracing::debug!(response_bytes = text.len(), "provider response");
        Ok(extract_text(self.config.api, &v))
    }
}

/// Concatenated text of the first candidate, or an empty string when the
/// model produced none (refusals and safety blocks look like this).
fn extract_text(api: ApiKind, v: &Value) -> String {
    match api {
        ApiKind::Gemini => v["candidates"][0]["content"]["parts"]
            .as_array()
            .map(|parts| parts.iter().filter_map(|p| p["text"].as_str()).collect())
            .unwrap_or_default(),
        ApiKind::OpenAi => v["choices"][0]["message"]["content"]
            .as_str()
            .unwrap_or_default()
            .to_string(),
    }
}

impl Provider for HttpProvider {
    /// Repeats transient failures (timeouts, 429, 5xx) up to the configured
    /// retry count.
    fn complete(&self, req: &Request) -> Result<String, ProviderError> {
        let policy = self.retry_policy();
        let mut attempt = 0;
        loop {
            match self.send_once(req) {
                Err(e) if e.is_transient() && attempt < policy.max_retries => {
                    tracing::warn!(error = %e, attempt, "provider request failed, retrying");
                    attempt += 1;
                    policy.wait();
                }
                r => return r,
            }
        }
    }

    fn supports_images(&self) -> bool {
        true
    }

    fn retry_policy(&self) -> RetryPolicy {
        self.config.retry_policy()
    }

    fn identity(&self) -> String {
        format!("{:?}|{}|{}", self.config.api, self.config.endpoint, self.config.model)
    }
}
