use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// One call to a language model: a system instruction, the user text and an
/// optional PNG attachment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub system: String,
    pub user: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_png: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("environment variable {0} holding the API key is not set")]
    MissingKey(String),
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("HTTP {status}: {message}")]
    Status { status: u16, message: String },
    #[error("request timed out")]
    Timeout,
    #[error("network error: {0}")]
    Network(String),
    #[error("malformed provider response: {0}")]
    Decode(String),
    #[error("{0}")]
    Other(String),
}

impl ProviderError {
    /// Whether a repeated request could succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            ProviderError::Timeout | ProviderError::Network(_) => true,
            ProviderError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// How many times to repeat a request and how long to wait in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Waits are drawn uniformly from `[backoff_min, backoff_max]`.
    #[serde(with = "secs")]
    pub backoff_min: Duration,
    #[serde(with = "secs")]
    pub backoff_max: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 2,
            backoff_min: Duration::from_secs(1),
            backoff_max: Duration::from_secs(4),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            backoff_min: Duration::ZERO,
            backoff_max: Duration::ZERO,
        }
    }

    pub fn wait(&self) {
        let (lo, hi) = (self.backoff_min, self.backoff_max.max(self.backoff_min));
        let d = if hi.is_zero() {
            return;
        } else if hi == lo {
            lo
        } else {
            rand::rng().random_range(lo..=hi)
        };
        std::thread::sleep(d);
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

/// A text (and optionally vision) completion backend. Implementations are
/// shared across threads and must not hold per-request state.
pub trait Provider: Send + Sync {
    fn complete(&self, req: &Request) -> Result<String, ProviderError>;

    /// Whether `Request::image_png` is forwarded.
    fn supports_images(&self) -> bool {
        false
    }

    fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy::default()
    }

    /// Stable identity of the backend and model, used in cache keys.
    fn identity(&self) -> String;
}

impl<P: Provider + ?Sized> Provider for &P {
    fn complete(&self, req: &Request) -> Result<String, ProviderError> {
        (**self).complete(req)
    }
    fn supports_images(&self) -> bool {
        (**self).supports_images()
    }
    fn retry_policy(&self) -> RetryPolicy {
        (**self).retry_policy()
    }
    fn identity(&self) -> String {
        (**self).identity()
    }
}

impl<P: Provider + ?Sized> Provider for std::sync::Arc<P> {
    fn complete(&self, req: &Request) -> Result<String, ProviderError> {
        (**self).complete(req)
    }
    fn supports_images(&self) -> bool {
        (**self).supports_images()
    }
    fn retry_policy(&self) -> RetryPolicy {
        (**self).retry_policy()
    }
    fn identity(&self) -> String {
        (**self).identity()
    }
}

/// What a [`MockProvider`] answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockReply {
    /// The user text of the request, unchanged.
    Echo,
    Text(String),
    Fail(String),
}

/// Deterministic offline provider. Replies are taken from a script in order;
/// the last entry repeats once the script runs out. Every request is recorded.
#[derive(Debug)]
pub struct MockProvider {
    script: Mutex<VecDeque<MockReply>>,
    last: Mutex<MockReply>,
    requests: Mutex<Vec<Request>>,
    images: bool,
}

impl MockProvider {
    pub fn echo() -> Self {
        Self::scripted(vec![MockReply::Echo])
    }

    pub fn scripted(script: Vec<MockReply>) -> Self {
        let last = script.last().cloned().unwrap_or(MockReply::Echo);
        MockProvider {
            script: Mutex::new(script.into()),
            last: Mutex::new(last),
            requests: Mutex::new(Vec::new()),
            images: true,
        }
    }

    pub fn without_images(mut self) -> Self {
        self.images = false;
        self
    }

    pub fn requests(&self) -> Vec<Request> {
        self.requests.lock().unwrap().clone()
    }
}

impl Provider for MockProvider {
    fn complete(&self, req: &Request) -> Result<String, ProviderError> {
        self.requests.lock().unwrap().push(req.clone());
        let reply = {
            let mut s = self.script.lock().unwrap();
            match s.pop_front() {
                Some(r) => {
                    *self.last.lock().unwrap() = r.clone();
                    r
                }
                None => self.last.lock().unwrap().clone(),
            }
        };
        match reply {
            MockReply::Echo => Ok(req.user.clone()),
            MockReply::Text(t) => Ok(t),
            MockReply::Fail(m) => Err(ProviderError::Other(m)),
        }
    }

    fn supports_images(&self) -> bool {
        self.images
    }

    fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy::immediate(2)
    }

    fn identity(&self) -> String {
        "mock".into()
    }
}
