use std::path::{Path, PathBuf};

use rotulus::correct::ProviderConfig;
use rotulus::decode::DecodeConfig;
use rotulus::pipeline::SegmentConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("environment variable {name}: {message}")]
    Env { name: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Echoes its input; useful offline.
    Mock,
    #[default]
    Http,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderSettings {
    pub kind: ProviderKind,
    #[serde(flatten)]
    pub http: ProviderConfig,
    /// Directory for the optional response cache.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub data_dir: PathBuf,
    pub max_upload_bytes: usize,
    /// Reject segmentation until a crop has been set.
    pub require_crop: bool,
    pub recognizer_weights: Option<PathBuf>,
    pub segmentation_weights: Option<PathBuf>,
    pub lm: Option<PathBuf>,
    /// Beam search (with the LM when one is configured) instead of greedy.
    pub beam: bool,
    pub decode: DecodeConfig,
    pub segment: SegmentConfig,
    pub llm_workers: usize,
    /// Zero means one per available core.
    pub compute_workers: usize,
    pub provider: ProviderSettings,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            data_dir: PathBuf::from("rotulus-data"),
            max_upload_bytes: 64 << 20,
            require_crop: false,
            recognizer_weights: None,
            segmentation_weights: None,
            lm: None,
            beam: true,
            decode: DecodeConfig::default(),
            segment: SegmentConfig::default(),
            llm_workers: 2,
            compute_workers: 0,
            provider: ProviderSettings::default(),
        }
    }
}

/// Environment variables that override file settings.
pub const ENV_VARS: &[&str] = &[
    "ROTULUS_HOST",
    "ROTULUS_PORT",
    "ROTULUS_DATA_DIR",
    "ROTULUS_MAX_UPLOAD_BYTES",
    "ROTULUS_RECOGNIZER_WEIGHTS",
    "ROTULUS_SEGMENTATION_WEIGHTS",
    "ROTULUS_LM",
    "ROTULUS_PROVIDER",
    "ROTULUS_PROVIDER_ENDPOINT",
    "ROTULUS_PROVIDER_MODEL",
    "ROTULUS_PROVIDER_KEY_ENV",
];

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })
    }

    /// Applies `ROTULUS_*` overrides from the given variables.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            let (k, v) = (k.as_ref(), v.as_ref());
            let bad = |message: String| ConfigError::Env {
                name: k.to_string(),
                message,
            };
            let path = || (!v.is_empty()).then(|| PathBuf::from(v));
            match k {
                "ROTULUS_HOST" => self.host = v.to_string(),
                "ROTULUS_PORT" => self.port = v.parse().map_err(|e| bad(format!("{e}")))?,
                "ROTULUS_DATA_DIR" => self.data_dir = PathBuf::from(v),
                "ROTULUS_MAX_UPLOAD_BYTES" => {
                    self.max_upload_bytes = v.parse().map_err(|e| bad(format!("{e}")))?
                }
                "ROTULUS_RECOGNIZER_WEIGHTS" => self.recognizer_weights = path(),
                "ROTULUS_SEGMENTATION_WEIGHTS" => self.segmentation_weights = path(),
                "ROTULUS_LM" => self.lm = path(),
                "ROTULUS_PROVIDER" => {
                    self.provider.kind = match v {
                        "mock" => ProviderKind::Mock,
                        "http" => ProviderKind::Http,
                        _ => return Err(bad(format!("expected mock or http, got {v:?}"))),
                    }
                }
                "ROTULUS_PROVIDER_ENDPOINT" => self.provider.http.endpoint = v.to_string(),
                "ROTULUS_PROVIDER_MODEL" => self.provider.http.model = v.to_string(),
                "ROTULUS_PROVIDER_KEY_ENV" => self.provider.http.api_key_env = v.to_string(),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn apply_process_env(&mut self) -> Result<(), ConfigError> {
        self.apply_env(std::env::vars().filter(|(k, _)| ENV_VARS.contains(&k.as_str())))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_upload_bytes == 0 {
            return Err(ConfigError::Invalid("max_upload_bytes must be positive".into()));
        }
        if self.llm_workers == 0 {
            return Err(ConfigError::Invalid("llm_workers must be at least 1".into()));
        }
        self.decode
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn compute_workers(&self) -> usize {
        if self.compute_workers > 0 {
            self.compute_workers
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_env_layering() {
        let mut c = ServiceConfig::from_toml(
            r#"
            port = 9000
            beam = false
            [provider]
            kind = "mock"
            model = "m"
            "#,
        )
        .unwrap();
        assert_eq!(c.port, 9000);
        assert!(!c.beam);
        assert_eq!(c.provider.kind, ProviderKind::Mock);
        assert_eq!(c.provider.http.model, "m");
        assert_eq!(c.provider.http.max_retries, 2);
        c.apply_env([
            ("ROTULUS_PORT", "9100"),
            ("ROTULUS_LM", "/tmp/x.arpa"),
            ("ROTULUS_PROVIDER", "http"),
            ("UNRELATED", "1"),
        ])
        .unwrap();
        assert_eq!(c.port, 9100);
        assert_eq!(c.lm.as_deref(), Some(Path::new("/tmp/x.arpa")));
        assert_eq!(c.provider.kind, ProviderKind::Http);
        assert!(c.apply_env([("ROTULUS_PORT", "x")]).is_err());
        c.validate().unwrap();
    }

    #[test]
    fn mistyped_values_are_rejected() {
        assert!(ServiceConfig::from_toml("port = \"x\"").is_err());
        assert!(ServiceConfig::from_toml("[provider]\nkind = \"carrier-pigeon\"").is_err());
    }
}
