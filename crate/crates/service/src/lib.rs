//! HTTP API over the transcription pipeline: upload a page, crop it, find or
//! upload baselines, transcribe, then correct and translate with a language
//! model. Slow steps run as jobs that clients poll. Everything lives under
//! `/v1`.

mod api;
pub mod config;
mod openapi;
pub mod store;

use std::path::Path;
use std::sync::Arc;

use rotulus::correct::{CachedProvider, HttpProvider, MockProvider, Provider};
use rotulus::lm::NGramModel;
use rotulus::nn::{load_weights, LoadOptions, Model, Recognizer};
use rotulus::pipeline::Transcriber;
use tokio::sync::Semaphore;

pub use api::router;
pub use config::{ConfigError, ProviderKind, ServiceConfig};
pub use openapi::openapi;
pub use store::{Store, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("loading {path}: {message}")]
    Load { path: String, message: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Models and the language-model provider, loaded once at startup and
/// shared read-only by all requests.
#[derive(Default, Clone)]
pub struct Engines {
    pub transcriber: Option<Arc<Transcriber>>,
    pub segmenter: Option<Arc<Model>>,
    pub provider: Option<Arc<dyn Provider>>,
    /// Why `provider` is missing, reported in failed jobs.
    pub provider_error: Option<String>,
}

fn load_err(path: &Path, e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Load {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

impl Engines {
    /// Loads whatever the configuration names. A missing API key is not
    /// fatal: the service still runs and LLM jobs fail with the reason.
    pub fn load(cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        let mut e = Engines::default();
        if let Some(p) = &cfg.recognizer_weights {
            let bytes = std::fs::read(p).map_err(|x| load_err(p, x))?;
            let w = load_weights(&bytes, &LoadOptions::default()).map_err(|x| load_err(p, x))?;
            let rec = Recognizer::from_weights(&w).map_err(|x| load_err(p, x))?;
            let lm = match &cfg.lm {
                Some(lp) => {
                    let text = std::fs::read_to_string(lp).map_err(|x| load_err(lp, x))?;
                    Some(NGramModel::from_arpa(&text).map_err(|x| load_err(lp, x))?)
                }
                None => None,
            };
            let t = if cfg.beam {
                Transcriber::with_beam(rec, lm, cfg.decode.clone())
            } else {
                Transcriber::greedy(rec)
            };
            e.transcriber = Some(Arc::new(t));
        }
        if let Some(p) = &cfg.segmentation_weights {
            let bytes = std::fs::read(p).map_err(|x| load_err(p, x))?;
            let w = load_weights(&bytes, &LoadOptions::default()).map_err(|x| load_err(p, x))?;
            e.segmenter = Some(Arc::new(w.to_model().map_err(|x| load_err(p, x))?));
        }
        let provider: Result<Arc<dyn Provider>, String> = match cfg.provider.kind {
            ProviderKind::Mock => Ok(Arc::new(MockProvider::echo())),
            ProviderKind::Http => HttpProvider::from_env(cfg.provider.http.clone())
                .map(|p| Arc::new(p) as Arc<dyn Provider>)
                .map_err(|x| x.to_string()),
        };
        match provider {
            Ok(p) => {
                e.provider = Some(match &cfg.provider.cache_dir {
                    Some(dir) => Arc::new(CachedProvider::new(p, dir)?),
                    None => p,
                })
            }
            Err(msg) => {
                tracing::warn!("language-model provider unavailable: {msg}");
                e.provider_error = Some(msg);
            }
        }
        Ok(e)
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    pub store: Store,
    pub engines: Engines,
    llm: Arc<Semaphore>,
    compute: Arc<Semaphore>,
}

impl AppState {
    pub fn new(config: ServiceConfig, store: Store, engines: Engines) -> Arc<Self> {
        let llm = Arc::new(Semaphore::new(config.llm_workers.max(1)));
        let compute = Arc::new(Semaphore::new(config.compute_workers()));
        Arc::new(AppState {
            config,
            store,
            engines,
            llm,
            compute,
        })
    }

    /// Opens the store in `config.data_dir` and loads the configured engines.
    pub fn from_config(config: ServiceConfig) -> Result<Arc<Self>, ServiceError> {
        config.validate()?;
        let store = Store::open(&config.data_dir)?;
        let engines = Engines::load(&config)?;
        Ok(Self::new(config, store, engines))
    }
}

/// Binds and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let addr = format!("{}:{}", config.host, config.port);
    let state = AppState::from_config(config)?;
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
