//! HTTP service for interactive controlled generation.
//!
//! Every `*.ckpt` file of the checkpoint directory is loaded once at
//! startup: one base checkpoint plus any strategy checkpoints trained
//! against it. Requests are stateless; the caller supplies the whole
//! context each turn. Until loading finishes, `/api/generate` and
//! `/api/health` answer 503.

use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use crate::data::TaskKind;
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::pipeline::{request_sample, respond, AttributeSpec, Model};
use crate::prompt::Strategy;
use crate::training::{fingerprint, Checkpoint, CheckpointKind};
use crate::transformer::ModelConfig;

/// One loadable strategy.
#[derive(Clone, Debug)]
pub struct Entry {
    pub strategy: Strategy,
    pub phi_pct: f64,
    pub path: PathBuf,
    /// Absent when the checkpoint does not match the base.
    pub model: Option<Arc<Model>>,
}

/// Everything resident after loading.
#[derive(Clone, Debug, Default)]
pub struct Registry {
    pub task: Option<TaskKind>,
    pub model_config: Option<ModelConfig>,
    pub entries: Vec<Entry>,
}

impl Registry {
    /// Reads every checkpoint of `dir`. Unreadable files and strategy
    /// checkpoints without a matching base are logged and left unloaded.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        paths.sort();
        let mut bases = Vec::new();
        let mut prompts = Vec::new();
        for p in paths {
            match Checkpoint::load(&p) {
                Ok(ck) if ck.meta.kind == CheckpointKind::Base => bases.push((p, ck)),
                Ok(ck) => prompts.push((p, ck)),
                Err(e) => log::warn!("skipping {}: {e}", p.display()),
            }
        }
        let Some((base_path, base)) = bases.first() else {
            if !prompts.is_empty() {
                log::warn!("{} holds strategy checkpoints but no base checkpoint", dir.display());
            }
            return Ok(Registry::default());
        };
        if bases.len() > 1 {
            log::warn!("several base checkpoints; serving {}", base_path.display());
        }
        let frozen = Model::frozen(base)?;
        let mut reg = Registry {
            task: Some(base.meta.task),
            model_config: Some(base.meta.model.clone()),
            entries: vec![Entry {
                strategy: Strategy::Frozen,
                phi_pct: frozen.phi_pct(),
                path: base_path.clone(),
                model: Some(Arc::new(frozen)),
            }],
        };
        let base_fp = base.base.as_ref().map(|b| fingerprint(b.store()));
        for (p, ck) in prompts {
            if reg.entries.iter().any(|e| e.strategy == ck.meta.strategy) {
                log::warn!("duplicate {} checkpoint {} ignored", ck.meta.strategy, p.display());
                continue;
            }
            let model = if ck.meta.base_fingerprint.is_some() && ck.meta.base_fingerprint == base_fp {
                match Model::load(base, &ck) {
                    Ok(m) => Some(m),
                    Err(e) => {
                        log::warn!("{}: {e}", p.display());
                        None
                    }
                }
            } else {
                log::warn!("{} was trained against a different base", p.display());
                None
            };
            let phi_pct = match (&model, &ck.prompt, &base.base) {
                (Some(m), _, _) => m.phi_pct(),
                (None, Some(module), Some(b)) => crate::prompt::param_ratio(module, b) * 100.0,
                _ => 0.0,
            };
            reg.entries.push(Entry {
                strategy: ck.meta.strategy,
                phi_pct,
                path: p,
                model: model.map(Arc::new),
            });
        }
        reg.entries.sort_by_key(|e| Strategy::ALL.iter().position(|s| *s == e.strategy));
        Ok(reg)
    }

    fn model(&self, s: Strategy) -> Option<Arc<Model>> {
        self.entries.iter().find(|e| e.strategy == s).and_then(|e| e.model.clone())
    }
}

/// Shared service state; `None` while loading.
#[derive(Clone, Default)]
pub struct AppState {
    registry: Arc<RwLock<Option<Arc<Registry>>>>,
}

impl AppState {
    pub fn loading() -> Self {
        Self::default()
    }

    pub fn ready(reg: Registry) -> Self {
        let s = Self::default();
        s.set(reg);
        s
    }

    pub fn set(&self, reg: Registry) {
        *self.registry.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(reg));
    }

    fn get(&self) -> Option<Arc<Registry>> {
        self.registry.read().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub context: Vec<String>,
    pub attribute: AttributeSpec,
    pub strategy: String,
    #[serde(default)]
    pub knowledge: Option<String>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub max_new_tokens: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub response: String,
    pub tokens: usize,
    pub prefix_len: usize,
    pub strategy: String,
    pub elapsed_ms: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyInfo {
    pub id: String,
    pub phi_pct: f64,
    pub loaded: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_config: Option<ModelConfig>,
    pub task: Option<TaskKind>,
}

/// Error reply: status plus `{"error": message}`.
#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::UnknownStrategy(_) => StatusCode::NOT_FOUND,
            Error::Numeric(_) | Error::Io(_) | Error::Checkpoint(_) | Error::Shape(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(code, e.to_string())
    }
}

fn loading() -> ApiError {
    ApiError(StatusCode::SERVICE_UNAVAILABLE, "model loading".into())
}

/// Seeds stay below 2^53 so JSON clients can echo them exactly.
fn fresh_seed() -> u64 {
    rand::random::<u64>() >> 11
}

async fn generate(State(state): State<AppState>, body: Bytes) -> std::result::Result<Json<GenerateResponse>, ApiError> {
    let reg = state.get().ok_or_else(loading)?;
    let req: GenerateRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))?;
    let strategy: Strategy = req.strategy.parse()?;
    let model = reg
        .model(strategy)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("strategy `{strategy}` is not loaded")))?;
    let d = DecodeConfig::default();
    let seed = req.seed.unwrap_or_else(fresh_seed);
    let cfg = DecodeConfig {
        k: req.k.unwrap_or(d.k),
        temperature: req.temperature.unwrap_or(d.temperature),
        max_new_tokens: req.max_new_tokens.unwrap_or(d.max_new_tokens),
        seed,
        ..d
    };
    let out = tokio::task::spawn_blocking(move || {
        let t0 = Instant::now();
        let sample = request_sample(&model, &req.context, &req.attribute, req.knowledge.as_deref())?;
        let g = respond(&model, &sample, &cfg)?;
        Ok::<_, Error>((g, t0.elapsed()))
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let (g, elapsed) = out?;
    Ok(Json(GenerateResponse {
        tokens: g.ids.len(),
        response: g.text,
        prefix_len: g.prefix_len,
        strategy: strategy.id().to_string(),
        elapsed_ms: elapsed.as_secs_f64() * 1e3,
        seed,
    }))
}

async fn strategies(State(state): State<AppState>) -> Json<Vec<StrategyInfo>> {
    let list = state
        .get()
        .map(|reg| {
            reg.entries
                .iter()
                .map(|e| StrategyInfo {
                    id: e.strategy.id().to_string(),
                    phi_pct: e.phi_pct,
                    loaded: e.model.is_some(),
                })
                .collect()
        })
        .unwrap_or_default();
    Json(list)
}

async fn health(State(state): State<AppState>) -> std::result::Result<Json<Health>, ApiError> {
    let reg = state.get().ok_or_else(loading)?;
    Ok(Json(Health {
        status: "ok".into(),
        model_config: reg.model_config.clone(),
        task: reg.task,
    }))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/generate", post(generate))
        .route("/api/strategies", get(strategies))
        .route("/api/health", get(health))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds `addr`, starts answering immediately and loads `dir` in the
/// background.
pub async fn serve(addr: &str, dir: PathBuf) -> Result<()> {
    let state = AppState::loading();
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match Registry::load_dir(&dir) {
        Ok(reg) => {
            log::info!("loaded {} strategies from {}", reg.entries.len(), dir.display());
            loader.set(reg);
        }
        Err(e) => log::error!("loading {} failed: {e}", dir.display()),
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
