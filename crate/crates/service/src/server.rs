//! HTTP API over a frozen model.
//!
//! * `POST /v1/chat` takes `{session_id?, utterance}` and returns
//!   `{session_id, response, emotions, attention, turn_count}`.
//! * `GET /v1/health` returns `{status, model_kind, vocab_size, sessions_active}`.
//! * `GET /v1/config` returns the decode defaults and model shape.
//!
//! Errors are `{"error": {"code", "message"}}` with codes `empty_utterance`
//! and `bad_request` (400), `busy` and `session_limit` (503), `internal` (500).

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, Method};
use axum::routing::{get, post};
use axum::{Json, Router};
use meed::corpus::{tokenize, Vocabulary};
use meed::emotion::EmotionLexicon;
use meed::inference::{respond, DecodeConfig};
use meed::models::Model;
use meed::pipeline::load_lexicon;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::config::ServiceConfig;
use crate::error::{ApiError, ServiceError};
use crate::sessions::SessionStore;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    pub utterance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub session_id: String,
    pub response: String,
    /// One `[positive, negative, anxious, angry, sad, neutral]` indicator per
    /// context utterance, oldest first. Empty for models without the
    /// emotion channel.
    pub emotions: Vec<[u8; 6]>,
    /// Utterance attention at the last decoding step; `null` for `s2s`.
    pub attention: Option<Vec<f64>>,
    /// Turns recorded in the session, both speakers, including any that
    /// fell out of the context window.
    pub turn_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_kind: String,
    pub vocab_size: usize,
    pub sessions_active: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublicConfig {
    pub model_kind: String,
    pub vocab_size: usize,
    pub max_context_turns: usize,
    pub decode: DecodeConfig,
    pub idle_timeout_secs: u64,
    pub max_sessions: usize,
    pub request_timeout_ms: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct App {
    pub model: Model<f32>,
    pub vocab: Vocabulary,
    pub lexicon: EmotionLexicon,
    pub config: ServiceConfig,
    pub sessions: SessionStore,
    /// SHA-256 of the checkpoint bytes the model was loaded from.
    pub checksum: String,
    checkpoint_path: Option<PathBuf>,
}

impl App {
    pub fn new(model: Model<f32>, vocab: Vocabulary, lexicon: EmotionLexicon, config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        if vocab.len() != model.config.vocab_size {
            return Err(ServiceError::Config(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                model.config.vocab_size
            )));
        }
        let sessions = SessionStore::new(config.idle_timeout(), config.max_sessions, model.config.max_context_turns);
        Ok(Self {
            checksum: sha256_hex(&model.to_checkpoint_bytes()),
            model,
            vocab,
            lexicon,
            config,
            sessions,
            checkpoint_path: None,
        })
    }

    /// Loads the checkpoint, vocabulary and lexicon named in `config`.
    pub fn load(config: ServiceConfig) -> Result<Self, ServiceError> {
        let bytes = std::fs::read(&config.checkpoint).map_err(|e| ServiceError::Io {
            path: config.checkpoint.clone(),
            source: e,
        })?;
        let model = Model::<f32>::from_checkpoint_bytes(&bytes)?;
        let vocab = Vocabulary::load(&config.vocab)?;
        let lexicon = load_lexicon(config.lexicon.as_deref())?;
        let path = config.checkpoint.clone();
        let mut app = Self::new(model, vocab, lexicon, config)?;
        app.checksum = sha256_hex(&bytes);
        app.checkpoint_path = Some(path);
        Ok(app)
    }

    /// Whether the in-memory parameters, and the checkpoint file when there
    /// is one, still hash to the startup checksum.
    pub fn checksum_matches(&self) -> bool {
        let file_ok = match &self.checkpoint_path {
            Some(p) => std::fs::read(p).map(|b| sha256_hex(&b) == self.checksum).unwrap_or(false),
            None => true,
        };
        let memory = sha256_hex(&self.model.to_checkpoint_bytes());
        let memory_ok = self.checkpoint_path.is_some() || memory == self.checksum;
        file_ok && memory_ok
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            model_kind: self.model.kind().to_string(),
            vocab_size: self.vocab.len(),
            sessions_active: self.sessions.len(),
        }
    }

    pub fn public_config(&self) -> PublicConfig {
        PublicConfig {
            model_kind: self.model.kind().to_string(),
            vocab_size: self.vocab.len(),
            max_context_turns: self.model.config.max_context_turns,
            decode: self.config.decode,
            idle_timeout_secs: self.config.idle_timeout_secs,
            max_sessions: self.config.max_sessions,
            request_timeout_ms: self.config.request_timeout_ms,
        }
    }

    /// One chat turn. Waits for the session's previous turn to finish, then
    /// decodes on the blocking pool.
    pub async fn chat(self: Arc<Self>, req: ChatRequest) -> Result<ChatResponse, ApiError> {
        if tokenize(&req.utterance).is_empty() {
            return Err(ApiError::EmptyUtterance);
        }
        let deadline = self.config.request_timeout();
        match tokio::time::timeout(deadline, self.clone().chat_inner(req)).await {
            Ok(r) => r,
            Err(_) => Err(ApiError::Busy),
        }
    }

    async fn chat_inner(self: Arc<Self>, req: ChatRequest) -> Result<ChatResponse, ApiError> {
        let (id, session) = self.sessions.checkout(req.session_id.as_deref())?;
        let mut guard = session.lock_owned().await;
        let app = self.clone();
        let (reply, turn_count) = tokio::task::spawn_blocking(move || {
            let r = respond(&app.model, &mut guard, &req.utterance, &app.lexicon, &app.vocab, &app.config.decode);
            r.map(|r| (r, guard.turns_total()))
        })
        .await
        .map_err(|e| ApiError::Internal(format!("decode task failed: {e}")))??;
        self.sessions.touch(&id, Instant::now());
        Ok(ChatResponse {
            session_id: id,
            response: reply.response,
            emotions: reply.emotions.iter().map(|i| i.bits()).collect(),
            attention: reply.attention,
            turn_count,
        })
    }
}

async fn chat_handler(State(app): State<Arc<App>>, body: Bytes) -> Result<Json<ChatResponse>, ApiError> {
    let req: ChatRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))?;
    app.chat(req).await.map(Json)
}

async fn health_handler(State(app): State<Arc<App>>) -> Json<Health> {
    Json(app.health())
}

async fn config_handler(State(app): State<Arc<App>>) -> Json<PublicConfig> {
    Json(app.public_config())
}

fn cors(origins: &[String]) -> CorsLayer {
    let list: Vec<HeaderValue> = origins
        .iter()
        .filter_map(|o| match HeaderValue::from_str(o) {
            Ok(v) => Some(v),
            Err(_) => {
                log::warn!("ignoring invalid CORS origin {o:?}");
                None
            }
        })
        .collect();
    CorsLayer::new()
        .allow_origin(AllowOrigin::list(list))
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE])
}

pub fn router(app: Arc<App>) -> Router {
    let cors = cors(&app.config.cors_origins);
    Router::new()
        .route("/v1/chat", post(chat_handler))
        .route("/v1/health", get(health_handler))
        .route("/v1/config", get(config_handler))
        .layer(cors)
        .with_state(app)
}

/// Serves until `shutdown` resolves, sweeping idle sessions in the
/// background, then checks that the checkpoint is unchanged.
pub async fn serve(
    app: Arc<App>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let sweep_every = app.config.idle_timeout().min(Duration::from_secs(60)).max(Duration::from_millis(100));
    let sweeper = {
        let app = app.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(sweep_every);
            loop {
                tick.tick().await;
                let n = app.sessions.evict_idle(Instant::now());
                if n > 0 {
                    log::info!("evicted {n} idle sessions");
                }
            }
        })
    };
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    log::info!("serving {} model on {addr:?}", app.model.kind());
    let result = axum::serve(listener, router(app.clone())).with_graceful_shutdown(shutdown).await;
    sweeper.abort();
    if app.checksum_matches() {
        log::info!("checkpoint checksum unchanged: {}", app.checksum);
    } else {
        log::error!("checkpoint checksum changed while serving (startup {})", app.checksum);
    }
    result.map_err(|e| ServiceError::Io {
        path: PathBuf::from(addr.map(|a| a.to_string()).unwrap_or_default()),
        source: e,
    })
}

pub fn run(config: ServiceConfig) -> Result<(), ServiceError> {
    let app = Arc::new(App::load(config)?);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| ServiceError::Io {
            path: PathBuf::from("tokio runtime"),
            source: e,
        })?;
    rt.block_on(async move {
        let bind = app.config.bind.clone();
        let listener = tokio::net::TcpListener::bind(&bind).await.map_err(|e| ServiceError::Io {
            path: PathBuf::from(&bind),
            source: e,
        })?;
        serve(app, listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })
}
