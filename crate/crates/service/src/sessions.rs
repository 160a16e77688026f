//! In-memory chat sessions with idle eviction.
//!
//! The map is guarded by a short-lived std mutex; each session has its own
//! async mutex, so one session's turns run one at a time while different
//! sessions proceed in parallel.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use meed::inference::ChatSession;
use rand::Rng;

use crate::error::ApiError;

/// 128 random bits from the OS-seeded thread generator, as 32 hex digits.
pub fn new_session_id() -> String {
    format!("{:032x}", rand::rng().random::<u128>())
}

struct Entry {
    session: Arc<tokio::sync::Mutex<ChatSession>>,
    last_active: Instant,
}

pub struct SessionStore {
    inner: Mutex<HashMap<String, Entry>>,
    idle_timeout: Duration,
    max_sessions: usize,
    context_cap: usize,
}

impl SessionStore {
    pub fn new(idle_timeout: Duration, max_sessions: usize, context_cap: usize) -> Self {
        Self {
            inner: Mutex::new(HashMap::new()),
            idle_timeout,
            max_sessions,
            context_cap,
        }
    }

    fn map(&self) -> std::sync::MutexGuard<'_, HashMap<String, Entry>> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn len(&self) -> usize {
        self.map().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The session for `id`, or a new one under a fresh id when `id` is
    /// absent or unknown. Clients never choose ids.
    pub fn checkout(&self, id: Option<&str>) -> Result<(String, Arc<tokio::sync::Mutex<ChatSession>>), ApiError> {
        self.checkout_at(id, Instant::now())
    }

    pub fn checkout_at(
        &self,
        id: Option<&str>,
        now: Instant,
    ) -> Result<(String, Arc<tokio::sync::Mutex<ChatSession>>), ApiError> {
        let mut map = self.map();
        if let Some(e) = id.and_then(|id| map.get_mut(id)) {
            if now.saturating_duration_since(e.last_active) < self.idle_timeout {
                e.last_active = now;
                return Ok((id.unwrap_or_default().to_string(), e.session.clone()));
            }
        }
        Self::sweep(&mut map, now, self.idle_timeout);
        if map.len() >= self.max_sessions {
            return Err(ApiError::SessionLimit);
        }
        let id = loop {
            let candidate = new_session_id();
            if !map.contains_key(&candidate) {
                break candidate;
            }
        };
        let session = Arc::new(tokio::sync::Mutex::new(ChatSession::new(id.clone(), self.context_cap)));
        map.insert(
            id.clone(),
            Entry {
                session: session.clone(),
                last_active: now,
            },
        );
        Ok((id, session))
    }

    /// Marks a session active, e.g. once a long request finishes.
    pub fn touch(&self, id: &str, now: Instant) {
        if let Some(e) = self.map().get_mut(id) {
            e.last_active = now;
        }
    }

    /// Drops sessions idle for at least the timeout; returns how many.
    pub fn evict_idle(&self, now: Instant) -> usize {
        Self::sweep(&mut self.map(), now, self.idle_timeout)
    }

    fn sweep(map: &mut HashMap<String, Entry>, now: Instant, timeout: Duration) -> usize {
        let before = map.len();
        map.retain(|_, e| now.saturating_duration_since(e.last_active) < timeout);
        before - map.len()
    }
}
