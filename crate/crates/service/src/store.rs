//! In-memory session store with idle-time eviction. Each session sits behind
//! its own async mutex so requests on one session run one at a time while
//! different sessions proceed in parallel.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde_json::Value;
use transmask_core::inference::Session;

/// A session plus the cached reply of its last idempotent request.
#[derive(Debug)]
pub struct SessionState {
    pub session: Session,
    pub last_request: Option<(String, Value)>,
}

#[derive(Debug)]
pub struct Slot {
    pub state: tokio::sync::Mutex<SessionState>,
    last_used: Mutex<Instant>,
}

impl Slot {
    fn touch(&self) {
        *self.last_used.lock().expect("poisoned") = Instant::now();
    }

    fn idle(&self) -> Duration {
        self.last_used.lock().expect("poisoned").elapsed()
    }
}

#[derive(Debug)]
pub struct SessionStore {
    ttl: Duration,
    slots: Mutex<HashMap<String, Arc<Slot>>>,
}

pub fn new_session_id() -> String {
    let bits: u128 = rand::rng().random();
    format!("{bits:032x}")
}

impl SessionStore {
    pub fn new(ttl: Duration) -> Self {
        Self { ttl, slots: Mutex::new(HashMap::new()) }
    }

    pub fn insert(&self, session: Session) -> Arc<Slot> {
        let slot = Arc::new(Slot {
            state: tokio::sync::Mutex::new(SessionState { session, last_request: None }),
            last_used: Mutex::new(Instant::now()),
        });
        let id = slot.state.try_lock().expect("fresh mutex").session.id.clone();
        self.slots.lock().expect("poisoned").insert(id, slot.clone());
        slot
    }

    /// Look up a live session and refresh its idle timer.
    pub fn get(&self, id: &str) -> Option<Arc<Slot>> {
        let mut slots = self.slots.lock().expect("poisoned");
        let slot = slots.get(id)?.clone();
        if slot.idle() > self.ttl {
            slots.remove(id);
            return None;
        }
        slot.touch();
        Some(slot)
    }

    /// Drop sessions idle for longer than the TTL; returns how many.
    pub fn evict_expired(&self) -> usize {
        let mut slots = self.slots.lock().expect("poisoned");
        let before = slots.len();
        slots.retain(|_, s| s.idle() <= self.ttl);
        before - slots.len()
    }

    pub fn len(&self) -> usize {
        self.slots.lock().expect("poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use transmask_core::{Mask, RgbImage};

    fn session(id: &str) -> Session {
        Session::new(id, RgbImage::filled(4, 4, [0.5; 3]), Mask::ones(4, 4)).unwrap()
    }

    #[test]
    fn expired_sessions_disappear() {
        let store = SessionStore::new(Duration::from_millis(30));
        store.insert(session("a"));
        assert!(store.get("a").is_some());
        std::thread::sleep(Duration::from_millis(60));
        assert!(store.get("a").is_none());
        store.insert(session("b"));
        std::thread::sleep(Duration::from_millis(60));
        assert_eq!(store.evict_expired(), 1);
        assert!(store.is_empty());
    }

    #[test]
    fn ids_are_distinct() {
        let a = new_session_id();
        assert_eq!(a.len(), 32);
        assert_ne!(a, new_session_id());
    }
}
