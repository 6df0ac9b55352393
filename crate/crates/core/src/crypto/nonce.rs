//! Replay cache.
//!
//! A nonce stays blocked until `expires_at + horizon`. Tokens are already
//! refused after `expires_at`, so the horizon only has to cover clock skew
//! between the minting device and the server.

use std::collections::{BTreeSet, HashMap};
use std::io;
use std::sync::Mutex;

pub const NONCE_LEN: usize = 16;

/// Durable sink for accepted nonces. Appends happen while the cache lock is
/// held, so the journal sees nonces in acceptance order.
pub trait NonceJournal: Send + Sync {
    fn append(&self, nonce: &[u8; NONCE_LEN], expires_at: u64) -> io::Result<()>;
}

#[derive(Default)]
struct Seen {
    deadline: HashMap<[u8; NONCE_LEN], u64>,
    by_deadline: BTreeSet<(u64, [u8; NONCE_LEN])>,
}

impl Seen {
    fn prune(&mut self, now: u64) {
        while let Some(&(deadline, nonce)) = self.by_deadline.first() {
            if deadline > now {
                break;
            }
            self.by_deadline.pop_first();
            self.deadline.remove(&nonce);
        }
    }

    fn insert(&mut self, nonce: [u8; NONCE_LEN], deadline: u64) {
        if let Some(old) = self.deadline.insert(nonce, deadline) {
            self.by_deadline.remove(&(old, nonce));
        }
        self.by_deadline.insert((deadline, nonce));
    }
}

pub struct NonceCache {
    horizon: u64,
    seen: Mutex<Seen>,
    journal: Option<Box<dyn NonceJournal>>,
}

impl std::fmt::Debug for NonceCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NonceCache")
            .field("horizon", &self.horizon)
            .field("len", &self.len())
            .field("journaled", &self.journal.is_some())
            .finish()
    }
}

impl NonceCache {
    pub fn new(horizon: u64) -> Self {
        Self {
            horizon,
            seen: Mutex::new(Seen::default()),
            journal: None,
        }
    }

    /// A cache that writes every accepted nonce to `journal` before
    /// reporting it fresh.
    pub fn with_journal(horizon: u64, journal: Box<dyn NonceJournal>) -> Self {
        Self {
            journal: Some(journal),
            ..Self::new(horizon)
        }
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    /// Reloads previously accepted nonces (e.g. from a journal) without
    /// re-journaling them. Entries already past their horizon are dropped.
    pub fn restore(&self, entries: impl IntoIterator<Item = ([u8; NONCE_LEN], u64)>, now: u64) {
        let mut seen = self.lock();
        for (nonce, expires_at) in entries {
            let deadline = expires_at.saturating_add(self.horizon);
            if deadline > now {
                let keep = seen
                    .deadline
                    .get(&nonce)
                    .map_or(deadline, |&d| d.max(deadline));
                seen.insert(nonce, keep);
            }
        }
    }

    /// Atomically checks and records a nonce.
    ///
    /// Returns `true` (and records the nonce) if it is unseen or its previous
    /// sighting has aged past the horizon; `false` if it is still blocked. If
    /// the journal cannot persist the nonce the call fails closed and returns
    /// `false`.
    pub fn check_and_record(&self, nonce: &[u8; NONCE_LEN], expires_at: u64, now: u64) -> bool {
        let mut seen = self.lock();
        seen.prune(now);
        if seen.deadline.contains_key(nonce) {
            return false;
        }
        if let Some(journal) = &self.journal {
            if journal.append(nonce, expires_at).is_err() {
                return false;
            }
        }
        seen.insert(*nonce, expires_at.saturating_add(self.horizon));
        true
    }

    /// Live `(nonce, expires_at)` entries, for compaction.
    pub fn snapshot(&self, now: u64) -> Vec<([u8; NONCE_LEN], u64)> {
        let mut seen = self.lock();
        seen.prune(now);
        seen.by_deadline
            .iter()
            .map(|&(deadline, nonce)| (nonce, deadline.saturating_sub(self.horizon)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.lock().deadline.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Seen> {
        // The critical sections never panic midway; a poisoned lock still
        // holds consistent data.
        self.seen.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Free-function form of [`NonceCache::check_and_record`].
pub fn check_and_record_nonce(
    nonce: &[u8; NONCE_LEN],
    expires_at: u64,
    now: u64,
    cache: &NonceCache,
) -> bool {
    cache.check_and_record(nonce, expires_at, now)
}
