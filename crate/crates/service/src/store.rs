//! File-backed conversation store: one JSON file per session.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use fsb_core::bot::Conversation;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError<E> {
    #[error("no session {0}")]
    NotFound(String),
    #[error("session store: {0}")]
    Io(String),
    #[error(transparent)]
    Step(E),
}

/// Sessions live in `<dir>/<id>.json`. Writes go through a temporary file
/// and a rename, so a crash never leaves a half-written session. Updates to
/// one session are serialized; distinct sessions proceed in parallel.
pub struct SessionStore {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

fn valid_id(id: &str) -> bool {
    (1..=64).contains(&id.len()) && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl SessionStore {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    fn lock_for(&self, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|p| p.into_inner());
        locks.entry(id.to_string()).or_default().clone()
    }

    /// Creates an empty session and returns its id.
    pub fn create(&self) -> std::io::Result<String> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        self.write(&Conversation::new(id.clone()))?;
        Ok(id)
    }

    pub fn load(&self, id: &str) -> Result<Conversation, StoreError<std::convert::Infallible>> {
        if !valid_id(id) {
            return Err(StoreError::NotFound(id.to_string()));
        }
        let text = match std::fs::read_to_string(self.path(id)) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::NotFound(id.to_string())),
            Err(e) => return Err(StoreError::Io(e.to_string())),
        };
        serde_json::from_str(&text).map_err(|e| StoreError::Io(format!("{id}: {e}")))
    }

    /// Runs `f` on the stored session under its lock and writes the result
    /// back only if `f` succeeds.
    pub fn update<T, E>(&self, id: &str, f: impl FnOnce(&mut Conversation) -> Result<T, E>) -> Result<T, StoreError<E>> {
        let lock = self.lock_for(id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut conv = self.load(id).map_err(|e| match e {
            StoreError::NotFound(id) => StoreError::NotFound(id),
            StoreError::Io(m) => StoreError::Io(m),
            StoreError::Step(never) => match never {},
        })?;
        let out = f(&mut conv).map_err(StoreError::Step)?;
        self.write(&conv).map_err(|e| StoreError::Io(e.to_string()))?;
        Ok(out)
    }

    fn write(&self, conv: &Conversation) -> std::io::Result<()> {
        let id = &conv.dialogue.id;
        let tmp = self.dir.join(format!(".{id}.{}.tmp", uuid::Uuid::new_v4().simple()));
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(serde_json::to_string(conv)?.as_bytes())?;
        file.sync_all()?;
        std::fs::rename(&tmp, self.path(id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_updates_are_not_written() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        let id = store.create().unwrap();
        let before = std::fs::read(store.path(&id)).unwrap();
        let r: Result<(), StoreError<&str>> = store.update(&id, |c| {
            c.memory.user_persona.push("x".into());
            Err("nope")
        });
        assert!(matches!(r, Err(StoreError::Step("nope"))));
        assert_eq!(std::fs::read(store.path(&id)).unwrap(), before);
    }

    #[test]
    fn ids_cannot_escape_the_directory() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        assert!(matches!(store.load("../etc/passwd"), Err(StoreError::NotFound(_))));
        assert!(matches!(store.load(""), Err(StoreError::NotFound(_))));
    }
}
