//! Single-file persistent key/value store backed by SQLite.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rusqlite::{params, Connection, OptionalExtension};

use super::{CacheError, PurgeFilter};

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS records (
    key         TEXT PRIMARY KEY NOT NULL,
    payload     BLOB NOT NULL,
    length      INTEGER NOT NULL,
    inserted_at INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS records_inserted_at ON records (inserted_at);
";

pub struct PersistentStore {
    path: PathBuf,
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for PersistentStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PersistentStore")
            .field("path", &self.path)
            .finish()
    }
}

impl PersistentStore {
    pub fn open(path: &Path) -> Result<Self, CacheError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        conn.busy_timeout(std::time::Duration::from_secs(5))?;
        conn.execute_batch(SCHEMA)?;
        Ok(PersistentStore {
            path: path.to_owned(),
            conn: Mutex::new(conn),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn conn(&self) -> std::sync::MutexGuard<'_, Connection> {
        // a panic while holding the lock cannot leave SQLite inconsistent
        self.conn.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Returns the payload for `key`. A record whose stored length does not
    /// match its payload is dropped and reported as a miss.
    pub fn get(&self, key: &str) -> Result<Option<Vec<u8>>, CacheError> {
        let conn = self.conn();
        let row: Option<(Vec<u8>, i64)> = conn
            .query_row(
                "SELECT payload, length FROM records WHERE key = ?1",
                params![key],
                |r| Ok((r.get(0)?, r.get(1)?)),
            )
            .optional()?;
        match row {
            Some((payload, length)) if payload.len() as i64 == length => Ok(Some(payload)),
            Some(_) => {
                log::warn!("dropping corrupt cache record {key}");
                conn.execute("DELETE FROM records WHERE key = ?1", params![key])?;
                Ok(None)
            }
            None => Ok(None),
        }
    }

    pub fn contains(&self, key: &str) -> Result<bool, CacheError> {
        Ok(self
            .conn()
            .query_row("SELECT 1 FROM records WHERE key = ?1", params![key], |_| Ok(()))
            .optional()?
            .is_some())
    }

    /// Inserts a record stamped `inserted_at` (unix milliseconds). With
    /// `replace == false` an existing record is left untouched; the caller
    /// is expected to pass identical bytes in that case.
    pub fn put_at(
        &self,
        key: &str,
        payload: &[u8],
        inserted_at: i64,
        replace: bool,
    ) -> Result<(), CacheError> {
        let conn = self.conn();
        let sql = if replace {
            "INSERT OR REPLACE INTO records (key, payload, length, inserted_at) VALUES (?1, ?2, ?3, ?4)"
        } else {
            "INSERT OR IGNORE INTO records (key, payload, length, inserted_at) VALUES (?1, ?2, ?3, ?4)"
        };
        conn.execute(sql, params![key, payload, payload.len() as i64, inserted_at])?;
        Ok(())
    }

    pub fn remove(&self, key: &str) -> Result<bool, CacheError> {
        Ok(self
            .conn()
            .execute("DELETE FROM records WHERE key = ?1", params![key])?
            > 0)
    }

    pub fn purge(&self, filter: &PurgeFilter) -> Result<usize, CacheError> {
        let conn = self.conn();
        let n = match filter {
            PurgeFilter::All => conn.execute("DELETE FROM records", [])?,
            PurgeFilter::Before(t) => conn.execute(
                "DELETE FROM records WHERE inserted_at < ?1",
                params![t.timestamp_millis()],
            )?,
        };
        Ok(n)
    }

    /// All keys starting with `prefix`, in ascending order.
    pub fn keys_with_prefix(&self, prefix: &str) -> Result<Vec<String>, CacheError> {
        let conn = self.conn();
        let mut stmt =
            conn.prepare("SELECT key FROM records WHERE substr(key, 1, ?2) = ?1 ORDER BY key")?;
        let keys = stmt
            .query_map(params![prefix, prefix.len() as i64], |r| r.get(0))?
            .collect::<Result<Vec<String>, _>>()?;
        Ok(keys)
    }

    pub fn len(&self) -> Result<usize, CacheError> {
        let n: i64 = self
            .conn()
            .query_row("SELECT COUNT(*) FROM records", [], |r| r.get(0))?;
        Ok(n as usize)
    }

    pub fn is_empty(&self) -> Result<bool, CacheError> {
        Ok(self.len()? == 0)
    }

    pub fn inserted_at(&self, key: &str) -> Result<Option<i64>, CacheError> {
        Ok(self
            .conn()
            .query_row(
                "SELECT inserted_at FROM records WHERE key = ?1",
                params![key],
                |r| r.get(0),
            )
            .optional()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupt_length_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let store = PersistentStore::open(&dir.path().join("x.sqlite")).unwrap();
        store.put_at("k", b"abc", 1, false).unwrap();
        store
            .conn()
            .execute("UPDATE records SET length = 7 WHERE key = 'k'", [])
            .unwrap();
        assert_eq!(store.get("k").unwrap(), None);
        assert!(!store.contains("k").unwrap());
    }

    #[test]
    fn prefix_listing() {
        let dir = tempfile::tempdir().unwrap();
        let store = PersistentStore::open(&dir.path().join("x.sqlite")).unwrap();
        for k in ["origin:b", "swh:1:cnt:x", "origin:a", "history:y"] {
            store.put_at(k, b"", 0, false).unwrap();
        }
        assert_eq!(
            store.keys_with_prefix("origin:").unwrap(),
            vec!["origin:a".to_owned(), "origin:b".to_owned()]
        );
        assert_eq!(store.keys_with_prefix("").unwrap().len(), 4);
    }
}
