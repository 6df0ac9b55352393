//! Durable replay cache.
//!
//! Accepted nonces are appended to a line-oriented file, one
//! `<base64url nonce> <expires_at>` per line. On startup the file is read
//! back into the cache and rewritten with only the entries still inside the
//! replay horizon.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use encprompt_core::crypto::{NonceCache, NonceJournal, NONCE_LEN};

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Appends and syncs each accepted nonce before the cache reports it fresh.
pub struct FileNonceJournal {
    file: Mutex<File>,
}

impl FileNonceJournal {
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file: Mutex::new(file),
        })
    }
}

fn format_entry(nonce: &[u8; NONCE_LEN], expires_at: u64) -> String {
    format!("{} {expires_at}\n", URL_SAFE_NO_PAD.encode(nonce))
}

impl NonceJournal for FileNonceJournal {
    fn append(&self, nonce: &[u8; NONCE_LEN], expires_at: u64) -> io::Result<()> {
        let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
        file.write_all(format_entry(nonce, expires_at).as_bytes())?;
        file.sync_data()
    }
}

fn parse_entry(line: &str) -> Result<([u8; NONCE_LEN], u64), String> {
    let (nonce, expires) = line
        .split_once(' ')
        .ok_or("expected `<nonce> <expires_at>`")?;
    let nonce = URL_SAFE_NO_PAD
        .decode(nonce)
        .map_err(|e| format!("nonce: {e}"))?
        .try_into()
        .map_err(|_| format!("nonce must be {NONCE_LEN} bytes"))?;
    let expires = expires.parse().map_err(|e| format!("expires_at: {e}"))?;
    Ok((nonce, expires))
}

/// Reads a journal. A final line without a newline is a torn write from a
/// crash and is skipped; any other bad line is an error.
pub fn read_journal(path: &Path) -> Result<Vec<([u8; NONCE_LEN], u64)>, PersistError> {
    let text = match fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(PersistError::Io {
                path: path.to_owned(),
                source,
            })
        }
    };
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut entries = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match parse_entry(line) {
            Ok(entry) => entries.push(entry),
            Err(_) if i + 1 == lines.len() && !complete => {
                tracing::warn!(path = %path.display(), "dropping torn last journal line");
            }
            Err(message) => {
                return Err(PersistError::Corrupt {
                    path: path.to_owned(),
                    line: i + 1,
                    message,
                })
            }
        }
    }
    Ok(entries)
}

/// Loads the journal at `path`, compacts it, and returns a cache that keeps
/// appending to it.
pub fn open_nonce_cache(path: &Path, horizon: u64, now: u64) -> Result<NonceCache, PersistError> {
    let io_err = |source| PersistError::Io {
        path: path.to_owned(),
        source,
    };
    let entries = read_journal(path)?;
    let scratch = NonceCache::new(horizon);
    scratch.restore(entries.iter().copied(), now);
    let live = scratch.snapshot(now);

    let tmp = path.with_extension("compact");
    {
        let mut out = BufWriter::new(File::create(&tmp).map_err(io_err)?);
        for (nonce, expires_at) in &live {
            out.write_all(format_entry(nonce, *expires_at).as_bytes())
                .map_err(io_err)?;
        }
        out.into_inner()
            .map_err(|e| io_err(e.into_error()))?
            .sync_all()
            .map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)?;

    let journal = FileNonceJournal::open(path).map_err(io_err)?;
    let cache = NonceCache::with_journal(horizon, Box::new(journal));
    cache.restore(live, now);
    tracing::info!(path = %path.display(), live = cache.len(), dropped = entries.len() - cache.len(), "nonce journal loaded");
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn survives_reopen_and_compacts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nonces.log");
        {
            let cache = open_nonce_cache(&path, 60, 1_000).unwrap();
            assert!(cache.check_and_record(&[1; 16], 1_100, 1_000));
            assert!(cache.check_and_record(&[2; 16], 1_010, 1_000));
        }
        assert_eq!(read_journal(&path).unwrap().len(), 2);

        let cache = open_nonce_cache(&path, 60, 1_050).unwrap();
        assert!(!cache.check_and_record(&[1; 16], 1_100, 1_050));
        assert!(!cache.check_and_record(&[2; 16], 1_010, 1_050));

        // [2] ages out at 1_070 and is dropped by the next compaction.
        drop(cache);
        open_nonce_cache(&path, 60, 1_080).unwrap();
        assert_eq!(read_journal(&path).unwrap(), vec![([1; 16], 1_100)]);
    }

    #[test]
    fn torn_tail_is_skipped_but_corruption_is_not() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nonces.log");
        let good = format_entry(&[3; 16], 500);
        fs::write(&path, format!("{good}AAAA")).unwrap();
        assert_eq!(read_journal(&path).unwrap().len(), 1);

        fs::write(&path, format!("garbage\n{good}")).unwrap();
        assert!(matches!(
            read_journal(&path),
            Err(PersistError::Corrupt { line: 1, .. })
        ));
    }

    #[test]
    fn missing_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_journal(&dir.path().join("none")).unwrap().is_empty());
    }
}
