//! Content-addressed completion cache: one text file per request digest,
//! grouped by model, plus an append-only JSONL index for audit.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::GatewayError;

/// One audit line in `index.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub model_id: String,
    pub key: String,
    pub kind: String,
}

/// Disk layout: `<root>/<model_id>/<digest>.txt` holding the completion
/// text verbatim, and `<root>/index.jsonl`. Reads take no lock; writes are
/// serialized by a mutex and land via temp-file rename, so a concurrent
/// reader sees either nothing or the full text.
pub struct CompletionCache {
    root: PathBuf,
    index: Mutex<()>,
}

/// Model ids can contain path separators ("org/model"); keep directory
/// names to a safe alphabet.
fn sanitize(model_id: &str) -> String {
    model_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

impl CompletionCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|source| GatewayError::Io {
            context: format!("creating cache dir {}", root.display()),
            source,
        })?;
        Ok(Self {
            root,
            index: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_path(&self, model_id: &str, key: &str) -> PathBuf {
        self.root.join(sanitize(model_id)).join(format!("{key}.txt"))
    }

    /// Cached text for a digest, if present. Unreadable entries count as
    /// misses; the caller recomputes and overwrites.
    pub fn get(&self, model_id: &str, key: &str) -> Option<String> {
        fs::read_to_string(self.entry_path(model_id, key)).ok()
    }

    /// Store a completion. Idempotent: a digest already on disk is left
    /// untouched and not re-indexed.
    pub fn put(
        &self,
        model_id: &str,
        key: &str,
        kind: &str,
        text: &str,
    ) -> Result<(), GatewayError> {
        let path = self.entry_path(model_id, key);
        let io_err = |context: String| {
            move |source: io::Error| GatewayError::Io { context, source }
        };
        let _guard = self.index.lock().expect("cache mutex poisoned");
        if path.exists() {
            return Ok(());
        }
        let dir = path.parent().expect("entry path has a parent");
        fs::create_dir_all(dir)
            .map_err(io_err(format!("creating {}", dir.display())))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)
            .map_err(io_err(format!("creating temp file in {}", dir.display())))?;
        tmp.write_all(text.as_bytes())
            .map_err(io_err(format!("writing {}", path.display())))?;
        tmp.persist(&path).map_err(|e| GatewayError::Io {
            context: format!("persisting {}", path.display()),
            source: e.error,
        })?;
        let entry = IndexEntry {
            model_id: model_id.to_string(),
            key: key.to_string(),
            kind: kind.to_string(),
        };
        let index_path = self.root.join("index.jsonl");
        let mut index = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&index_path)
            .map_err(io_err(format!("opening {}", index_path.display())))?;
        let line = serde_json::to_string(&entry).expect("index entry serializes");
        writeln!(index, "{line}")
            .map_err(io_err(format!("appending {}", index_path.display())))?;
        Ok(())
    }

    /// Parse the audit index. Lines that fail to parse are reported with
    /// their line number.
    pub fn read_index(&self) -> Result<Vec<IndexEntry>, GatewayError> {
        let path = self.root.join("index.jsonl");
        if !path.exists() {
            return Ok(Vec::new());
        }
        let file = File::open(&path).map_err(|source| GatewayError::Io {
            context: format!("opening {}", path.display()),
            source,
        })?;
        let mut entries = Vec::new();
        for (idx, line) in io::BufRead::lines(io::BufReader::new(file)).enumerate() {
            let line = line.map_err(|source| GatewayError::Io {
                context: format!("reading {}", path.display()),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| {
                GatewayError::FixtureFile {
                    path: path.display().to_string(),
                    line: idx + 1,
                    message: e.to_string(),
                }
            })?);
        }
        Ok(entries)
    }
}
