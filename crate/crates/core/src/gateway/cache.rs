use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

/// On-disk response cache laid out as `<dir>/<backend>/<hash>.json`.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

/// Hex sha256 over the backend id and the exact request body.
pub fn cache_key(backend_id: &str, body: &str) -> String {
    let mut h = Sha256::new();
    h.update(backend_id.as_bytes());
    h.update([0u8]);
    h.update(body.as_bytes());
    hex::encode(h.finalize())
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, backend_id: &str, key: &str) -> PathBuf {
        self.dir.join(backend_id).join(format!("{key}.json"))
    }

    pub fn get(&self, backend_id: &str, key: &str) -> std::io::Result<Option<String>> {
        match std::fs::read_to_string(self.path(backend_id, key)) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Writes through a temp file in the same directory and renames it into place.
    pub fn put(&self, backend_id: &str, key: &str, value: &str) -> std::io::Result<()> {
        let dir = self.dir.join(backend_id);
        std::fs::create_dir_all(&dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
        tmp.write_all(value.as_bytes())?;
        tmp.as_file().sync_all()?;
        tmp.persist(self.path(backend_id, key)).map_err(|e| e.error)?;
        Ok(())
    }

    pub fn len(&self, backend_id: &str) -> usize {
        std::fs::read_dir(self.dir.join(backend_id))
            .map(|d| {
                d.filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self, backend_id: &str) -> bool {
        self.len(backend_id) == 0
    }
}
