use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::ModelResponse;

/// One JSON file per cache key under `dir`. I/O failures are logged and
/// treated as misses; the cache never fails a request.
#[derive(Clone, Debug)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
}

impl ResponseCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        ResponseCache { dir }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(key))
    }

    pub fn get(&self, key: &str) -> Option<ModelResponse> {
        let path = self.path(key)?;
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return None,
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "cache read failed");
                return None;
            }
        };
        match serde_json::from_str::<ModelResponse>(&text) {
            Ok(mut resp) => {
                resp.from_cache = true;
                Some(resp)
            }
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "ignoring corrupt cache entry");
                None
            }
        }
    }

    pub fn put(&self, key: &str, resp: &ModelResponse) {
        let (Some(dir), Some(path)) = (self.dir.as_ref(), self.path(key)) else {
            return;
        };
        let stored = ModelResponse {
            from_cache: false,
            ..resp.clone()
        };
        let result = (|| -> std::io::Result<()> {
            fs::create_dir_all(dir)?;
            let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
            tmp.write_all(&serde_json::to_vec_pretty(&stored)?)?;
            tmp.persist(&path).map_err(|e| e.error)?;
            Ok(())
        })();
        if let Err(e) = result {
            tracing::warn!(path = %path.display(), error = %e, "cache write failed");
        }
    }
}
