use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Request-hash → response JSON, one file per entry. Writes go through a
/// temporary file and a rename so concurrent readers never see partial
/// entries.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        let bytes = fs::read(self.path(key)).ok()?;
        let entry: serde_json::Value = serde_json::from_slice(&bytes).ok()?;
        serde_json::from_value(entry.get("response")?.clone()).ok()
    }

    /// Best effort: a failed write only costs a future cache miss.
    pub fn put<T: Serialize>(&self, key: &str, value: &T) {
        let entry = serde_json::json!({ "key": key, "response": value });
        let tmp = self.dir.join(format!(".{key}.{:?}.tmp", std::thread::current().id()));
        let ok = serde_json::to_vec_pretty(&entry)
            .ok()
            .and_then(|b| fs::write(&tmp, b).ok())
            .and_then(|_| fs::rename(&tmp, self.path(key)).ok());
        if ok.is_none() {
            let _ = fs::remove_file(&tmp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_miss() {
        let tmp = tempfile::tempdir().unwrap();
        let c = ResponseCache::open(tmp.path().join("c")).unwrap();
        assert_eq!(c.get::<f64>("k"), None);
        c.put("k", &-2.5f64);
        assert_eq!(c.get::<f64>("k"), Some(-2.5));
        assert_eq!(c.get::<String>("k"), None);
    }
}
