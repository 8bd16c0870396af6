use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ImageError, ImageStore};
use crate::trajectory::InitialState;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    BadLine { path: PathBuf, line: usize, message: String },
    #[error("{path}:{line}: {source}")]
    Image { path: PathBuf, line: usize, source: ImageError },
}

/// One line of `manifest.jsonl` in a benchmark directory. `images` are
/// paths relative to the directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkItem {
    pub id: String,
    #[serde(default)]
    pub task_type: String,
    pub question: String,
    pub images: Vec<String>,
    pub label: String,
}

impl BenchmarkItem {
    /// Imports the item's images and builds `s_1`.
    pub fn initial_state(&self, dir: &Path, store: &ImageStore, system_prompt: &str) -> Result<InitialState, ImageError> {
        let refs = self
            .images
            .iter()
            .map(|p| store.import_png(&dir.join(p)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(InitialState {
            question: self.question.clone(),
            image_refs: refs,
            system_prompt: system_prompt.to_string(),
        })
    }
}

/// Reads `<dir>/manifest.jsonl`, imports every referenced image, and returns
/// the items with their initial states in file order.
pub fn load_benchmark(dir: &Path, store: &ImageStore, system_prompt: &str) -> Result<Vec<(BenchmarkItem, InitialState)>, IngestError> {
    let path = dir.join("manifest.jsonl");
    let file = std::fs::File::open(&path).map_err(|source| IngestError::Io {
        path: path.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| IngestError::Io {
            path: path.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let item: BenchmarkItem = serde_json::from_str(&line).map_err(|e| IngestError::BadLine {
            path: path.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let s1 = item.initial_state(dir, store, system_prompt).map_err(|source| IngestError::Image {
            path: path.clone(),
            line: i + 1,
            source,
        })?;
        out.push((item, s1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Raster;

    #[test]
    fn loads_manifest_in_order() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(tmp.path().join("a.png"), Raster::filled(2, 2, [1, 2, 3, 255]).to_png().unwrap()).unwrap();
        std::fs::write(
            tmp.path().join("manifest.jsonl"),
            "{\"id\":\"x\",\"question\":\"q1\",\"images\":[\"a.png\"],\"label\":\"A\"}\n\n\
             {\"id\":\"y\",\"question\":\"q2\",\"images\":[\"a.png\"],\"label\":\"B\"}\n",
        )
        .unwrap();
        let store = ImageStore::in_memory();
        let items = load_benchmark(tmp.path(), &store, "sys").unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[1].0.label, "B");
        assert_eq!(items[0].1.image_refs, items[1].1.image_refs);
        assert!(store.contains(&items[0].1.image_refs[0]));

        std::fs::write(tmp.path().join("manifest.jsonl"), "{\"id\":1}\n").unwrap();
        assert!(matches!(
            load_benchmark(tmp.path(), &store, ""),
            Err(IngestError::BadLine { line: 1, .. })
        ));
    }
}
