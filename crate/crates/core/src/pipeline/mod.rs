//! Dataset construction: generation, cleaning, judging, SFT export, error
//! induction and preference-pair export.
//!
//! Every stage reads and writes line-delimited JSON; drops are recorded in
//! a CSV ledger of `(record_id, stage, rule)`.

mod records;
mod stages;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::image::ImageStore;
use crate::util::sha256_hex;

pub use records::{
    flatten_turns, merge_turns, same_answer, stop_reason_name, trajectory_turns, DpoProvenance, DpoRecord, JudgeStamp, LedgerEntry,
    SeedRecord, SftProvenance, SftRecord, TrajectoryRecord, Turn,
};
pub use stages::{
    branch_point_for, build_dpo, build_sft, generate_trajectories, induce_error, induce_pairs, judge_filter, preprocess, InductionError,
    JudgeOutput, PreprocessConfig, DEFAULT_TOKEN_LIMIT, INDUCTION_RETRIES,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("unreadable dataset {path}: {message}")]
    UnreadableDataset { path: PathBuf, message: String },
    #[error("ledger {path}: {message}")]
    Ledger { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(&line);
        let item = serde_path_to_error::deserialize(de).map_err(|e| PipelineError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("{} at {}", e.inner(), e.path()),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("record serializes");
        buf.push(b'\n');
    }
    buf
}

/// Writes through a temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    write_atomic(path, &to_jsonl(items))
}

/// Sorts records by the SHA-256 of their JSON encoding.
pub fn sort_canonical<T: Serialize>(items: &mut Vec<T>) {
    let mut keyed: Vec<(String, T)> = items
        .drain(..)
        .map(|it| (sha256_hex(&serde_json::to_vec(&it).expect("record serializes")), it))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    items.extend(keyed.into_iter().map(|(_, it)| it));
}

pub fn ledger_csv(entries: &[LedgerEntry]) -> Vec<u8> {
    let mut sorted = entries.to_vec();
    sorted.sort();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["record_id", "stage", "rule"]).expect("in-memory write");
    for e in &sorted {
        w.write_record([&e.record_id, &e.stage, &e.rule]).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn write_ledger(path: &Path, entries: &[LedgerEntry]) -> Result<(), PipelineError> {
    write_atomic(path, &ledger_csv(entries))
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerEntry>, PipelineError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| PipelineError::Ledger {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    r.deserialize()
        .collect::<Result<Vec<LedgerEntry>, _>>()
        .map_err(|e| PipelineError::Ledger {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Reads `<dir>/manifest.jsonl` of benchmark items, imports their images
/// into `store`, and returns seeds whose `image_refs` are store keys.
pub fn load_seeds(dir: &Path, store: &ImageStore) -> Result<Vec<SeedRecord>, PipelineError> {
    let items = crate::engine::load_benchmark(dir, store, "").map_err(|e| PipelineError::UnreadableDataset {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(items
        .into_iter()
        .map(|(item, s1)| SeedRecord {
            id: item.id,
            task_type: item.task_type,
            question: item.question,
            image_refs: s1.image_refs,
            label: item.label,
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub records: usize,
    pub by_task_type: BTreeMap<String, usize>,
    /// Step count `H` → number of records.
    pub horizon_histogram: BTreeMap<usize, usize>,
    pub error_records: usize,
    pub drops_by_rule: BTreeMap<String, usize>,
    pub drops_by_stage: BTreeMap<String, usize>,
}

impl Summary {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

fn record_horizon(v: &Value) -> Option<usize> {
    if let Some(steps) = v.pointer("/trajectory/steps").or_else(|| v.pointer("/chosen/steps")) {
        return steps.as_array().map(Vec::len);
    }
    fn count_actions(turns: &[Value]) -> usize {
        turns
            .iter()
            .map(|t| match t.get("type").and_then(Value::as_str) {
                Some("action") => 1,
                Some("nested") => t.get("turns").and_then(Value::as_array).map_or(0, |inner| count_actions(inner)),
                _ => 0,
            })
            .sum()
    }
    v.get("turns").and_then(Value::as_array).map(|t| count_actions(t))
}

/// Summarizes any shard format (raw, cleaned, SFT or DPO) plus an optional
/// drop ledger.
pub fn stats(dataset: &Path, ledger: Option<&Path>) -> Result<Summary, PipelineError> {
    let unreadable = |message: String| PipelineError::UnreadableDataset {
        path: dataset.to_path_buf(),
        message,
    };
    let records: Vec<Value> = read_jsonl(dataset).map_err(|e| unreadable(e.to_string()))?;
    let mut s = Summary::default();
    for v in &records {
        if !v.is_object() {
            return Err(unreadable("record is not a JSON object".into()));
        }
        s.records += 1;
        let task = v.get("task_type").and_then(Value::as_str).unwrap_or("");
        *s.by_task_type.entry(task.to_string()).or_default() += 1;
        if v.get("error").is_some_and(|e| !e.is_null()) {
            s.error_records += 1;
        }
        if let Some(h) = record_horizon(v) {
            *s.horizon_histogram.entry(h).or_default() += 1;
        }
    }
    if let Some(path) = ledger {
        for e in read_ledger(path)? {
            *s.drops_by_rule.entry(e.rule).or_default() += 1;
            *s.drops_by_stage.entry(e.stage).or_default() += 1;
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_round_trip_is_sorted() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("ledger.csv");
        let entries = vec![
            LedgerEntry::new("b", "preprocess", "token_limit"),
            LedgerEntry::new("a", "preprocess", "no_tool_use"),
        ];
        write_ledger(&p, &entries).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "record_id,stage,rule\na,preprocess,no_tool_use\nb,preprocess,token_limit\n");
        let back = read_ledger(&p).unwrap();
        assert_eq!(back[0].record_id, "a");
        assert_eq!(back.len(), 2);
    }

    #[test]
    fn stats_on_fixture_and_empty() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("d.jsonl");
        let mut lines = String::new();
        for i in 0..10 {
            let task = if i % 2 == 0 { "ocr" } else { "count" };
            let turns = "{\"type\":\"action\",\"invocation\":{\"action\":\"OCR\"}},".repeat(i % 3);
            lines.push_str(&format!(
                "{{\"id\":\"r{i}\",\"task_type\":\"{task}\",\"question\":\"q\",\"image_refs\":[\"x\"],\"label\":\"l\",\"turns\":[{turns}{{\"type\":\"answer\",\"text\":\"l\"}}]}}\n"
            ));
        }
        std::fs::write(&data, lines).unwrap();
        let ledger = tmp.path().join("l.csv");
        write_ledger(
            &ledger,
            &[
                LedgerEntry::new("z", "preprocess", "no_tool_use"),
                LedgerEntry::new("y", "judge", "incorrect"),
            ],
        )
        .unwrap();
        let s = stats(&data, Some(&ledger)).unwrap();
        assert_eq!(s.records, 10);
        assert_eq!(s.by_task_type["ocr"], 5);
        assert_eq!(s.horizon_histogram.values().sum::<usize>(), 10);
        assert_eq!(s.horizon_histogram[&0], 4);
        assert_eq!(s.drops_by_rule["no_tool_use"], 1);
        assert_eq!(stats(&data, Some(&ledger)).unwrap().to_json(), s.to_json());

        let empty = tmp.path().join("e.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert_eq!(stats(&empty, None).unwrap(), Summary::default());

        assert!(matches!(
            stats(&tmp.path().join("missing"), None),
            Err(PipelineError::UnreadableDataset { .. })
        ));
        std::fs::write(&empty, "not json\n").unwrap();
        assert!(matches!(stats(&empty, None), Err(PipelineError::UnreadableDataset { .. })));
    }

    #[test]
    fn canonical_sort_is_order_independent() {
        let mut a = vec!["x", "y", "z", "w"];
        let mut b = vec!["w", "z", "x", "y"];
        sort_canonical(&mut a);
        sort_canonical(&mut b);
        assert_eq!(a, b);
    }
}
