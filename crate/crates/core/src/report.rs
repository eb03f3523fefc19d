//! Reproducible JSON reports.
//!
//! Reports are assembled from sorted collections and serialized with
//! `serde_json`, so two runs with the same inputs and seed produce the same
//! bytes apart from the `timestamp` field.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{aggregate, AggregateMode, RelationReport, SuiteSummary};

pub const STD_CONVENTION: &str = "population";

/// SHA-256 over the names and contents of `files`, in sorted path order.
pub fn fingerprint_files(files: &[PathBuf]) -> Result<String> {
    let mut sorted: Vec<&PathBuf> = files.iter().collect();
    sorted.sort();
    let mut hasher = Sha256::new();
    for path in sorted {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Content hash of a resource directory's `*.json` files plus, optionally,
/// a tuples file.
pub fn resource_fingerprint(resource_dir: &Path, tuples: Option<&Path>) -> Result<String> {
    let entries = fs::read_dir(resource_dir).map_err(|e| Error::io(resource_dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(resource_dir, e))?.path();
        if path.extension().is_some_and(|x| x == "json") {
            files.push(path);
        }
    }
    files.sort();
    if let Some(t) = tuples {
        files.push(t.to_path_buf());
    }
    fingerprint_files(&files)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterSummary {
    pub retained: usize,
    pub removed: usize,
    pub dropped_relations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub model_id: String,
    pub resource_fingerprint: String,
    pub seed: u64,
    pub timestamp: String,
    /// The exact run configuration.
    pub config: serde_json::Value,
    pub std_convention: &'static str,
    pub filter: FilterSummary,
    /// Sorted by relation id.
    pub relations: Vec<RelationReport>,
    #[serde(rename = "macro")]
    pub macro_summary: SuiteSummary,
    #[serde(rename = "micro")]
    pub micro_summary: SuiteSummary,
}

impl ProbeReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model_id: impl Into<String>,
        resource_fingerprint: impl Into<String>,
        seed: u64,
        timestamp: impl Into<String>,
        config: serde_json::Value,
        filter: FilterSummary,
        mut relations: Vec<RelationReport>,
    ) -> Result<Self> {
        relations.sort_by(|a, b| a.relation_id.cmp(&b.relation_id));
        Ok(ProbeReport {
            model_id: model_id.into(),
            resource_fingerprint: resource_fingerprint.into(),
            seed,
            timestamp: timestamp.into(),
            config,
            std_convention: STD_CONVENTION,
            filter,
            macro_summary: aggregate(&relations, AggregateMode::Macro)?,
            micro_summary: aggregate(&relations, AggregateMode::Micro)?,
            relations,
        })
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, to_json(value)?).map_err(|e| Error::io(path, e))
}

/// One JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_tracks_content_not_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        fs::write(&a, "[1]").unwrap();
        fs::write(&b, "[2]").unwrap();
        let f1 = fingerprint_files(&[a.clone(), b.clone()]).unwrap();
        let f2 = fingerprint_files(&[b.clone(), a.clone()]).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.len(), 64);
        fs::write(&b, "[3]").unwrap();
        assert_ne!(f1, fingerprint_files(&[a, b]).unwrap());
    }

    #[test]
    fn resource_fingerprint_ignores_other_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("P1.json"), "{}").unwrap();
        let before = resource_fingerprint(dir.path(), None).unwrap();
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        assert_eq!(before, resource_fingerprint(dir.path(), None).unwrap());
    }
}
