use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

pub const MANIFEST_FILE: &str = "manifest.json";

/// One command invocation recorded in an output directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// SHA-256 over the relative paths and contents of the files the
    /// command left in the directory, excluding the manifest.
    pub artifact_hash: String,
    pub started: String,
    pub finished: String,
    pub version: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub runs: Vec<RunRecord>,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

pub fn artifact_hash(dir: &Path) -> std::io::Result<String> {
    let mut files: Vec<_> = WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() != MANIFEST_FILE)
        .map(|e| e.into_path())
        .collect();
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update(fs::read(&f)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Append `record` to the directory's manifest, creating it if needed.
pub fn append(dir: &Path, record: RunRecord) -> std::io::Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut manifest: RunManifest = match fs::read_to_string(&path) {
        Ok(s) => serde_json::from_str(&s).unwrap_or_default(),
        Err(_) => RunManifest::default(),
    };
    manifest.runs.push(record);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)
}
