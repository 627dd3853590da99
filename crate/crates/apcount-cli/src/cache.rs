//! Content-addressed result cache: one JSON line per entry in a single
//! append-only store file. The key is a SHA-256 digest of the canonical
//! config. Corrupt lines are skipped with a warning; any I/O failure
//! degrades to cache-off behavior rather than failing the run.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::report::ReportValue;

pub const ENV_DIR: &str = "APCOUNT_CACHE_DIR";

pub fn key_of(material: &str) -> String {
    let digest = Sha256::digest(material.as_bytes());
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    values: Vec<ReportValue>,
}

pub struct Cache {
    store: PathBuf,
}

impl Cache {
    /// Active only when the cache directory env var is set; a directory
    /// that cannot be created disables the cache with a warning.
    pub fn from_env(warnings: &mut Vec<String>) -> Option<Cache> {
        let dir = PathBuf::from(std::env::var_os(ENV_DIR)?);
        if let Err(e) = std::fs::create_dir_all(&dir) {
            warnings.push(format!(
                "cache disabled: cannot create {}: {}",
                dir.display(),
                e
            ));
            return None;
        }
        Some(Cache {
            store: dir.join("store.jsonl"),
        })
    }

    pub fn get(&self, key: &str, warnings: &mut Vec<String>) -> Option<Vec<ReportValue>> {
        let text = match std::fs::read_to_string(&self.store) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return None,
            Err(e) => {
                warnings.push(format!("cache read failed, recomputing: {}", e));
                return None;
            }
        };
        // Later entries win, so a re-recorded key shadows older lines.
        let mut found = None;
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<CacheEntry>(line) {
                Ok(entry) => {
                    if entry.key == key {
                        found = Some(entry.values);
                    }
                }
                Err(_) => {
                    warnings.push(format!("cache: ignoring corrupt entry at line {}", idx + 1));
                }
            }
        }
        found
    }

    pub fn put(&self, key: &str, values: &[ReportValue], warnings: &mut Vec<String>) {
        let entry = CacheEntry {
            key: key.to_string(),
            values: values.to_vec(),
        };
        let line = match serde_json::to_string(&entry) {
            Ok(line) => line,
            Err(e) => {
                warnings.push(format!("cache write skipped: {}", e));
                return;
            }
        };
        let appended = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.store)
            .and_then(|mut file| writeln!(file, "{}", line));
        if let Err(e) = appended {
            warnings.push(format!("cache write failed: {}", e));
        }
    }
}
