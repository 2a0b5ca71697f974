use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

/// Record of one invocation, written before any work starts.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Run config (or generator parameters) as flat `key = value` text.
    pub config: String,
    pub seed: u64,
    /// SHA-256 over the git blob hashes of every input file plus the config text.
    pub input_hash: String,
    pub outputs: Vec<PathBuf>,
}

fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Content hash of `inputs` (files or directories, walked recursively) and `config`.
/// Independent of file modification times and directory iteration order.
pub fn input_hash(inputs: &[&Path], config: &str) -> Result<String, Failure> {
    let mut lines = Vec::new();
    for root in inputs {
        let mut files = Vec::new();
        if root.is_dir() {
            collect_files(root, &mut files).map_err(|e| Failure::io(root, e))?;
        } else {
            files.push(root.to_path_buf());
        }
        for f in files {
            let bytes = std::fs::read(&f).map_err(|e| Failure::io(&f, e))?;
            let rel = f.strip_prefix(root).unwrap_or(&f);
            lines.push(format!("{} {}", blob_hash(&bytes), rel.display()));
        }
    }
    lines.sort();
    let mut h = Sha256::new();
    for l in &lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    h.update(blob_hash(config.as_bytes()).as_bytes());
    Ok(hex::encode(h.finalize()))
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Failure::io(&path, e))
    }
}
