//! Run manifests: content hashes of every input and output plus the
//! parameters and tool version. No timestamps, so identical runs produce
//! identical manifests.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub parameters: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

/// SHA-256 of a file, or for a directory, of its sorted
/// `relative-path NUL file-hash NL` listing.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect(path, path, &mut files)?;
        files.sort();
        let mut h = Sha256::new();
        for (rel, digest) in files {
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(digest.as_bytes());
            h.update(b"\n");
        }
        return Ok(hex::encode(h.finalize()));
    }
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_dir() {
            collect(root, &p, out)?;
        } else {
            let rel = p
                .strip_prefix(root)
                .unwrap_or(&p)
                .to_string_lossy()
                .replace('\\', "/");
            out.push((rel, hash_path(&p)?));
        }
    }
    Ok(())
}

fn hashes(paths: &[PathBuf]) -> Result<Vec<FileHash>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileHash {
                path: p.display().to_string(),
                sha256: hash_path(p)?,
            })
        })
        .collect()
}

impl Manifest {
    pub fn new(
        command: &'static str,
        parameters: impl Serialize,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            parameters: serde_json::to_value(parameters)?,
            inputs: hashes(inputs)?,
            outputs: hashes(outputs)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing manifest {}", path.display()))
    }
}

/// `<out>.manifest.json`, or `<dir>/manifest.json` for directory outputs.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        return out.join("manifest.json");
    }
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}
