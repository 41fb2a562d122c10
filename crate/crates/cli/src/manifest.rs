//! Run manifests: resolved config, seed, code version and content hashes
//! of every input and output, without timestamps, so equal runs produce
//! equal manifests.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub code_version: &'static str,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub summary: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn hashes(paths: &[PathBuf]) -> io::Result<Vec<FileHash>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileHash {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            code_version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    /// Hashes the files and writes the manifest to `dest`.
    pub fn write(mut self, dest: &Path, inputs: &[PathBuf], outputs: &[PathBuf]) -> io::Result<()> {
        self.inputs = hashes(inputs)?;
        self.outputs = hashes(outputs)?;
        let mut w = BufWriter::new(File::create(dest)?);
        serde_json::to_writer_pretty(&mut w, &self)?;
        w.write_all(b"\n")?;
        w.flush()
    }
}

/// `manifest.json` inside an output directory.
pub fn dir_manifest(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// `<file>.manifest.json` next to a single-file output.
pub fn sidecar_manifest(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    file.with_file_name(name)
}
