//! Atomic output files and the `run.json` manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "run.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce a run. No wall-clock fields, so identical
/// invocations produce identical manifests.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Flags that select data rather than configure a stage.
    pub params: BTreeMap<String, serde_json::Value>,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
    pub summary: BTreeMap<String, serde_json::Value>,
}

/// Per-run bookkeeping: reads inputs, writes outputs, emits the manifest.
pub struct Run {
    out_dir: PathBuf,
    manifest: Manifest,
}

impl Run {
    pub fn new(command: &str, out_dir: &Path, config: serde_json::Value) -> Result<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| CliError::input(out_dir, e))?;
        let canonical = serde_json::to_string(&config).expect("config serializes");
        Ok(Run {
            out_dir: out_dir.to_path_buf(),
            manifest: Manifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                config_hash: sha256_hex(canonical.as_bytes()),
                config,
                seeds: BTreeMap::new(),
                params: BTreeMap::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                summary: BTreeMap::new(),
            },
        })
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.manifest.seeds.insert(name.to_string(), seed);
    }

    pub fn param(&mut self, name: &str, value: impl Serialize) {
        self.manifest.params.insert(name.to_string(), serde_json::to_value(value).expect("param serializes"));
    }

    pub fn summary(&mut self, name: &str, value: impl Serialize) {
        self.manifest.summary.insert(name.to_string(), serde_json::to_value(value).expect("summary serializes"));
    }

    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| CliError::input(path, e))?;
        self.manifest.inputs.push(FileDigest { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        Ok(bytes)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.out_dir.join(name), bytes)?;
        self.manifest.outputs.push(FileDigest { path: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn finish(self) -> Result<PathBuf> {
        let mut json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        json.push('\n');
        let path = self.out_dir.join(MANIFEST_FILE);
        write_atomic(&path, json.as_bytes())?;
        Ok(path)
    }
}

/// Writes through a temp file in the target directory, then renames over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::Builder::new()
        .prefix(".smartcampus-")
        .suffix(".tmp")
        .tempfile_in(dir)
        .map_err(|e| CliError::input(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::input(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::input(path, e))?;
    tmp.persist(path).map_err(|e| CliError::input(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from("a.csv")]);
    }
}
