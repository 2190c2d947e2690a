//! Run manifests: what a command wrote, with content digests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use maq_core::textio::write_atomic;
use maq_core::{MaqError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub created_unix: u64,
    pub config: BTreeMap<String, String>,
    /// Artifacts read by the command, by the path given.
    pub inputs: Vec<FileEntry>,
    /// Files written by the command, relative to the manifest's directory.
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn new(command: &str, config: BTreeMap<String, String>) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config,
            inputs: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.inputs.push(FileEntry {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn digest_of(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|f| f.path == name).map(|f| f.sha256.as_str())
    }
}

/// Collects the files of one run directory and writes its manifest last.
pub struct RunWriter {
    dir: PathBuf,
    manifest: Manifest,
}

impl RunWriter {
    pub fn create(dir: &Path, manifest: Manifest) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .map_err(|e| MaqError::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
        // a stale manifest must not vouch for a half-written rerun
        let stale = dir.join(MANIFEST_FILE);
        if stale.exists() {
            std::fs::remove_file(&stale)?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest_mut(&mut self) -> &mut Manifest {
        &mut self.manifest
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        write_atomic(&path, contents)?;
        self.manifest.files.retain(|f| f.path != name);
        self.manifest.files.push(FileEntry {
            path: name.to_string(),
            sha256: sha256_hex(contents),
            bytes: contents.len() as u64,
        });
        Ok(path)
    }

    /// Verifies every listed file, then writes the manifest.
    pub fn finish(mut self) -> Result<(PathBuf, Manifest)> {
        self.manifest.files.sort_by(|a, b| a.path.cmp(&b.path));
        verify_entries(&self.dir, &self.manifest)?;
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| MaqError::Config(format!("cannot encode manifest: {e}")))?;
        let path = self.dir.join(MANIFEST_FILE);
        write_atomic(&path, json.as_bytes())?;
        Ok((path, self.manifest))
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| MaqError::parse(e.line(), format!("{}: {e}", path.display())))
}

fn verify_entries(dir: &Path, manifest: &Manifest) -> Result<()> {
    for entry in &manifest.files {
        let path = dir.join(&entry.path);
        let digest = file_digest(&path)
            .map_err(|e| MaqError::Mismatch(format!("{} listed in manifest but unreadable: {e}", path.display())))?;
        if digest != entry.sha256 {
            return Err(MaqError::Mismatch(format!("{} does not match its manifest digest", path.display())));
        }
    }
    Ok(())
}

/// Reads the manifest in `dir` and checks every listed file against it.
pub fn verify_dir(dir: &Path) -> Result<Manifest> {
    let manifest = read_manifest(dir)?;
    verify_entries(dir, &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn writer_lists_and_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = RunWriter::create(dir.path(), Manifest::new("test", BTreeMap::new())).unwrap();
        w.write("b.txt", b"two").unwrap();
        w.write("a.txt", b"one").unwrap();
        let (_, m) = w.finish().unwrap();
        assert_eq!(m.files.iter().map(|f| f.path.as_str()).collect::<Vec<_>>(), ["a.txt", "b.txt"]);
        assert_eq!(verify_dir(dir.path()).unwrap(), m);
        std::fs::write(dir.path().join("a.txt"), b"changed").unwrap();
        assert!(matches!(verify_dir(dir.path()), Err(MaqError::Mismatch(_))));
    }
}
