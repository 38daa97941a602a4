//! Experiment directory: advisory lock, append-only artifact index.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hatlm::util::stable_hash;
use serde::{Deserialize, Serialize};

use crate::{ConflictError, MissingError};

pub const INDEX: &str = "artifacts.jsonl";
const LOCK: &str = ".hatlm.lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: String,
    pub name: String,
    pub file: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub struct ExpDir {
    root: PathBuf,
    _lock: LockGuard,
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

impl ExpDir {
    pub fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let lock = root.join(LOCK);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|_| {
            ConflictError(format!(
                "{} is locked by another command (remove {} if stale)",
                root.display(),
                lock.display()
            ))
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self {
            root: root.to_path_buf(),
            _lock: LockGuard(lock),
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.root.join(file)
    }

    /// Corpus directory for one task config hash and seed.
    pub fn data_dir(&self, hash: &str, seed: u64) -> PathBuf {
        self.root.join(format!("data-{hash}-s{seed}"))
    }

    pub fn artifacts(&self) -> Result<Vec<Artifact>> {
        let p = self.path(INDEX);
        if !p.exists() {
            return Ok(Vec::new());
        }
        Ok(hatlm::util::read_jsonl(&p)?)
    }

    /// Latest artifact of `kind` named `name` for `seed`.
    pub fn find(&self, kind: &str, name: &str, seed: u64) -> Result<Artifact> {
        self.artifacts()?
            .into_iter()
            .rev()
            .find(|a| a.kind == kind && a.name == name && a.seed == seed)
            .ok_or_else(|| MissingError(format!("no {kind} artifact named `{name}` for seed {seed}")).into())
    }

    pub fn register(&self, a: &Artifact) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.path(INDEX))?;
        serde_json::to_writer(&mut f, a)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// Writes a file that must not already exist with different content.
    pub fn write_new(&self, file: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(file);
        if p.exists() {
            if std::fs::read(&p)? == bytes {
                return Ok(p);
            }
            return Err(ConflictError(format!("{} already exists with different content", p.display())).into());
        }
        let mut f = File::create(&p)?;
        f.write_all(bytes)?;
        Ok(p)
    }

    /// Produces a file through `write` into a scratch name, then moves it
    /// into place under the append-only rule.
    pub fn produce(&self, file: &str, write: impl FnOnce(&Path) -> hatlm::Result<()>) -> Result<PathBuf> {
        let tmp = self.path(&format!(".{file}.partial"));
        write(&tmp)?;
        let bytes = std::fs::read(&tmp)?;
        std::fs::remove_file(&tmp)?;
        self.write_new(file, &bytes)
    }
}

/// `<stem>-<hash>-s<seed>.<ext>`.
pub fn artifact_name(stem: &str, hash: &str, seed: u64, ext: &str) -> String {
    format!("{stem}-{hash}-s{seed}.{ext}")
}

pub fn content_hash(bytes: &[u8]) -> String {
    stable_hash(bytes)
}
