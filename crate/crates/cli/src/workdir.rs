//! Workdir layout, the writer lock and config-hash stamps on text artifacts.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use lancer_core::{Error, Result};

pub const CONFIG: &str = "config.txt";
pub const CATALOG: &str = "catalog.jsonl";
pub const DATASET: &str = "dataset.json";
pub const STATS: &str = "stats.json";
pub const VOCAB: &str = "vocab.tsv";
pub const STAGE1: &str = "stage1.ckpt";
pub const ENCODINGS: &str = "encodings.tsv";
pub const STAGE2: &str = "stage2.ckpt";
pub const INDEX: &str = "index.bin";
pub const METRICS: &str = "metrics.json";
pub const DETAIL: &str = "detail.tsv";
const LOCK: &str = ".lock";

/// First line of every stamped text artifact.
const STAMP: &str = "# config_hash ";

pub struct Workdir {
    root: PathBuf,
    force: bool,
}

/// Held while a command writes into the workdir; removed on drop.
pub struct Lock(PathBuf);

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Debug, thiserror::Error)]
#[error("workdir {0} is locked by another command (remove {0}/.lock if stale)")]
pub struct Locked(pub PathBuf);

impl Workdir {
    pub fn new(root: PathBuf, force: bool) -> Self {
        Workdir { root, force }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    pub fn lock(&self) -> std::result::Result<Lock, crate::Failure> {
        fs::create_dir_all(&self.root).map_err(|e| io(&self.root, e))?;
        let path = self.path(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Locked(self.root.clone()).into()),
            Err(e) => Err(io(&path, e).into()),
        }
    }

    pub fn write(&self, name: &str, body: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, body).map_err(|e| io(&path, e))
    }

    pub fn read(&self, name: &str) -> Result<Vec<u8>> {
        let path = self.path(name);
        fs::read(&path).map_err(|e| io(&path, e))
    }

    pub fn write_stamped(&self, name: &str, hash: &str, body: &str) -> Result<()> {
        self.write(name, format!("{STAMP}{hash}\n{body}").as_bytes())
    }

    /// Body of a stamped artifact after checking its hash against `hash`.
    pub fn read_stamped(&self, name: &str, hash: &str) -> Result<String> {
        let path = self.path(name);
        let text = String::from_utf8(self.read(name)?).map_err(|_| Error::Corrupt {
            path: path.clone(),
            reason: "not UTF-8".into(),
        })?;
        let (first, body) = text.split_once('\n').unwrap_or((&text, ""));
        let found = first.strip_prefix(STAMP).ok_or_else(|| Error::Corrupt {
            path: path.clone(),
            reason: "missing config hash stamp".into(),
        })?;
        self.check(name, hash, found)?;
        Ok(body.to_string())
    }

    /// Refuses `found != expected` unless forced.
    pub fn check(&self, name: &str, expected: &str, found: &str) -> Result<()> {
        if found == expected {
            return Ok(());
        }
        if self.force {
            log::warn!("{name}: config hash {found} differs from {expected}, continuing (--force)");
            return Ok(());
        }
        Err(Error::ConfigHash {
            artifact: self.path(name).display().to_string(),
            expected: expected.into(),
            found: found.into(),
        })
    }
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stamp_round_trips_and_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let wd = Workdir::new(dir.path().to_path_buf(), false);
        wd.write_stamped(VOCAB, "abc", "a\t1\n").unwrap();
        assert_eq!(wd.read_stamped(VOCAB, "abc").unwrap(), "a\t1\n");
        assert!(matches!(wd.read_stamped(VOCAB, "def"), Err(Error::ConfigHash { .. })));
        let forced = Workdir::new(dir.path().to_path_buf(), true);
        assert_eq!(forced.read_stamped(VOCAB, "def").unwrap(), "a\t1\n");
    }

    #[test]
    fn unstamped_artifact_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let wd = Workdir::new(dir.path().to_path_buf(), false);
        wd.write(INDEX, b"no stamp\n").unwrap();
        assert!(matches!(wd.read_stamped(INDEX, "abc"), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn lock_is_exclusive_and_released_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let wd = Workdir::new(dir.path().join("w"), false);
        let held = wd.lock().unwrap();
        assert!(matches!(wd.lock(), Err(crate::Failure::Locked(_))));
        drop(held);
        assert!(!wd.exists(LOCK));
        wd.lock().unwrap();
    }
}
