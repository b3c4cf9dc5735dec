//! Content-addressed stage outputs under `<work>/<stage>/<key>/`, and the
//! work-directory lock.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DONE_MARKER: &str = ".done";
const LOCK_FILE: &str = ".lock";

/// Accumulates the inputs and parameters a stage output depends on.
#[derive(Debug, Clone)]
pub struct KeyBuilder {
    stage: String,
    lines: Vec<String>,
}

impl KeyBuilder {
    pub fn new(stage: &str) -> Self {
        Self {
            stage: stage.to_string(),
            lines: vec![format!("stage={stage}")],
        }
    }

    pub fn field(mut self, name: &str, value: impl Display) -> Self {
        self.lines.push(format!("{name}={value}"));
        self
    }

    pub fn finish(self) -> StageKey {
        let description = self.lines.join("\n");
        StageKey {
            stage: self.stage,
            hash: hex::encode(Sha256::digest(description.as_bytes())),
            description,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageKey {
    pub stage: String,
    /// Hex sha256 of `description`.
    pub hash: String,
    pub description: String,
}

impl StageKey {
    pub fn short(&self) -> &str {
        &self.hash[..16]
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone)]
pub struct StageCache {
    root: PathBuf,
}

impl StageCache {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn dir(&self, key: &StageKey) -> PathBuf {
        self.root.join(&key.stage).join(key.short())
    }

    pub fn is_done(&self, key: &StageKey) -> bool {
        self.dir(key).join(DONE_MARKER).is_file()
    }

    /// Produces the output unless it is already complete, then loads it.
    /// Loading from disk on both paths keeps a fresh run and a cache hit
    /// bit-identical. The marker is written last, so a failed stage leaves
    /// its partial output in place for inspection and is redone on the next
    /// run. Returns the value and whether it was a cache hit.
    pub fn run<T>(
        &self,
        key: &StageKey,
        produce: impl FnOnce(&Path) -> Result<()>,
        load: impl FnOnce(&Path) -> Result<T>,
    ) -> Result<(T, bool)> {
        let dir = self.dir(key);
        let hit = self.is_done(key);
        if !hit {
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            produce(&dir)?;
            let marker = dir.join(DONE_MARKER);
            fs::write(&marker, &key.description).map_err(|e| Error::io(&marker, e))?;
        }
        Ok((load(&dir)?, hit))
    }
}

/// Exclusive ownership of a work directory for the lifetime of the value.
#[derive(Debug)]
pub struct WorkLock {
    path: PathBuf,
}

impl WorkLock {
    pub fn acquire(work_dir: &Path) -> Result<Self> {
        fs::create_dir_all(work_dir).map_err(|e| Error::io(work_dir, e))?;
        let path = work_dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                fs::write(&path, std::process::id().to_string()).map_err(|e| Error::io(&path, e))?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for WorkLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_depends_on_every_field() {
        let a = KeyBuilder::new("s").field("x", 1).field("y", "a").finish();
        let b = KeyBuilder::new("s").field("x", 1).field("y", "b").finish();
        let c = KeyBuilder::new("t").field("x", 1).field("y", "a").finish();
        let a2 = KeyBuilder::new("s").field("x", 1).field("y", "a").finish();
        assert_eq!(a, a2);
        assert_ne!(a.hash, b.hash);
        assert_ne!(a.hash, c.hash);
    }

    #[test]
    fn hit_after_success_only() {
        let dir = tempfile::tempdir().unwrap();
        let cache = StageCache::new(dir.path());
        let key = KeyBuilder::new("s").field("v", 1).finish();
        let read = |d: &Path| Ok(fs::read_to_string(d.join("out")).unwrap().parse::<u32>().unwrap());
        let failed = cache.run(
            &key,
            |d| {
                fs::write(d.join("partial"), "x").unwrap();
                Err(Error::Degenerate("boom".into()))
            },
            read,
        );
        assert!(failed.is_err());
        assert!(cache.dir(&key).join("partial").exists(), "partial output kept");
        let produce = |d: &Path| {
            assert!(!d.join("partial").exists());
            fs::write(d.join("out"), "7").map_err(|e| Error::io(d, e))
        };
        assert_eq!(cache.run(&key, produce, read).unwrap(), (7, false));
        assert_eq!(cache.run(&key, |_| unreachable!(), read).unwrap(), (7, true));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = WorkLock::acquire(dir.path()).unwrap();
        assert!(matches!(WorkLock::acquire(dir.path()), Err(Error::Locked(_))));
        drop(lock);
        WorkLock::acquire(dir.path()).unwrap();
    }
}
