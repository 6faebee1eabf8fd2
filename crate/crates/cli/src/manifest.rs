//! Run manifests and output-directory locking.

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const LOCK_FILE: &str = ".lock";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("{} is locked by another run ({} exists)", dir.display(), path.display())
            }
            Err(e) => Err(e).with_context(|| format!("locking {}", dir.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub wall_seconds: f64,
    /// Resolved configuration, already in `key=value` lines.
    pub config: String,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    /// Hashes the named files under `dir`; every file must exist.
    pub fn collect(command: &str, config: String, wall_seconds: f64, dir: &Path, files: &[String]) -> Result<Self> {
        let mut artifacts = Vec::with_capacity(files.len());
        for f in files {
            let full = dir.join(f);
            let bytes = fs::read(&full).with_context(|| format!("manifest artifact {} is missing", full.display()))?;
            artifacts.push(Artifact { path: f.clone(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
        }
        Ok(Self { command: command.to_string(), version: env!("CARGO_PKG_VERSION").to_string(), wall_seconds, config, artifacts })
    }

    /// Text form. The `[config]` section is itself a valid config file.
    pub fn render(&self) -> String {
        let mut s = format!(
            "# gradalign run manifest\n[run]\ncommand={}\nversion={}\nwall_seconds={}\n[config]\n{}[artifacts]\n",
            self.command, self.version, self.wall_seconds, self.config
        );
        for a in &self.artifacts {
            s += &format!("{}={} {}\n", a.path, a.sha256, a.bytes);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.render()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Artifact lines of a rendered manifest: `(path, sha256)`.
pub fn read_artifacts(text: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut inside = false;
    for line in text.lines() {
        let line = line.trim();
        if line.starts_with('[') {
            inside = line == "[artifacts]";
            continue;
        }
        if inside {
            if let Some((p, rest)) = line.split_once('=') {
                let hash = rest.split_whitespace().next().unwrap_or("");
                out.push((p.to_string(), hash.to_string()));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_value() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn manifest_lists_only_existing_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "x\n").unwrap();
        let m = RunManifest::collect("t", "k=v\n".into(), 0.5, dir.path(), &["a.csv".into()]).unwrap();
        let text = m.render();
        assert_eq!(read_artifacts(&text), vec![("a.csv".to_string(), sha256_hex(b"x\n"))]);
        assert!(text.contains("[config]\nk=v\n[artifacts]"));
        assert!(RunManifest::collect("t", String::new(), 0.0, dir.path(), &["missing".into()]).is_err());
    }
}
