//! Output directories are staged next to their destination and renamed into
//! place once complete, so a failed run never leaves a half-written directory.

use std::fs;
use std::path::{Path, PathBuf};

use probekit::{Error, Result};

pub struct RunDir {
    staging: tempfile::TempDir,
    target: PathBuf,
    overwrite: bool,
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn is_nonempty(path: &Path) -> Result<bool> {
    match fs::read_dir(path) {
        Ok(mut entries) => Ok(entries.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) if e.kind() == std::io::ErrorKind::NotADirectory => Ok(true),
        Err(e) => Err(io(path, e)),
    }
}

impl RunDir {
    /// Fails up front if `target` is non-empty and `overwrite` is off.
    pub fn create(target: &Path, overwrite: bool) -> Result<Self> {
        if !overwrite && is_nonempty(target)? {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --overwrite to replace it",
                target.display()
            )));
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| io(&parent, e))?;
        let staging = tempfile::Builder::new()
            .prefix(".probekit-staging-")
            .tempdir_in(&parent)
            .map_err(|e| io(&parent, e))?;
        Ok(Self { staging, target: target.to_path_buf(), overwrite })
    }

    pub fn path(&self) -> &Path {
        self.staging.path()
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.staging.path().join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.file(name);
        fs::write(&path, contents).map_err(|e| io(&path, e))
    }

    pub fn commit(self) -> Result<PathBuf> {
        if self.target.exists() {
            if !self.overwrite && is_nonempty(&self.target)? {
                return Err(Error::Config(format!("{} appeared during the run", self.target.display())));
            }
            let removed = if self.target.is_dir() { fs::remove_dir_all(&self.target) } else { fs::remove_file(&self.target) };
            removed.map_err(|e| io(&self.target, e))?;
        }
        let staged = self.staging.keep();
        fs::rename(&staged, &self.target).map_err(|e| io(&self.target, e))?;
        Ok(self.target)
    }
}
