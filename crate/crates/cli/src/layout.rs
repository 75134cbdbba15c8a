use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use crate::config::RunConfig;
use crate::error::CliError;

const LOCK: &str = ".lock";

/// `<out>/<experiment>/` with its subdirectories, held under a lock file.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Create the layout and take the lock; fails if another process holds it.
    pub fn open(cfg: &RunConfig) -> Result<Self, CliError> {
        let root = cfg.out_root.join(&cfg.experiment);
        for sub in ["checkpoints", "metrics", "results", "analysis"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        let lock = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::Runtime(format!(
                    "{} is in use by another process (remove {} if stale)",
                    root.display(),
                    lock.display()
                )))
            }
            Err(e) => return Err(e.into()),
        }
        let dir = Self { root };
        std::fs::write(dir.root.join("config.snapshot"), cfg.to_toml()?)?;
        Ok(dir)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(name)
    }

    pub fn results(&self, name: &str) -> PathBuf {
        self.root.join("results").join(name)
    }

    pub fn analysis(&self, name: &str) -> PathBuf {
        self.root.join("analysis").join(name)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(self.root.join(LOCK));
    }
}
