//! File layout of one run.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Checkpoint {
    Gp,
    Hat,
    Merged,
}

impl Checkpoint {
    pub fn name(self) -> &'static str {
        match self {
            Checkpoint::Gp => "gp",
            Checkpoint::Hat => "hat",
            Checkpoint::Merged => "merged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the directory if needed.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(RunDir { root })
    }

    /// Opens an existing directory.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::rejected(format!("run directory {} does not exist", root.display())));
        }
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn record(&self) -> PathBuf {
        self.root.join("run_record.json")
    }

    pub fn checkpoint(&self, t: usize, which: Checkpoint) -> PathBuf {
        self.root.join(format!("ckpt_task_{t}_{}.bin", which.name()))
    }

    pub fn fisher(&self, t: usize) -> PathBuf {
        self.root.join(format!("fisher_task_{t}.bin"))
    }

    pub fn precision(&self, t: usize) -> PathBuf {
        self.root.join(format!("precision_task_{t}.bin"))
    }

    pub fn basis(&self, t: usize) -> (PathBuf, PathBuf) {
        (
            self.root.join(format!("basis_task_{t}.bin")),
            self.root.join(format!("basis_task_{t}.json")),
        )
    }

    pub fn acc_matrix(&self) -> PathBuf {
        self.root.join("acc_matrix.csv")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn lambda_trace(&self) -> PathBuf {
        self.root.join("lambda_trace.csv")
    }

    pub fn sweep(&self, t: usize) -> PathBuf {
        self.root.join(format!("sweep_task_{t}.csv"))
    }

    pub fn landscape(&self, t: usize) -> PathBuf {
        self.root.join(format!("landscape_task_{t}.csv"))
    }

    /// Fails with the missing path when `path` is absent.
    pub fn require(&self, path: &Path) -> Result<()> {
        if path.is_file() {
            Ok(())
        } else {
            Err(Error::rejected(format!("missing run artifact {}", path.display())))
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}
