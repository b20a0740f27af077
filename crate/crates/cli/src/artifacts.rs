//! Run directories and their hash manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub created_unix: u64,
    pub version: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub struct RunDir {
    pub path: PathBuf,
    command: String,
    created: u64,
    inputs: Vec<FileHash>,
}

impl RunDir {
    /// `exact` is used as is (it may exist but must be empty); otherwise a
    /// fresh `<base>/<command>-<unix seconds>[-k]` is created.
    pub fn create(base: &Path, command: &str, exact: Option<&Path>) -> Result<Self> {
        let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let path = match exact {
            Some(p) => {
                if p.exists() && fs::read_dir(p).map_err(|e| CliError::io(p, e))?.next().is_some() {
                    return Err(CliError::Usage(format!("run directory {} is not empty", p.display())));
                }
                p.to_path_buf()
            }
            None => {
                let stem = format!("{command}-{created}");
                let mut p = base.join(&stem);
                let mut k = 1;
                while p.exists() {
                    p = base.join(format!("{stem}-{k}"));
                    k += 1;
                }
                p
            }
        };
        fs::create_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(Self {
            path,
            command: command.into(),
            created,
            inputs: Vec::new(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.file(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<PathBuf> {
        self.write(CONFIG_SNAPSHOT, cfg.to_toml())
    }

    /// Hash every file below the run directory into the manifest.
    pub fn finish(self) -> Result<PathBuf> {
        let mut outputs = Vec::new();
        collect(&self.path, &self.path, &mut outputs)?;
        outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let m = Manifest {
            command: self.command.clone(),
            created_unix: self.created,
            version: env!("CARGO_PKG_VERSION").into(),
            inputs: self.inputs.clone(),
            outputs,
        };
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        self.write(MANIFEST, json)?;
        Ok(self.path)
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<FileHash>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path();
        if p.is_dir() {
            collect(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != MANIFEST) {
            out.push(FileHash {
                path: p.strip_prefix(root).expect("below root").display().to_string(),
                sha256: sha256_file(&p)?,
            });
        }
    }
    Ok(())
}
