use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::write_atomic;
use crate::error::{Error, Result};

/// Content hash in the style of a git blob id, with SHA-256.
pub fn git_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    /// Role of the input on the command line, e.g. `--target`.
    pub flag: String,
    pub path: PathBuf,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStamp {
    pub name: String,
    pub started_ms: u128,
    pub finished_ms: Option<u128>,
}

/// Everything needed to repeat a command-line run: the command, its
/// arguments, the resolved configuration and hashes of every input file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    /// Resolved configuration document.
    pub config: String,
    pub inputs: Vec<InputRecord>,
    /// Hash over the command, the configuration and the input hashes. Every
    /// artifact the run writes carries it.
    pub run_id: String,
    pub stages: Vec<StageStamp>,
    pub outputs: Vec<PathBuf>,
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, seed: Option<u64>, config: String, inputs: &[(String, PathBuf)]) -> Result<Self> {
        let mut records = Vec::with_capacity(inputs.len());
        for (flag, path) in inputs {
            let bytes = std::fs::read(path).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    Error::MissingCheckpoint(path.display().to_string())
                } else {
                    Error::io(path, e)
                }
            })?;
            records.push(InputRecord {
                flag: flag.clone(),
                path: path.clone(),
                hash: git_hash(&bytes),
            });
        }
        let mut id = format!("{command}\n{config}\n");
        for r in &records {
            id.push_str(&format!("{} {}\n", r.flag, r.hash));
        }
        Ok(RunManifest {
            command: command.into(),
            args,
            seed,
            config,
            run_id: git_hash(id.as_bytes()),
            inputs: records,
            stages: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn begin(&mut self, name: &str) {
        self.stages.push(StageStamp {
            name: name.into(),
            started_ms: now_ms(),
            finished_ms: None,
        });
    }

    pub fn end(&mut self) {
        if let Some(s) = self.stages.last_mut() {
            s.finished_ms.get_or_insert_with(now_ms);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(self)?;
        text.push(b'\n');
        write_atomic(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }
}
