//! Run directory: lockfile and manifest.
use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const LOCK_FILE: &str = ".lock";
pub const MANIFEST: &str = "manifest.json";

/// Held for the lifetime of a run; removes the lockfile on drop.
pub struct RunDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn claim(path: &Path) -> Result<RunDir, CliError> {
        fs::create_dir_all(path)
            .map_err(|e| CliError::Config(format!("cannot create run directory {}: {e}", path.display())))?;
        let lock = path.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::Config(format!(
                    "run directory {} is in use (remove {} if no run is live)",
                    path.display(),
                    lock.display()
                ))
            } else {
                CliError::Config(format!("cannot lock {}: {e}", path.display()))
            }
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(RunDir {
            path: path.to_owned(),
            lock,
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_manifest(&self, m: &Manifest) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(m).expect("manifest serializes");
        fs::write(self.file(MANIFEST), text + "\n")
            .map_err(|e| CliError::Config(format!("cannot write manifest: {e}")))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// running, ok or failed
    pub status: String,
    pub error: Option<String>,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// Fully resolved settings; `pnas replay` runs from these alone.
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub result: BTreeMap<String, String>,
}

impl Manifest {
    pub fn start(command: &str, config: BTreeMap<String, String>) -> Manifest {
        Manifest {
            tool: "pnas".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            status: "running".into(),
            error: None,
            started_at: now(),
            finished_at: None,
            config,
            seeds: BTreeMap::new(),
            outputs: Vec::new(),
            result: BTreeMap::new(),
        }
    }

    pub fn read(run: &Path) -> Result<Manifest, CliError> {
        let path = run.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("malformed {}: {e}", path.display())))
    }

    pub fn finish(&mut self, outcome: &Result<(), CliError>) {
        self.finished_at = Some(now());
        match outcome {
            Ok(()) => self.status = "ok".into(),
            Err(e) => {
                self.status = "failed".into();
                self.error = Some(e.to_string());
            }
        }
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
