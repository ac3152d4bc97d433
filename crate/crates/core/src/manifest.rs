//! Run manifests: the resolved configuration of a run plus content digests
//! of every input file, written next to the outputs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, Read};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed manifest: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Every flag of the command after defaults were applied.
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<InputDigest>,
    /// Seconds since the Unix epoch.
    pub created: u64,
}

/// Mismatch found when re-hashing a manifest's inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DigestProblem {
    Missing {
        role: String,
        path: PathBuf,
    },
    Changed {
        role: String,
        path: PathBuf,
        expected: String,
        found: String,
    },
}

pub fn file_digest(path: &Path) -> Result<(String, u64), ManifestError> {
    let io_err = |source| ManifestError::Io {
        path: path.to_owned(),
        source,
    };
    let mut reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    let mut total = 0u64;
    loop {
        let n = reader.read(&mut buf).map_err(io_err)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    Ok((hex::encode(hasher.finalize()), total))
}

impl RunManifest {
    pub fn new(command: &str, config: BTreeMap<String, String>) -> Self {
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            tool: env!("CARGO_PKG_NAME").to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            command: command.to_owned(),
            config,
            inputs: Vec::new(),
            created,
        }
    }

    /// Hashes `path` and records it under `role`, as an absolute path when
    /// it can be resolved.
    pub fn add_input(&mut self, role: &str, path: &Path) -> Result<(), ManifestError> {
        let (sha256, bytes) = file_digest(path)?;
        self.inputs.push(InputDigest {
            role: role.to_owned(),
            path: std::fs::canonicalize(path).unwrap_or_else(|_| path.to_owned()),
            sha256,
            bytes,
        });
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<(), ManifestError> {
        std::fs::write(path, self.to_json()).map_err(|source| ManifestError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_owned(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Re-hashes every recorded input. Empty when all still match.
    pub fn verify(&self) -> Vec<DigestProblem> {
        self.inputs
            .iter()
            .filter_map(|input| match file_digest(&input.path) {
                Err(_) => Some(DigestProblem::Missing {
                    role: input.role.clone(),
                    path: input.path.clone(),
                }),
                Ok((found, _)) if found != input.sha256 => Some(DigestProblem::Changed {
                    role: input.role.clone(),
                    path: input.path.clone(),
                    expected: input.sha256.clone(),
                    found,
                }),
                Ok(_) => None,
            })
            .collect()
    }
}
