//! Run manifest: enough provenance to re-run a command bit-identically.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument echo; re-running `zimclust` with these arguments
    /// reproduces the primary outputs byte for byte.
    pub argv: Vec<String>,
    pub seed: u64,
    pub version: String,
    pub inputs: BTreeMap<String, InputDigest>,
    pub threads: usize,
    /// Wall-clock duration; excluded from the reproducibility contract.
    pub duration_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: BTreeMap::new(),
            threads: rayon::current_num_threads(),
            duration_seconds: 0.0,
        }
    }

    pub fn add_input(&mut self, role: &str, path: &Path) -> Result<()> {
        let digest = file_sha256(path)?;
        self.inputs.insert(
            role.to_string(),
            InputDigest {
                path: path.display().to_string(),
                sha256: digest,
            },
        );
        Ok(())
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(digest.len() * 2);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    Ok(hex)
}
