//! Run manifests: the resolved config's hash, the master seed, and a
//! sha-256 digest per written artifact, serialized as sorted JSON. Two runs
//! of the same command with the same config and seed must produce the same
//! manifest, so nothing time- or host-dependent belongs here.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use ternq_core::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Serialize)]
pub struct Manifest {
    command: String,
    seed: u64,
    config_sha256: String,
    artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config_text: &str) -> Self {
        Manifest {
            command: command.to_string(),
            seed,
            config_sha256: sha256_hex(config_text.as_bytes()),
            artifacts: BTreeMap::new(),
        }
    }

    /// Writes `name` under `dir` and records its digest.
    pub fn write_artifact(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = dir.join(name);
        std::fs::write(&path, bytes)?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }
}
