use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Config key holding the path.
    pub key: String,
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(key: &str, path: &Path) -> CliResult<Self> {
        Ok(Artifact { key: key.to_string(), path: path.to_path_buf(), sha256: sha256_file(path)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u64,
    pub command: String,
    pub tool_version: String,
    /// Fully resolved config, defaults included.
    pub config: Value,
    pub seed: u64,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> CliResult<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(beamprm::Error::Version { found: m.format_version, expected: MANIFEST_FORMAT_VERSION }.into());
        }
        Ok(m)
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| {
        CliError::Core(beamprm::Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        fs::write(&p, "abc").unwrap();
        assert_eq!(sha256_file(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn round_trip_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let mut m = RunManifest {
            format_version: 1,
            command: "gen-tasks".into(),
            tool_version: "0".into(),
            config: serde_json::json!({"seed": 3}),
            seed: 3,
            inputs: vec![],
            outputs: vec![],
            started_unix_ms: 1,
            finished_unix_ms: 2,
        };
        m.write(&p).unwrap();
        assert_eq!(RunManifest::read(&p).unwrap(), m);
        m.format_version = 9;
        m.write(&p).unwrap();
        assert_eq!(RunManifest::read(&p).unwrap_err().exit_code(), 4);
    }
}
