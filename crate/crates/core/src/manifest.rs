//! Run manifests tying every output file to its inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub seed: u64,
    pub version: String,
    pub duration_s: f64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

impl RunManifest {
    pub fn new(
        command: Vec<String>,
        seed: u64,
        duration_s: f64,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<Self> {
        let digest = |ps: &[PathBuf]| ps.iter().map(|p| FileDigest::of(p)).collect::<Result<Vec<_>>>();
        Ok(Self {
            command,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            duration_s,
            inputs: digest(inputs)?,
            outputs: digest(outputs)?,
        })
    }

    /// Path of the manifest written for a run whose first output is `first`.
    pub fn path_for(first: &Path) -> PathBuf {
        let mut s = first.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }

    /// Output files whose current contents differ from the recorded digest.
    pub fn stale_outputs(&self) -> Result<Vec<String>> {
        let mut stale = Vec::new();
        for o in &self.outputs {
            if sha256_file(Path::new(&o.path))? != o.sha256 {
                stale.push(o.path.clone());
            }
        }
        Ok(stale)
    }
}
