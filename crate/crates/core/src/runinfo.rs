//! Run provenance embedded in every report.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// SHA-256 (hex) of the configuration's JSON serialisation.
pub fn config_hash<T: Serialize + ?Sized>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).expect("configuration serialises to JSON");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInfo {
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
}

impl RunInfo {
    pub fn new<T: Serialize + ?Sized>(cfg: &T, seed: u64) -> Self {
        Self {
            config_hash: config_hash(cfg),
            seed,
            tool_version: crate::TOOL_VERSION.to_string(),
        }
    }
}

impl Default for RunInfo {
    fn default() -> Self {
        Self::new(&(), 0)
    }
}
