use serde::{Deserialize, Serialize};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// The settings that identify an experiment arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub seed: u64,
    pub epsilon: f64,
    pub hops: usize,
    pub k_neighbors: usize,
    pub layers: usize,
}

/// Attached to every emitted artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub fingerprint: Fingerprint,
}

impl Provenance {
    pub fn new(fingerprint: Fingerprint) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            fingerprint,
        }
    }
}
