//! JSON checkpoint container.
//!
//! ```json
//! {
//!   "format": "layerwise-checkpoint",
//!   "version": 1,
//!   "input_shape": [784],
//!   "layers": [
//!     {
//!       "kind": {"dense": {"inputs": 784, "outputs": 128}},
//!       "activation": "relu",
//!       "params": {
//!         "weights": {"shape": [128, 784], "data": [...]},
//!         "bias": {"shape": [128], "data": [...]}
//!       }
//!     },
//!     {"kind": "flatten", "activation": "identity", "params": null}
//!   ]
//! }
//! ```
//!
//! Floats are written in shortest round-trip form, so save/load is exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, Network};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "layerwise-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize)]
struct CheckpointOut<'a> {
    format: &'static str,
    version: u32,
    input_shape: &'a [usize],
    layers: &'a [Layer],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointIn {
    format: String,
    version: u32,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl Network {
    pub fn to_checkpoint_json(&self) -> Result<Vec<u8>> {
        let out = CheckpointOut {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            input_shape: &self.input_shape,
            layers: &self.layers,
        };
        let mut bytes = serde_json::to_vec(&out)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_checkpoint_json(bytes: &[u8]) -> Result<Network> {
        let raw: CheckpointIn = serde_json::from_slice(bytes)?;
        if raw.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "not a checkpoint: format '{}' (expected '{CHECKPOINT_FORMAT}')",
                raw.format
            )));
        }
        if raw.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                raw.version
            )));
        }
        Network::new(raw.input_shape, raw.layers)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_checkpoint_json()?)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Network> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&bytes)
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`, so the
/// final path only ever holds a complete file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_cnn, build_mlp, Activation};

    #[test]
    fn round_trip_is_exact() {
        for net in [
            build_mlp(&[7, 5, 3], Activation::Tanh, 11).unwrap(),
            build_cnn(&[1, 6, 6], &[2], 4, 3, Activation::Relu, 12).unwrap(),
        ] {
            let bytes = net.to_checkpoint_json().unwrap();
            let back = Network::from_checkpoint_json(&bytes).unwrap();
            assert_eq!(back, net);
            assert_eq!(back.to_checkpoint_json().unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_foreign_or_corrupt_files() {
        let net = build_mlp(&[3, 2], Activation::Relu, 0).unwrap();
        let text = String::from_utf8(net.to_checkpoint_json().unwrap()).unwrap();
        let wrong_version = text.replace("\"version\":1", "\"version\":9");
        assert!(Network::from_checkpoint_json(wrong_version.as_bytes()).is_err());
        let wrong_format = text.replace(CHECKPOINT_FORMAT, "something-else");
        assert!(Network::from_checkpoint_json(wrong_format.as_bytes()).is_err());
        let bad_shape = text.replace("\"shape\":[2,3]", "\"shape\":[3,3]");
        assert!(Network::from_checkpoint_json(bad_shape.as_bytes()).is_err());
    }

    #[test]
    fn save_and_load_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.json");
        let net = build_mlp(&[4, 3, 2], Activation::Sigmoid, 2).unwrap();
        net.save_checkpoint(&path).unwrap();
        assert_eq!(Network::load_checkpoint(&path).unwrap(), net);
        let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }
}
