//! Named parameter tensors: random initialization and the on-disk format.
//!
//! A weights file is a JSON manifest plus a raw blob of little-endian `f32`
//! values next to it (`model.json` + `model.bin`). The manifest lists every
//! tensor's name, shape and float offset in the order the blob stores them.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, WeightRng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/√fan_in`.
    Uniform {
        fan_in: usize,
    },
    Ones,
    Zeros,
}

/// Supplies tensors by name while a model is being assembled.
pub trait ParamSource {
    fn take(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<Matrix>;
}

/// Draws every tensor from a seeded generator, in request order.
pub struct RandomInit {
    rng: WeightRng,
}

impl RandomInit {
    pub fn new(seed: u64) -> Self {
        RandomInit {
            rng: WeightRng::new(seed),
        }
    }
}

impl ParamSource for RandomInit {
    fn take(&mut self, _name: &str, rows: usize, cols: usize, init: Init) -> Result<Matrix> {
        Ok(match init {
            Init::Uniform { fan_in } => self.rng.matrix(rows, cols, fan_in),
            Init::Ones => Matrix::from_vec(rows, cols, vec![1.0; rows * cols])?,
            Init::Zeros => Matrix::zeros(rows, cols),
        })
    }
}

/// Tensors loaded from a file, consumed by name with shape checks.
pub struct NamedTensors {
    map: HashMap<String, Matrix>,
}

impl NamedTensors {
    pub fn new(tensors: Vec<(String, Matrix)>) -> Self {
        NamedTensors {
            map: tensors.into_iter().collect(),
        }
    }

    /// Fails if any tensor was never requested.
    pub fn finish(self) -> Result<()> {
        if let Some(name) = self.map.keys().min() {
            return Err(Error::Malformed(format!("unexpected tensor `{name}`")));
        }
        Ok(())
    }
}

impl ParamSource for NamedTensors {
    fn take(&mut self, name: &str, rows: usize, cols: usize, _init: Init) -> Result<Matrix> {
        let m = self
            .map
            .remove(name)
            .ok_or_else(|| Error::Malformed(format!("missing tensor `{name}`")))?;
        if m.shape() != (rows, cols) {
            return Err(Error::Malformed(format!(
                "tensor `{name}` is {:?}, expected {:?}",
                m.shape(),
                (rows, cols)
            )));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset into the blob, in `f32` elements.
    pub offset: usize,
}

pub const WEIGHTS_FORMAT: &str = "cachestream-weights";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightsManifest<C> {
    pub format: String,
    pub version: u32,
    pub config: C,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes manifest and blob; output is a pure function of the inputs.
pub fn write_weights<C: Serialize>(
    manifest_path: &Path,
    config: &C,
    tensors: &[(String, &Matrix)],
) -> Result<()> {
    let blob = blob_path(manifest_path);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut bytes = Vec::new();
    let mut offset = 0;
    for (name, m) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
            offset,
        });
        offset += m.as_slice().len();
        for v in m.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = WeightsManifest {
        format: WEIGHTS_FORMAT.to_string(),
        version: WEIGHTS_VERSION,
        config,
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors: entries,
    };
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Malformed(e.to_string()))?;
    std::fs::write(manifest_path, text + "\n").map_err(|e| Error::file(manifest_path, e))?;
    std::fs::write(&blob, bytes).map_err(|e| Error::file(&blob, e))
}

pub fn read_weights<C: for<'de> Deserialize<'de>>(
    manifest_path: &Path,
) -> Result<(C, Vec<(String, Matrix)>)> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::file(manifest_path, e))?;
    let manifest: WeightsManifest<C> = serde_json::from_str(&text).map_err(|e| {
        // config validation problems surface here as serde messages
        Error::Malformed(format!("{}: {e}", manifest_path.display()))
    })?;
    if manifest.format != WEIGHTS_FORMAT || manifest.version != WEIGHTS_VERSION {
        return Err(Error::Malformed(format!(
            "unsupported weights format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let blob = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.blob);
    let bytes = std::fs::read(&blob).map_err(|e| Error::file(&blob, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Malformed(format!(
            "{} length is not a multiple of 4",
            blob.display()
        )));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n = e.shape[0] * e.shape[1];
        let data = floats
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Malformed(format!("tensor `{}` overruns the blob", e.name)))?;
        tensors.push((
            e.name,
            Matrix::from_vec(e.shape[0], e.shape[1], data.to_vec())?,
        ));
    }
    Ok((manifest.config, tensors))
}
