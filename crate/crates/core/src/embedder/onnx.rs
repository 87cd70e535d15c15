use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tract_onnx::prelude::*;

use super::{EmbeddingGrid, Extractor, Normalization, Pyramid, PyramidLevel, EMBEDDING_DIM, LEVELS};
use crate::error::{Error, Result};
use crate::preprocess::RawImage;

/// Sidecar describing an exported pyramid model (`manifest.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub input_size: u32,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub output_names: Vec<String>,
    pub strides: Vec<u32>,
    pub channels: usize,
    /// Hex SHA-256 of the model file.
    pub sha256: String,
    #[serde(default)]
    pub source: Option<String>,
}

impl ModelManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingAsset(path.to_path_buf()))?;
        serde_json::from_str(&text).map_err(|e| Error::ModelLoad(format!("{}: {e}", path.display())))
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

type Plan = TypedRunnableModel<TypedModel>;

/// Feature-pyramid model loaded from an ONNX file and run with tract.
///
/// The graph must take a `1x3xSxS` float input and emit three maps shaped
/// `1x256xRxR` at strides 8, 16 and 32.
pub struct OnnxExtractor {
    plan: Plan,
    path: PathBuf,
    input_size: u32,
    normalization: Normalization,
    digest: String,
}

impl std::fmt::Debug for OnnxExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OnnxExtractor")
            .field("path", &self.path)
            .field("input_size", &self.input_size)
            .finish()
    }
}

fn load_err(e: impl std::fmt::Display) -> Error {
    Error::ModelLoad(e.to_string())
}

impl OnnxExtractor {
    pub fn load(
        path: &Path,
        manifest: Option<&Path>,
        output_names: &[String],
        input_size: u32,
        normalization: Normalization,
    ) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingAsset(path.to_path_buf()));
        }
        let digest = file_sha256(path)?;
        let (mut input_size, mut normalization, mut output_names) =
            (input_size, normalization, output_names.to_vec());
        if let Some(mpath) = manifest {
            let m = ModelManifest::load(mpath)?;
            if !m.sha256.eq_ignore_ascii_case(&digest) {
                return Err(Error::ModelLoad(format!(
                    "checksum mismatch for {}: manifest {}, file {digest}",
                    path.display(),
                    m.sha256
                )));
            }
            if m.strides != [8, 16, 32] || m.channels != EMBEDDING_DIM {
                return Err(Error::ShapeMismatch(format!(
                    "manifest declares strides {:?} with {} channels",
                    m.strides, m.channels
                )));
            }
            input_size = m.input_size;
            normalization = m.normalization;
            if !m.output_names.is_empty() {
                output_names = m.output_names;
            }
        }

        let s = input_size as usize;
        let mut model = tract_onnx::onnx()
            .model_for_path(path)
            .map_err(load_err)?
            .with_input_fact(0, f32::fact([1, 3, s, s]).into())
            .map_err(load_err)?;
        if !output_names.is_empty() {
            model = model.with_output_names(&output_names).map_err(load_err)?;
        }
        let plan = model
            .into_optimized()
            .map_err(load_err)?
            .into_runnable()
            .map_err(load_err)?;
        Ok(Self {
            plan,
            path: path.to_path_buf(),
            input_size,
            normalization,
            digest,
        })
    }

    fn input_tensor(&self, image: &RawImage) -> Tensor {
        let s = self.input_size as usize;
        let n = &self.normalization;
        tract_ndarray::Array4::from_shape_fn((1, 3, s, s), |(_, c, y, x)| {
            let p = image.get_pixel(x as u32, y as u32)[c] as f32 / 255.0;
            (p - n.mean[c]) / n.scale[c]
        })
        .into_tensor()
    }
}

impl Extractor for OnnxExtractor {
    fn input_size(&self) -> u32 {
        self.input_size
    }

    fn extract(&self, image: &RawImage) -> Result<Pyramid> {
        if image.dimensions() != (self.input_size, self.input_size) {
            return Err(Error::ShapeMismatch(format!(
                "tile is {}x{}, model expects {2}x{2}",
                image.width(),
                image.height(),
                self.input_size
            )));
        }
        let outputs = self
            .plan
            .run(tvec!(self.input_tensor(image).into()))
            .map_err(|e| Error::ModelLoad(format!("inference failed: {e}")))?;
        if outputs.len() != LEVELS.len() {
            return Err(Error::ShapeMismatch(format!(
                "model has {} outputs, expected {}",
                outputs.len(),
                LEVELS.len()
            )));
        }
        let grids = PyramidLevel::all(self.input_size)
            .into_iter()
            .zip(outputs.iter())
            .map(|(level, out)| {
                let r = level.resolution as usize;
                let view = out
                    .to_array_view::<f32>()
                    .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
                if view.shape() != [1, EMBEDDING_DIM, r, r] {
                    return Err(Error::ShapeMismatch(format!(
                        "P{} output shape {:?}, expected [1, {EMBEDDING_DIM}, {r}, {r}]",
                        level.k,
                        view.shape()
                    )));
                }
                let mut data = Vec::with_capacity(r * r * EMBEDDING_DIM);
                for i in 0..r {
                    for j in 0..r {
                        for c in 0..EMBEDDING_DIM {
                            data.push(view[[0, c, i, j]]);
                        }
                    }
                }
                EmbeddingGrid::new(level, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Pyramid { grids })
    }

    fn describe(&self) -> String {
        format!("onnx(sha256={},size={})", self.digest, self.input_size)
    }
}
