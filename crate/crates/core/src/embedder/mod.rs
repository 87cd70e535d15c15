//! Region embeddings: the three-level pyramid for page tiles, the single
//! center-cell embedding for queries, and the receptive-field geometry tying
//! grid cells to pixels.

mod onnx;
mod reference;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use onnx::{ModelManifest, OnnxExtractor};
pub use reference::ReferenceExtractor;

use crate::error::{Error, Result};
use crate::preprocess::{RawImage, Tile};

pub const EMBEDDING_DIM: usize = 256;
pub const LEVELS: [u8; 3] = [3, 4, 5];
pub const DEFAULT_K0: i32 = 4;
/// Query side length that maps to level `k0`.
pub const CANONICAL_QUERY_SIDE: u64 = 224;

/// One pyramid level: stride `2^k` and `ceil(input_size / stride)` cells per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PyramidLevel {
    pub k: u8,
    pub stride: u32,
    pub resolution: u32,
}

impl PyramidLevel {
    pub fn new(k: u8, input_size: u32) -> Result<Self> {
        if !LEVELS.contains(&k) {
            return Err(Error::InvalidInput(format!("pyramid level P{k} is not extracted")));
        }
        let stride = 1u32 << k;
        Ok(Self {
            k,
            stride,
            resolution: input_size.div_ceil(stride),
        })
    }

    pub fn all(input_size: u32) -> [PyramidLevel; 3] {
        LEVELS.map(|k| PyramidLevel::new(k, input_size).expect("static level"))
    }

    /// Receptive-field center of cell `(i, j)` (row, column) in tile pixels:
    /// `(stride * (j + 1/2), stride * (i + 1/2))`.
    pub fn rf_center(&self, i: usize, j: usize) -> Result<(i64, i64)> {
        let r = self.resolution as usize;
        if i >= r || j >= r {
            return Err(Error::IndexOutOfRange {
                i,
                j,
                resolution: r,
            });
        }
        let s = self.stride as i64;
        Ok((s * j as i64 + s / 2, s * i as i64 + s / 2))
    }

    /// The cell whose receptive field is centered on a canvas-centered query.
    pub fn center_cell(&self) -> (usize, usize) {
        let c = (self.resolution / 2) as usize;
        (c, c)
    }

    pub fn cell_count(&self) -> usize {
        (self.resolution * self.resolution) as usize
    }
}

/// Unclamped level `floor(k0 + log2(sqrt(w*h) / 224))`, evaluated in floating point.
pub fn raw_level(w: u32, h: u32, k0: i32) -> i32 {
    let side = ((w as f64) * (h as f64)).sqrt();
    (k0 as f64 + (side / CANONICAL_QUERY_SIDE as f64).log2()).floor() as i32
}

/// Pyramid level for a `w x h` query, clamped to the extracted levels.
///
/// Evaluated exactly in integers: level `t` applies when
/// `w*h >= 224^2 * 4^(t - k0)`.
pub fn assign_level(w: u32, h: u32, k0: i32) -> u8 {
    let area = w.max(1) as u128 * h.max(1) as u128;
    let base = (CANONICAL_QUERY_SIDE * CANONICAL_QUERY_SIDE) as u128;
    let reaches = |t: i32| -> bool {
        let e = t - k0;
        if e >= 0 {
            match 4u128.checked_pow(e as u32).and_then(|p| p.checked_mul(base)) {
                Some(threshold) => area >= threshold,
                None => false,
            }
        } else {
            match 4u128.checked_pow((-e) as u32).and_then(|p| p.checked_mul(area)) {
                Some(scaled) => scaled >= base,
                None => true,
            }
        }
    };
    LEVELS
        .iter()
        .rev()
        .copied()
        .find(|&t| reaches(t as i32))
        .unwrap_or(LEVELS[0])
}

/// Row-major `resolution x resolution` grid of embedding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrid {
    pub level: PyramidLevel,
    data: Vec<f32>,
}

impl EmbeddingGrid {
    pub fn new(level: PyramidLevel, data: Vec<f32>) -> Result<Self> {
        let expected = level.cell_count() * EMBEDDING_DIM;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "P{} grid holds {} values, expected {expected}",
                level.k,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("P{} grid has non-finite values", level.k)));
        }
        Ok(Self { level, data })
    }

    pub fn resolution(&self) -> usize {
        self.level.resolution as usize
    }

    pub fn vector(&self, i: usize, j: usize) -> &[f32] {
        let start = (i * self.resolution() + j) * EMBEDDING_DIM;
        &self.data[start..start + EMBEDDING_DIM]
    }

    /// `(i, j, vector)` for every cell in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, &[f32])> {
        let r = self.resolution();
        self.data
            .chunks_exact(EMBEDDING_DIM)
            .enumerate()
            .map(move |(n, v)| (n / r, n % r, v))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub grids: Vec<EmbeddingGrid>,
}

impl Pyramid {
    pub fn level(&self, k: u8) -> Option<&EmbeddingGrid> {
        self.grids.iter().find(|g| g.level.k == k)
    }
}

/// Anything that turns a square tile into a P3/P4/P5 embedding pyramid.
pub trait Extractor: Send + Sync {
    fn input_size(&self) -> u32;

    fn extract(&self, image: &RawImage) -> Result<Pyramid>;

    /// Embedding of a single cell. Extractors that can compute one cell
    /// cheaply override this.
    fn extract_cell(&self, image: &RawImage, level: PyramidLevel, i: usize, j: usize) -> Result<Vec<f32>> {
        let pyramid = self.extract(image)?;
        let grid = pyramid
            .level(level.k)
            .ok_or(Error::LevelMismatch {
                expected: level.k,
                found: 0,
            })?;
        level.rf_center(i, j)?;
        Ok(grid.vector(i, j).to_vec())
    }

    /// Short identity string recorded in index catalogs.
    fn describe(&self) -> String;
}

fn check_tile(image: &RawImage, input_size: u32) -> Result<()> {
    if image.dimensions() != (input_size, input_size) {
        return Err(Error::ShapeMismatch(format!(
            "tile is {}x{}, extractor expects {input_size}x{input_size}",
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

pub fn extract_pyramid(tile: &Tile, extractor: &dyn Extractor) -> Result<Pyramid> {
    check_tile(&tile.image, extractor.input_size())?;
    extractor.extract(&tile.image)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    pub level: PyramidLevel,
    pub cell: (usize, usize),
    pub vector: Vec<f32>,
    pub query_w: u32,
    pub query_h: u32,
}

/// Embeds a canvas-centered query: the center cell of its assigned level.
pub fn query_embedding(
    query_tile: &Tile,
    extractor: &dyn Extractor,
    w: u32,
    h: u32,
    k0: i32,
) -> Result<QueryEmbedding> {
    check_tile(&query_tile.image, extractor.input_size())?;
    let level = PyramidLevel::new(assign_level(w, h, k0), extractor.input_size())?;
    let (i, j) = level.center_cell();
    let vector = extractor.extract_cell(&query_tile.image, level, i, j)?;
    Ok(QueryEmbedding {
        level,
        cell: (i, j),
        vector,
        query_w: w,
        query_h: h,
    })
}

/// Per-channel input normalization for serialized models:
/// `(pixel / 255 - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub scale: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            scale: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExtractorKind {
    Reference {
        seed: u64,
    },
    SerializedModel {
        path: PathBuf,
        /// Graph outputs for P3, P4, P5 in that order; graph order when empty.
        output_names: Vec<String>,
        manifest: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorSpec {
    pub kind: ExtractorKind,
    pub input_size: u32,
    pub normalization: Normalization,
}

impl ExtractorSpec {
    pub fn reference(seed: u64, input_size: u32) -> Self {
        Self {
            kind: ExtractorKind::Reference { seed },
            input_size,
            normalization: Normalization::default(),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Extractor>> {
        Ok(match &self.kind {
            ExtractorKind::Reference { seed } => {
                Arc::new(ReferenceExtractor::new(*seed, self.input_size)?)
            }
            ExtractorKind::SerializedModel {
                path,
                output_names,
                manifest,
            } => Arc::new(OnnxExtractor::load(
                path,
                manifest.as_deref(),
                output_names,
                self.input_size,
                self.normalization.clone(),
            )?),
        })
    }
}
