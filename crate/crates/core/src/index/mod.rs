//! Exact similarity search over retained region embeddings, one shard per
//! pyramid level.

mod catalog;
mod format;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use catalog::{load_index, save_index, Catalog, Index, PageEntry, CATALOG_FILE};
pub use format::{read_shard, shard_file_name, write_shard, FORMAT_VERSION, MAGIC, RECORD_META_BYTES};

use crate::embedder::EmbeddingGrid;
use crate::error::{Error, Result};

/// Where a vector came from: page, tile within the page, grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordMeta {
    pub page: u32,
    pub tile: u16,
    pub i: u16,
    pub j: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    #[default]
    Dot,
    Cosine,
}

impl std::str::FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Measure::Dot),
            "cosine" => Ok(Measure::Cosine),
            other => Err(Error::Config(format!("unknown search measure {other:?}"))),
        }
    }
}

/// Records of one level: metadata plus a flat `count x dim` f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexShard {
    pub level_k: u8,
    pub dim: usize,
    meta: Vec<RecordMeta>,
    vectors: Vec<f32>,
}

impl IndexShard {
    pub fn new(level_k: u8, dim: usize) -> Self {
        Self {
            level_k,
            dim,
            meta: Vec::new(),
            vectors: Vec::new(),
        }
    }

    pub fn from_parts(level_k: u8, dim: usize, meta: Vec<RecordMeta>, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 || vectors.len() != meta.len() * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} records need {} values, got {}",
                meta.len(),
                meta.len() * dim,
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite vector component".into()));
        }
        Ok(Self {
            level_k,
            dim,
            meta,
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn meta(&self, record: usize) -> RecordMeta {
        self.meta[record]
    }

    pub fn metas(&self) -> &[RecordMeta] {
        &self.meta
    }

    pub fn vector(&self, record: usize) -> &[f32] {
        &self.vectors[record * self.dim..(record + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }
}

/// Accumulates retained cells and produces a shard sorted by record key, so the
/// result does not depend on the order grids are pushed.
#[derive(Debug)]
pub struct ShardBuilder {
    level_k: u8,
    dim: usize,
    rows: Vec<(RecordMeta, Vec<f32>)>,
}

impl ShardBuilder {
    pub fn new(level_k: u8, dim: usize) -> Self {
        Self {
            level_k,
            dim,
            rows: Vec::new(),
        }
    }

    /// Adds `retained` cells of `grid` (every cell when `None`, i.e. dense mode).
    pub fn push_grid(
        &mut self,
        page: u32,
        tile: u16,
        grid: &EmbeddingGrid,
        retained: Option<&[(usize, usize)]>,
    ) -> Result<()> {
        if grid.level.k != self.level_k {
            return Err(Error::LevelMismatch {
                expected: self.level_k,
                found: grid.level.k,
            });
        }
        let mut add = |i: usize, j: usize| {
            self.rows.push((
                RecordMeta {
                    page,
                    tile,
                    i: i as u16,
                    j: j as u16,
                },
                grid.vector(i, j).to_vec(),
            ));
        };
        match retained {
            None => grid.cells().for_each(|(i, j, _)| add(i, j)),
            Some(cells) => {
                let r = grid.resolution();
                for &(i, j) in cells {
                    if i >= r || j >= r {
                        return Err(Error::IndexOutOfRange { i, j, resolution: r });
                    }
                    add(i, j);
                }
            }
        }
        Ok(())
    }

    pub fn push_record(&mut self, meta: RecordMeta, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::ShapeMismatch(format!("{}-D vector in a {}-D shard", vector.len(), self.dim)));
        }
        self.rows.push((meta, vector));
        Ok(())
    }

    pub fn finish(mut self) -> Result<IndexShard> {
        self.rows.sort_by(|a, b| a.0.cmp(&b.0));
        let mut meta = Vec::with_capacity(self.rows.len());
        let mut vectors = Vec::with_capacity(self.rows.len() * self.dim);
        for (m, v) in self.rows {
            meta.push(m);
            vectors.extend_from_slice(&v);
        }
        IndexShard::from_parts(self.level_k, self.dim, meta, vectors)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub record: usize,
    pub meta: RecordMeta,
    pub score: f64,
}

/// Ranking order: higher score first, then ascending record key, then
/// ascending record position.
fn rank_cmp(a: &SearchHit, b: &SearchHit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.meta.cmp(&b.meta))
        .then_with(|| a.record.cmp(&b.record))
}

struct Ranked(SearchHit);

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        rank_cmp(&self.0, &other.0) == Ordering::Equal
    }
}
impl Eq for Ranked {}
impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked {
    // Max-heap top is the worst-ranked hit kept so far.
    fn cmp(&self, other: &Self) -> Ordering {
        rank_cmp(&self.0, &other.0)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += *x as f64 * *y as f64;
    }
    acc
}

fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Similarity of `q` to `v`. Cosine with a zero-norm operand scores 0.
pub fn score(measure: Measure, q: &[f32], q_norm: f64, v: &[f32]) -> f64 {
    match measure {
        Measure::Dot => dot(q, v),
        Measure::Cosine => {
            let denom = q_norm * norm(v);
            if denom == 0.0 {
                0.0
            } else {
                dot(q, v) / denom
            }
        }
    }
}

const PARTITION: usize = 4096;

/// Exact top-`top_k` records by `measure`, best first.
///
/// Records are scored in parallel partitions, each keeping a bounded heap; the
/// merge is exact because the ranking order is total.
pub fn search(shard: &IndexShard, q: &[f32], top_k: usize, measure: Measure) -> Result<Vec<SearchHit>> {
    if top_k == 0 {
        return Err(Error::InvalidInput("top_k must be at least 1".into()));
    }
    if q.len() != shard.dim {
        return Err(Error::ShapeMismatch(format!("{}-D query on a {}-D shard", q.len(), shard.dim)));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("query vector is not finite".into()));
    }
    if shard.is_empty() {
        return Ok(Vec::new());
    }
    let q_norm = norm(q);
    let partial: Vec<Vec<SearchHit>> = (0..shard.len())
        .into_par_iter()
        .step_by(PARTITION)
        .map(|start| {
            let end = (start + PARTITION).min(shard.len());
            let mut heap = BinaryHeap::with_capacity(top_k.min(end - start) + 1);
            for record in start..end {
                let hit = SearchHit {
                    record,
                    meta: shard.meta(record),
                    score: score(measure, q, q_norm, shard.vector(record)),
                };
                if heap.len() < top_k {
                    heap.push(Ranked(hit));
                } else if let Some(worst) = heap.peek() {
                    if rank_cmp(&hit, &worst.0) == Ordering::Less {
                        heap.pop();
                        heap.push(Ranked(hit));
                    }
                }
            }
            heap.into_iter().map(|r| r.0).collect()
        })
        .collect();
    let mut hits: Vec<SearchHit> = partial.into_iter().flatten().collect();
    hits.sort_by(rank_cmp);
    hits.truncate(top_k);
    Ok(hits)
}
