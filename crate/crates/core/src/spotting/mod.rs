//! Online stage: embed a query, search its level, map hits back to the
//! original pages and emit query-sized boxes.

mod output;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use output::{read_run, write_run, DetectionLine, PageLine, RunLine, RunResults};

use crate::embedder::{query_embedding, Extractor, PyramidLevel, DEFAULT_K0};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::index::{search, Index, Measure};
use crate::preprocess::{prepare_query, CanvasSpec, RawImage, TileGeometry};

/// Offsets composing tile coordinates into original-page coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CoordinateChain {
    pub crop_offset: (i64, i64),
    pub canvas_offset: (i64, i64),
    pub tile_offset: (i64, i64),
}

impl From<&TileGeometry> for CoordinateChain {
    fn from(g: &TileGeometry) -> Self {
        let c = |p: (u32, u32)| (p.0 as i64, p.1 as i64);
        Self {
            crop_offset: c(g.crop_offset),
            canvas_offset: c(g.canvas_offset),
            tile_offset: c(g.tile_offset),
        }
    }
}

impl CoordinateChain {
    fn shift(&self) -> (i64, i64) {
        (
            self.tile_offset.0 - self.canvas_offset.0 + self.crop_offset.0,
            self.tile_offset.1 - self.canvas_offset.1 + self.crop_offset.1,
        )
    }

    /// Inverse of [`translate_to_page`].
    pub fn to_tile(&self, p: (i64, i64)) -> (i64, i64) {
        let (dx, dy) = self.shift();
        (p.0 - dx, p.1 - dy)
    }
}

/// `X = x + tx - vx + cx`, `Y = y + ty - vy + cy`.
pub fn translate_to_page(p: (i64, i64), chain: &CoordinateChain) -> (i64, i64) {
    let (dx, dy) = chain.shift();
    (p.0 + dx, p.1 + dy)
}

/// Query-sized box centered on `center`.
pub fn localize(center: (i64, i64), qw: u32, qh: u32) -> BBox {
    BBox::new(
        center.0 - (qw / 2) as i64,
        center.1 - (qh / 2) as i64,
        qw as i64,
        qh as i64,
    )
}

/// Grid cell a detection came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub level_k: u8,
    pub tile: u16,
    pub cell: (u16, u16),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub page_id: String,
    pub page: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    /// 1-based position in the final list; 0 before ranking.
    pub rank: usize,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageHit {
    pub page_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Drops boxes not fully inside their page, then runs greedy per-page NMS
/// (a box is suppressed when its IoU with an already kept box on the same page
/// exceeds `nms_iou`). Output is ranked by descending score, ties keeping the
/// input order.
pub fn postprocess(
    mut detections: Vec<Detection>,
    page_dims: impl Fn(u32) -> Option<(u32, u32)>,
    nms_iou: f64,
) -> Vec<Detection> {
    detections.retain(|d| page_dims(d.page).is_some_and(|(w, h)| d.bbox.contained_in(w, h)));
    detections.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept_boxes: HashMap<u32, Vec<BBox>> = HashMap::new();
    let mut kept = Vec::with_capacity(detections.len());
    for d in detections {
        let boxes = kept_boxes.entry(d.page).or_default();
        if boxes.iter().any(|b| b.iou(&d.bbox) > nms_iou) {
            continue;
        }
        boxes.push(d.bbox);
        kept.push(d);
    }
    for (n, d) in kept.iter_mut().enumerate() {
        d.rank = n + 1;
    }
    kept
}

/// Best detection score per page, each page once, best first.
pub fn page_hits(detections: &[Detection]) -> Vec<PageHit> {
    let mut best: Vec<PageHit> = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for d in detections {
        match seen.get(d.page_id.as_str()) {
            Some(&slot) => {
                if d.score > best[slot].score {
                    best[slot].score = d.score;
                }
            }
            None => {
                seen.insert(&d.page_id, best.len());
                best.push(PageHit {
                    page_id: d.page_id.clone(),
                    score: d.score,
                    rank: 0,
                });
            }
        }
    }
    // Stable: equal scores keep first-appearance order.
    best.sort_by(|a, b| b.score.total_cmp(&a.score));
    for (n, p) in best.iter_mut().enumerate() {
        p.rank = n + 1;
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpotParams {
    pub measure: Measure,
    /// Final detection list length.
    pub top_n: usize,
    /// Raw hits fetched per final detection before postprocessing.
    pub candidate_factor: usize,
    pub nms_iou: f64,
    pub k0: i32,
}

impl Default for SpotParams {
    fn default() -> Self {
        Self {
            measure: Measure::Dot,
            top_n: 1000,
            candidate_factor: 5,
            nms_iou: 0.5,
            k0: DEFAULT_K0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpotResult {
    pub query_id: String,
    pub level_k: u8,
    pub query_size: (u32, u32),
    pub detections: Vec<Detection>,
    pub pages: Vec<PageHit>,
    pub elapsed: Duration,
}

/// Read-only resources a query runs against.
pub struct SpotContext<'a> {
    pub extractor: &'a dyn Extractor,
    pub index: &'a Index,
    pub query_canvas: &'a CanvasSpec,
    pub params: &'a SpotParams,
}

pub fn spot(query_id: &str, query: &RawImage, ctx: &SpotContext<'_>) -> Result<SpotResult> {
    let started = Instant::now();
    let params = ctx.params;
    if params.top_n == 0 {
        return Err(Error::InvalidInput("result list length must be at least 1".into()));
    }
    let canvas = ctx.index.catalog.canvas_size;
    if ctx.extractor.input_size() != canvas || ctx.query_canvas.size != canvas {
        return Err(Error::ShapeMismatch(format!(
            "index built for {canvas} px tiles, extractor takes {} px, query canvas is {} px",
            ctx.extractor.input_size(),
            ctx.query_canvas.size
        )));
    }
    let (qw, qh) = query.dimensions();
    let tile = prepare_query(query, ctx.query_canvas)?;
    let embedding = query_embedding(&tile, ctx.extractor, qw, qh, params.k0)?;
    let level: PyramidLevel = embedding.level;
    let shard = ctx.index.shard(level.k).ok_or(Error::LevelMismatch {
        expected: level.k,
        found: 0,
    })?;

    let pool = params.top_n.saturating_mul(params.candidate_factor.max(1));
    let hits = search(shard, &embedding.vector, pool, params.measure)?;
    let catalog = &ctx.index.catalog;
    let mut raw = Vec::with_capacity(hits.len());
    for hit in hits {
        let m = hit.meta;
        let page = catalog
            .page(m.page)
            .ok_or_else(|| Error::CorruptIndex(format!("unknown page {}", m.page)))?;
        let geometry = page
            .tiles
            .get(m.tile as usize)
            .ok_or_else(|| Error::CorruptIndex(format!("unknown tile {} of {}", m.tile, page.page_id)))?;
        let center = level.rf_center(m.i as usize, m.j as usize)?;
        let page_center = translate_to_page(center, &CoordinateChain::from(geometry));
        raw.push(Detection {
            page_id: page.page_id.clone(),
            page: m.page,
            bbox: localize(page_center, qw, qh),
            score: hit.score,
            rank: 0,
            origin: Origin {
                level_k: level.k,
                tile: m.tile,
                cell: (m.i, m.j),
            },
        });
    }
    let mut detections = postprocess(
        raw,
        |p| catalog.page(p).map(|e| (e.width, e.height)),
        params.nms_iou,
    );
    detections.truncate(params.top_n);
    let pages = page_hits(&detections);
    Ok(SpotResult {
        query_id: query_id.to_string(),
        level_k: level.k,
        query_size: (qw, qh),
        detections,
        pages,
        elapsed: started.elapsed(),
    })
}
