//! Synthetic page collections with planted query instances, for smoke tests
//! and demos.
//!
//! Pages are white with a striped "text block"; graphics are random grids of
//! 8 px gray blocks. One of them is the query, planted pixel-exactly on some
//! pages at offsets aligned with the finest pyramid level's receptive-field
//! centers. Every graphic is recorded as a region annotation.

use std::io::Write;
use std::path::Path;

use image::Rgb;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::evalkit::{GroundTruthEntry, Instance};
use crate::geometry::BBox;
use crate::preprocess::RawImage;
use crate::regionfilter::RoiAnnotation;

const BLOCK: u32 = 8;
const WHITE: u8 = 255;
const TEXT_DARK: u8 = 30;
const TEXT_LIGHT: u8 = 110;
/// Gray levels graphics are drawn from.
const PALETTE: [u8; 8] = [0, 36, 72, 108, 144, 180, 216, 252];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub pages: usize,
    pub page_size: u32,
    /// Text block as a page-coordinate box; kept free of graphics around its center.
    pub text_block: BBox,
    pub query_side: u32,
    pub planted_pages: usize,
    pub max_instances: usize,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            pages: 20,
            page_size: 1000,
            text_block: BBox::new(150, 100, 700, 800),
            query_side: 64,
            planted_pages: 5,
            max_instances: 3,
            distractors: 6,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCollection {
    pub pages: Vec<(String, RawImage)>,
    pub query_id: String,
    pub query: RawImage,
    pub planted: Vec<Instance>,
    pub annotations: Vec<RoiAnnotation>,
}

fn random_graphic(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RawImage {
    let (bw, bh) = (w.div_ceil(BLOCK), h.div_ceil(BLOCK));
    let levels: Vec<u8> = (0..bw * bh).map(|_| PALETTE[rng.gen_range(0..PALETTE.len())]).collect();
    RawImage::from_fn(w, h, |x, y| {
        let v = levels[((y / BLOCK) * bw + x / BLOCK) as usize];
        Rgb([v, v, v])
    })
}

fn blank_page(p: &SynthParams) -> RawImage {
    let b = p.text_block;
    RawImage::from_fn(p.page_size, p.page_size, |x, y| {
        let (x, y) = (x as i64, y as i64);
        if b.contains_point(x, y) {
            let v = if (y - b.y) % 16 < 10 { TEXT_DARK } else { TEXT_LIGHT };
            Rgb([v, v, v])
        } else {
            Rgb([WHITE; 3])
        }
    })
}

fn paste(page: &mut RawImage, graphic: &RawImage, x0: i64, y0: i64) {
    for (x, y, px) in graphic.enumerate_pixels() {
        page.put_pixel(x0 as u32 + x, y0 as u32 + y, *px);
    }
}

/// Smallest `v' >= v` with `v' = 4 (mod 8)`.
fn lattice(v: i64) -> i64 {
    v + (4 - v).rem_euclid(8)
}

/// Picks a free spot for a `w x h` box inside the text block: top-left on the
/// `8k + 4` lattice, clear of `taken` (with a margin) and of the block center.
fn place(rng: &mut ChaCha8Rng, p: &SynthParams, taken: &[BBox], w: i64, h: i64) -> Option<BBox> {
    let b = p.text_block;
    let margin = 16;
    let cx = b.x + b.w / 2;
    let cy = b.y + b.h / 2;
    let center = BBox::new(cx - 80, cy - 80, 160, 160);
    for _ in 0..1000 {
        let x = lattice(b.x + margin) + 8 * rng.gen_range(0..=((b.right() - margin - w - lattice(b.x + margin)) / 8));
        let y = lattice(b.y + margin) + 8 * rng.gen_range(0..=((b.bottom() - margin - h - lattice(b.y + margin)) / 8));
        let cand = BBox::new(x, y, w, h);
        let padded = BBox::new(x - margin, y - margin, w + 2 * margin, h + 2 * margin);
        if padded.intersection_area(&center) == 0 && taken.iter().all(|t| padded.intersection_area(t) == 0) {
            return Some(cand);
        }
    }
    None
}

pub fn generate(p: &SynthParams) -> SynthCollection {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let side = p.query_side;
    let query = loop {
        let q = random_graphic(&mut rng, side, side);
        // The central 4x4 blocks are what the finest level sees; keep them varied.
        let c = side / 2;
        let first = q.get_pixel(c - 16, c - 16)[0];
        if (0..4).any(|by| (0..4).any(|bx| q.get_pixel(c - 16 + bx * BLOCK, c - 16 + by * BLOCK)[0] != first)) {
            break q;
        }
    };
    let planted_on: Vec<usize> = {
        let mut v = sample(&mut rng, p.pages, p.planted_pages.min(p.pages)).into_vec();
        v.sort_unstable();
        v
    };

    let mut pages = Vec::with_capacity(p.pages);
    let mut planted = Vec::new();
    let mut annotations = Vec::new();
    for n in 0..p.pages {
        let page_id = format!("page_{n:03}");
        let mut page = blank_page(p);
        let mut boxes: Vec<BBox> = Vec::new();
        if planted_on.contains(&n) {
            let count = rng.gen_range(1..=p.max_instances.max(1));
            for _ in 0..count {
                if let Some(b) = place(&mut rng, p, &boxes, side as i64, side as i64) {
                    paste(&mut page, &query, b.x, b.y);
                    planted.push(Instance {
                        page_id: page_id.clone(),
                        bbox: b,
                    });
                    boxes.push(b);
                }
            }
        }
        for _ in 0..p.distractors {
            let w = BLOCK as i64 * rng.gen_range(5..=20);
            let h = BLOCK as i64 * rng.gen_range(5..=20);
            if let Some(b) = place(&mut rng, p, &boxes, w, h) {
                paste(&mut page, &random_graphic(&mut rng, w as u32, h as u32), b.x, b.y);
                boxes.push(b);
            }
        }
        annotations.push(RoiAnnotation {
            page_id: page_id.clone(),
            boxes,
        });
        pages.push((page_id, page));
    }
    SynthCollection {
        pages,
        query_id: "q0".into(),
        query,
        planted,
        annotations,
    }
}

impl SynthCollection {
    pub fn ground_truth(&self) -> GroundTruthEntry {
        GroundTruthEntry {
            query_id: self.query_id.clone(),
            category: "synthetic".into(),
            instances: self.planted.clone(),
            query_size: Some([self.query.width(), self.query.height()]),
        }
    }

    pub fn planted_pages(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.planted.iter().map(|i| i.page_id.as_str()).collect();
        v.dedup();
        v
    }

    /// Writes `pages/*.png`, `queries/<id>.png`, `ground_truth.jsonl`,
    /// `annotations.jsonl` and a matching `pspot.toml`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        let pages_dir = dir.join("pages");
        let query_dir = dir.join("queries");
        std::fs::create_dir_all(&pages_dir)?;
        std::fs::create_dir_all(&query_dir)?;
        for (id, page) in &self.pages {
            page.save(pages_dir.join(format!("{id}.png")))?;
        }
        self.query.save(query_dir.join(format!("{}.png", self.query_id)))?;

        let mut gt = std::fs::File::create(dir.join("ground_truth.jsonl"))?;
        serde_json::to_writer(&mut gt, &self.ground_truth())?;
        gt.write_all(b"\n")?;
        let mut ann = std::fs::File::create(dir.join("annotations.jsonl"))?;
        for a in &self.annotations {
            serde_json::to_writer(&mut ann, a)?;
            ann.write_all(b"\n")?;
        }
        std::fs::write(
            dir.join("pspot.toml"),
            "[dataset]\npages_dir = \"pages\"\nannotations = \"annotations.jsonl\"\n\n\
             [search]\nmeasure = \"cosine\"\ntop_n = 100\n\n\
             [filter]\nmodel_dir = \"models\"\nsamples_per_tile = 3000\n\n\
             [filter.forest]\nn_trees = 10\n\n\
             [output]\nindex_dir = \"index\"\n",
        )?;
        Ok(())
    }
}
