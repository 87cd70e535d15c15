use rayon::prelude::*;

use super::{EmbeddingGrid, Extractor, Pyramid, PyramidLevel, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::preprocess::RawImage;

/// Pooled window side is this many strides.
const WINDOW_STRIDES: u32 = 4;
/// Windows are area-averaged down to `POOL x POOL` gray values.
const POOL: usize = 8;
const POOLED: usize = POOL * POOL;
/// Integer luminance weights (ITU-R BT.601, scaled by 1000).
const LUMA: [u64; 3] = [299, 587, 114];
const LUMA_MAX: f64 = 255.0 * 1000.0;

/// Value `n` of the counter-based stream for `seed`, uniform on `[-1, 1)`.
///
/// SplitMix64 finalizer applied to `seed + (n + 1) * 0x9E3779B97F4A7C15`,
/// top 53 bits scaled to `[0, 1)`, then mapped affinely to `[-1, 1)`.
pub fn counter_uniform(seed: u64, n: u64) -> f64 {
    let mut z = seed.wrapping_add(n.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    let unit = (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    2.0 * unit - 1.0
}

/// Deterministic, dependency-free stand-in for a learned feature pyramid.
///
/// Each cell looks at a `4 * stride` square window centered on its receptive
/// field center (shifted inward at the tile border), averages it down to 8x8
/// luminance values in `[0, 1]` and projects those 64 values through a fixed
/// 256x64 matrix drawn from [`counter_uniform`]. All arithmetic is f64 on
/// exact integer sums, so output is bit-identical across platforms.
#[derive(Debug, Clone)]
pub struct ReferenceExtractor {
    seed: u64,
    input_size: u32,
    projection: Vec<f64>,
}

struct Integral {
    stride: usize,
    sums: Vec<u64>,
}

impl Integral {
    fn new(image: &RawImage) -> Self {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let stride = w + 1;
        let mut sums = vec![0u64; stride * (h + 1)];
        let raw = image.as_raw();
        for y in 0..h {
            let mut row = 0u64;
            for x in 0..w {
                let p = &raw[(y * w + x) * 3..(y * w + x) * 3 + 3];
                row += LUMA[0] * p[0] as u64 + LUMA[1] * p[1] as u64 + LUMA[2] * p[2] as u64;
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { stride, sums }
    }

    fn block(&self, x0: usize, y0: usize, side: usize) -> u64 {
        let s = self.stride;
        let (x1, y1) = (x0 + side, y0 + side);
        self.sums[y1 * s + x1] + self.sums[y0 * s + x0] - self.sums[y0 * s + x1] - self.sums[y1 * s + x0]
    }
}

impl ReferenceExtractor {
    pub fn new(seed: u64, input_size: u32) -> Result<Self> {
        let largest_window = WINDOW_STRIDES << 5;
        if input_size < largest_window {
            return Err(Error::Config(format!(
                "reference extractor needs tiles of at least {largest_window} px, got {input_size}"
            )));
        }
        let projection = (0..EMBEDDING_DIM * POOLED)
            .map(|n| counter_uniform(seed, n as u64))
            .collect();
        Ok(Self {
            seed,
            input_size,
            projection,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Entry `(r, c)` of the projection matrix.
    pub fn projection(&self, r: usize, c: usize) -> f64 {
        self.projection[r * POOLED + c]
    }

    fn window_origin(&self, level: PyramidLevel, i: usize, j: usize) -> (usize, usize) {
        let side = (WINDOW_STRIDES * level.stride) as i64;
        let s = level.stride as i64;
        let max = self.input_size as i64 - side;
        let cx = s * j as i64 + s / 2;
        let cy = s * i as i64 + s / 2;
        (
            (cx - side / 2).clamp(0, max) as usize,
            (cy - side / 2).clamp(0, max) as usize,
        )
    }

    fn pooled(&self, integral: &Integral, level: PyramidLevel, i: usize, j: usize) -> [f64; POOLED] {
        let side = (WINDOW_STRIDES * level.stride) as usize;
        let block = side / POOL;
        let denom = (block * block) as f64 * LUMA_MAX;
        let (x0, y0) = self.window_origin(level, i, j);
        let mut out = [0.0; POOLED];
        for by in 0..POOL {
            for bx in 0..POOL {
                let sum = integral.block(x0 + bx * block, y0 + by * block, block);
                out[by * POOL + bx] = sum as f64 / denom;
            }
        }
        out
    }

    fn project(&self, pooled: &[f64; POOLED], out: &mut [f32]) {
        for (r, slot) in out.iter_mut().enumerate() {
            let row = &self.projection[r * POOLED..(r + 1) * POOLED];
            let mut acc = 0.0f64;
            for c in 0..POOLED {
                acc += row[c] * pooled[c];
            }
            *slot = acc as f32;
        }
    }

    fn check(&self, image: &RawImage) -> Result<()> {
        if image.dimensions() != (self.input_size, self.input_size) {
            return Err(Error::ShapeMismatch(format!(
                "tile is {}x{}, extractor expects {2}x{2}",
                image.width(),
                image.height(),
                self.input_size
            )));
        }
        Ok(())
    }
}

impl Extractor for ReferenceExtractor {
    fn input_size(&self) -> u32 {
        self.input_size
    }

    fn extract(&self, image: &RawImage) -> Result<Pyramid> {
        self.check(image)?;
        let integral = Integral::new(image);
        let grids = PyramidLevel::all(self.input_size)
            .into_iter()
            .map(|level| {
                let r = level.resolution as usize;
                let mut data = vec![0f32; r * r * EMBEDDING_DIM];
                data.par_chunks_mut(r * EMBEDDING_DIM)
                    .enumerate()
                    .for_each(|(i, row)| {
                        for (j, cell) in row.chunks_exact_mut(EMBEDDING_DIM).enumerate() {
                            let pooled = self.pooled(&integral, level, i, j);
                            self.project(&pooled, cell);
                        }
                    });
                EmbeddingGrid::new(level, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Pyramid { grids })
    }

    fn extract_cell(&self, image: &RawImage, level: PyramidLevel, i: usize, j: usize) -> Result<Vec<f32>> {
        self.check(image)?;
        level.rf_center(i, j)?;
        let side = (WINDOW_STRIDES * level.stride) as usize;
        let (x0, y0) = self.window_origin(level, i, j);
        // Integral over just the window keeps single-cell queries cheap.
        let window = image::imageops::crop_imm(image, x0 as u32, y0 as u32, side as u32, side as u32).to_image();
        let integral = Integral::new(&window);
        let block = side / POOL;
        let denom = (block * block) as f64 * LUMA_MAX;
        let mut pooled = [0.0; POOLED];
        for by in 0..POOL {
            for bx in 0..POOL {
                pooled[by * POOL + bx] = integral.block(bx * block, by * block, block) as f64 / denom;
            }
        }
        let mut out = vec![0f32; EMBEDDING_DIM];
        self.project(&pooled, &mut out);
        Ok(out)
    }

    fn describe(&self) -> String {
        format!("reference(seed={},size={})", self.seed, self.input_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_tile(size: u32, seed: u64) -> RawImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RawImage::from_fn(size, size, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
    }

    /// Direct re-derivation of one cell: explicit window copy, per-pixel
    /// luminance, block means and matrix product.
    fn oracle_cell(ex: &ReferenceExtractor, img: &RawImage, level: PyramidLevel, i: usize, j: usize) -> Vec<f32> {
        let side = 4 * level.stride as i64;
        let (cx, cy) = level.rf_center(i, j).unwrap();
        let max = img.width() as i64 - side;
        let x0 = (cx - side / 2).clamp(0, max);
        let y0 = (cy - side / 2).clamp(0, max);
        let block = side / 8;
        let mut pooled = [0f64; 64];
        for by in 0..8 {
            for bx in 0..8 {
                let mut s = 0u64;
                for y in 0..block {
                    for x in 0..block {
                        let p = img.get_pixel((x0 + bx * block + x) as u32, (y0 + by * block + y) as u32);
                        s += 299 * p[0] as u64 + 587 * p[1] as u64 + 114 * p[2] as u64;
                    }
                }
                pooled[(by * 8 + bx) as usize] = s as f64 / ((block * block) as f64 * 255_000.0);
            }
        }
        (0..256)
            .map(|r| {
                let mut acc = 0f64;
                for c in 0..64 {
                    acc += counter_uniform(ex.seed(), (r * 64 + c) as u64) * pooled[c];
                }
                acc as f32
            })
            .collect()
    }

    #[test]
    fn grid_shapes() {
        let ex = ReferenceExtractor::new(42, 1000).unwrap();
        let p = ex.extract(&noise_tile(1000, 1)).unwrap();
        let shapes: Vec<_> = p.grids.iter().map(|g| (g.resolution(), g.as_slice().len())).collect();
        assert_eq!(
            shapes,
            vec![(125, 125 * 125 * 256), (63, 63 * 63 * 256), (32, 32 * 32 * 256)]
        );
    }

    #[test]
    fn black_tile_gives_zero_vectors() {
        let ex = ReferenceExtractor::new(42, 256).unwrap();
        let p = ex.extract(&RawImage::new(256, 256)).unwrap();
        assert!(p.grids.iter().all(|g| g.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn matches_direct_oracle() {
        let ex = ReferenceExtractor::new(7, 256).unwrap();
        let img = noise_tile(256, 3);
        let p = ex.extract(&img).unwrap();
        for g in &p.grids {
            let r = g.resolution();
            for &(i, j) in &[(0, 0), (r / 2, r / 3), (r - 1, r - 1), (1, r - 2)] {
                assert_eq!(g.vector(i, j), oracle_cell(&ex, &img, g.level, i, j).as_slice());
                assert_eq!(ex.extract_cell(&img, g.level, i, j).unwrap(), g.vector(i, j));
            }
        }
    }

    #[test]
    fn deterministic_and_seeded() {
        let img = noise_tile(256, 9);
        let a = ReferenceExtractor::new(42, 256).unwrap().extract(&img).unwrap();
        let b = ReferenceExtractor::new(42, 256).unwrap().extract(&img).unwrap();
        let c = ReferenceExtractor::new(43, 256).unwrap().extract(&img).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn translation_by_one_stride_shifts_cells() {
        let ex = ReferenceExtractor::new(42, 512).unwrap();
        let img = noise_tile(512, 5);
        for level in PyramidLevel::all(512) {
            let s = level.stride;
            let shifted = RawImage::from_fn(512, 512, |x, y| {
                if x >= s && y >= s {
                    *img.get_pixel(x - s, y - s)
                } else {
                    Rgb([0, 0, 0])
                }
            });
            let a = ex.extract(&img).unwrap();
            let b = ex.extract(&shifted).unwrap();
            let (ga, gb) = (a.level(level.k).unwrap(), b.level(level.k).unwrap());
            let r = ga.resolution();
            // Interior cells: windows are unclamped in both images.
            for i in 3..r - 3 {
                for j in 3..r - 3 {
                    assert_eq!(ga.vector(i, j), gb.vector(i + 1, j + 1), "P{} ({i},{j})", level.k);
                }
            }
        }
    }

    #[test]
    fn halving_pixels_halves_vectors() {
        let ex = ReferenceExtractor::new(42, 256).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = RawImage::from_fn(256, 256, |_, _| {
            Rgb([rng.gen::<u8>() & 0xFE, rng.gen::<u8>() & 0xFE, rng.gen::<u8>() & 0xFE])
        });
        let half = RawImage::from_fn(256, 256, |x, y| {
            let p = img.get_pixel(x, y);
            Rgb([p[0] / 2, p[1] / 2, p[2] / 2])
        });
        let a = ex.extract(&img).unwrap();
        let b = ex.extract(&half).unwrap();
        for (ga, gb) in a.grids.iter().zip(&b.grids) {
            for (va, vb) in ga.as_slice().iter().zip(gb.as_slice()) {
                assert_eq!(*vb, *va * 0.5);
            }
        }
    }

    #[test]
    fn wrong_tile_size_rejected() {
        let ex = ReferenceExtractor::new(42, 1000).unwrap();
        assert!(matches!(ex.extract(&RawImage::new(999, 1000)), Err(Error::ShapeMismatch(_))));
        assert!(ReferenceExtractor::new(42, 100).is_err());
    }

    #[test]
    fn projection_entries_in_range() {
        let ex = ReferenceExtractor::new(42, 1000).unwrap();
        for r in 0..256 {
            for c in 0..64 {
                let v = ex.projection(r, c);
                assert!((-1.0..1.0).contains(&v));
            }
        }
        assert_eq!(ex.projection(3, 5), counter_uniform(42, 3 * 64 + 5));
    }
}
