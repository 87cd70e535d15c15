use image::Rgb;

use super::RawImage;

fn lattice(seed: u64, x: i64, y: i64) -> f64 {
    let mut z = seed
        ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * sx;
    let bottom = c + (d - c) * sx;
    top + (bottom - top) * sy
}

/// Deterministic parchment-like texture: warm base tone, blotchy low-frequency
/// staining and fine grain.
pub fn synthetic_parchment(width: u32, height: u32, seed: u64) -> RawImage {
    RawImage::from_fn(width, height, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        let stain = 0.55 * smooth_noise(seed, fx / 160.0, fy / 160.0)
            + 0.30 * smooth_noise(seed ^ 1, fx / 48.0, fy / 48.0)
            + 0.15 * smooth_noise(seed ^ 2, fx / 12.0, fy / 12.0);
        let grain = lattice(seed ^ 3, x as i64, y as i64) - 0.5;
        let shade = 0.78 + 0.22 * stain + 0.04 * grain;
        let tone = |base: f64| (base * shade).clamp(0.0, 255.0) as u8;
        Rgb([tone(236.0), tone(218.0), tone(178.0)])
    })
}
