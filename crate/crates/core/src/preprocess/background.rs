use serde::{Deserialize, Serialize};

use super::BinaryMask;
use crate::error::{Error, Result};

pub const DEFAULT_STOP_RATIO: f64 = 0.95;

/// Rectangle `[x0, x0+width) x [y0, y0+height)` inside a page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRegion {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
}

impl CropRegion {
    pub fn full(width: u32, height: u32) -> Self {
        Self {
            x0: 0,
            y0: 0,
            width,
            height,
        }
    }
}

#[derive(Clone, Copy)]
enum Side {
    Top,
    Bottom,
    Left,
    Right,
}

/// Grows a rectangle from the center pixel of the mask until every side meets
/// mostly-background border.
///
/// Sides take turns (top, bottom, left, right) adding one row or column. A side
/// stops for good when the background fraction of its next candidate strip,
/// spanning the rectangle's current extent, exceeds `stop_ratio`, or when it
/// reaches the image border.
pub fn remove_background(mask: &BinaryMask, stop_ratio: f64) -> Result<CropRegion> {
    if !(stop_ratio > 0.0 && stop_ratio < 1.0) {
        return Err(Error::InvalidInput(format!(
            "stop ratio {stop_ratio} outside (0, 1)"
        )));
    }
    let (w, h) = (mask.width(), mask.height());
    if w == 0 || h == 0 {
        return Err(Error::InvalidInput("empty mask".into()));
    }
    // Inclusive bounds.
    let (mut x0, mut x1) = (w / 2, w / 2);
    let (mut y0, mut y1) = (h / 2, h / 2);
    let mut active = [true; 4];
    let sides = [Side::Top, Side::Bottom, Side::Left, Side::Right];

    let background_fraction = |xs: std::ops::RangeInclusive<u32>, ys: std::ops::RangeInclusive<u32>| {
        let mut total = 0usize;
        let mut bg = 0usize;
        for y in ys {
            for x in xs.clone() {
                total += 1;
                if !mask.is_foreground(x, y) {
                    bg += 1;
                }
            }
        }
        bg as f64 / total as f64
    };

    while active.iter().any(|&a| a) {
        for (slot, side) in sides.iter().enumerate() {
            if !active[slot] {
                continue;
            }
            let grow = match side {
                Side::Top => y0 > 0 && background_fraction(x0..=x1, y0 - 1..=y0 - 1) <= stop_ratio,
                Side::Bottom => {
                    y1 + 1 < h && background_fraction(x0..=x1, y1 + 1..=y1 + 1) <= stop_ratio
                }
                Side::Left => x0 > 0 && background_fraction(x0 - 1..=x0 - 1, y0..=y1) <= stop_ratio,
                Side::Right => {
                    x1 + 1 < w && background_fraction(x1 + 1..=x1 + 1, y0..=y1) <= stop_ratio
                }
            };
            if !grow {
                active[slot] = false;
                continue;
            }
            match side {
                Side::Top => y0 -= 1,
                Side::Bottom => y1 += 1,
                Side::Left => x0 -= 1,
                Side::Right => x1 += 1,
            }
        }
    }

    Ok(CropRegion {
        x0,
        y0,
        width: x1 - x0 + 1,
        height: y1 - y0 + 1,
    })
}
