//! Page and query preparation: binarization, background removal, canvas
//! placement and tiling of oversized pages into fixed-size network inputs.

mod background;
mod binarize;
mod canvas;
mod texture;

use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use background::{remove_background, CropRegion, DEFAULT_STOP_RATIO};
pub use binarize::{binarize, BinaryMask};
pub use canvas::{divide_page, place_on_canvas, prepare_query, tile_page};
pub use texture::synthetic_parchment;

use crate::error::{Error, Result};

/// RGB, 8 bits per channel, row-major.
pub type RawImage = RgbImage;

pub const DEFAULT_CANVAS_SIZE: u32 = 1000;

#[derive(Debug, Clone)]
pub enum CanvasFill {
    Black,
    /// Background texture, center-cropped (or tiled when smaller) to the canvas.
    Texture(Arc<RgbImage>),
}

#[derive(Debug, Clone)]
pub struct CanvasSpec {
    pub size: u32,
    pub fill: CanvasFill,
}

impl CanvasSpec {
    pub fn black(size: u32) -> Self {
        Self {
            size,
            fill: CanvasFill::Black,
        }
    }

    pub fn texture(size: u32, texture: Arc<RgbImage>) -> Self {
        Self {
            size,
            fill: CanvasFill::Texture(texture),
        }
    }
}

impl Default for CanvasSpec {
    fn default() -> Self {
        Self::black(DEFAULT_CANVAS_SIZE)
    }
}

/// Offsets that place a tile pixel back onto the original page.
///
/// A point `q` in tile coordinates maps to `q + tile_offset - canvas_offset +
/// crop_offset` in the original page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TileGeometry {
    /// Top-left of the tile in the padded/canvas frame.
    pub tile_offset: (u32, u32),
    /// Top-left of the cropped page inside the padded/canvas frame.
    pub canvas_offset: (u32, u32),
    /// Origin of the crop region in the original page.
    pub crop_offset: (u32, u32),
    /// Size of the cropped page pasted into the padded frame.
    pub content_size: (u32, u32),
}

impl TileGeometry {
    /// Whether a padded-frame point falls on pasted page content (not fill).
    pub fn on_content(&self, px: i64, py: i64) -> bool {
        let (vx, vy) = (self.canvas_offset.0 as i64, self.canvas_offset.1 as i64);
        px >= vx
            && py >= vy
            && px < vx + self.content_size.0 as i64
            && py < vy + self.content_size.1 as i64
    }
}

#[derive(Debug, Clone)]
pub struct Tile {
    pub image: RawImage,
    pub geometry: TileGeometry,
}

pub fn load_image(path: &Path) -> Result<RawImage> {
    if !path.exists() {
        return Err(Error::MissingAsset(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::InvalidInput(format!("{} is empty", path.display())));
    }
    Ok(img)
}

/// Copies the crop region out of `image`.
pub fn crop(image: &RawImage, region: &CropRegion) -> RawImage {
    image::imageops::crop_imm(image, region.x0, region.y0, region.width, region.height).to_image()
}
