use image::Rgb;

use super::{CanvasFill, CanvasSpec, RawImage, Tile, TileGeometry};
use crate::error::{Error, Result};

fn fill_pixel(fill: &CanvasFill, size: u32, x: u32, y: u32) -> Rgb<u8> {
    match fill {
        CanvasFill::Black => Rgb([0, 0, 0]),
        CanvasFill::Texture(tex) => {
            let (tw, th) = tex.dimensions();
            let ox = tw.saturating_sub(size) / 2;
            let oy = th.saturating_sub(size) / 2;
            *tex.get_pixel((x + ox) % tw, (y + oy) % th)
        }
    }
}

/// Renders one `size x size` window of the padded page frame.
///
/// The padded frame holds `page` at `canvas_offset`; everything else is fill.
fn render_window(
    page: &RawImage,
    spec: &CanvasSpec,
    tile_offset: (u32, u32),
    canvas_offset: (u32, u32),
) -> RawImage {
    let size = spec.size;
    let (pw, ph) = page.dimensions();
    RawImage::from_fn(size, size, |x, y| {
        let px = (x + tile_offset.0) as i64 - canvas_offset.0 as i64;
        let py = (y + tile_offset.1) as i64 - canvas_offset.1 as i64;
        if px >= 0 && py >= 0 && px < pw as i64 && py < ph as i64 {
            *page.get_pixel(px as u32, py as u32)
        } else {
            fill_pixel(&spec.fill, size, x, y)
        }
    })
}

/// Centers `cropped` on a `size x size` canvas and returns the canvas together
/// with the top-left of the pasted image.
pub fn place_on_canvas(cropped: &RawImage, spec: &CanvasSpec) -> Result<(RawImage, (u32, u32))> {
    let (w, h) = cropped.dimensions();
    if w > spec.size || h > spec.size {
        return Err(Error::DimensionExceeded {
            width: w,
            height: h,
            size: spec.size,
        });
    }
    let offset = ((spec.size - w) / 2, (spec.size - h) / 2);
    Ok((render_window(cropped, spec, (0, 0), offset), offset))
}

/// Window origins along one axis, plus the centering pad when the axis fits.
///
/// An axis longer than the canvas gets `ceil(extent / size)` windows whose
/// centers are equally spaced between the two flush-corner windows.
fn axis_layout(extent: u32, size: u32) -> (Vec<u32>, u32) {
    if extent <= size {
        return (vec![0], (size - extent) / 2);
    }
    let n = extent.div_ceil(size);
    let span = (extent - size) as f64;
    let offsets = (0..n)
        .map(|i| (span * i as f64 / (n - 1) as f64).round() as u32)
        .collect();
    (offsets, 0)
}

/// Splits a page larger than the canvas (in either dimension) into overlapping
/// `size x size` tiles on an equally spaced grid. Axes that already fit are
/// padded with the canvas fill and centered.
pub fn divide_page(page: &RawImage, spec: &CanvasSpec) -> Result<Vec<Tile>> {
    let (w, h) = page.dimensions();
    if w <= spec.size && h <= spec.size {
        return Err(Error::InvalidInput(format!(
            "page {w}x{h} fits the {0}x{0} canvas; place it instead of dividing",
            spec.size
        )));
    }
    let (xs, vx) = axis_layout(w, spec.size);
    let (ys, vy) = axis_layout(h, spec.size);
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for &ty in &ys {
        for &tx in &xs {
            tiles.push(Tile {
                image: render_window(page, spec, (tx, ty), (vx, vy)),
                geometry: TileGeometry {
                    tile_offset: (tx, ty),
                    canvas_offset: (vx, vy),
                    crop_offset: (0, 0),
                    content_size: (w, h),
                },
            });
        }
    }
    Ok(tiles)
}

/// Places or divides a cropped page, recording `crop_offset` on every tile.
pub fn tile_page(cropped: &RawImage, spec: &CanvasSpec, crop_offset: (u32, u32)) -> Result<Vec<Tile>> {
    let (w, h) = cropped.dimensions();
    let mut tiles = if w <= spec.size && h <= spec.size {
        let (image, canvas_offset) = place_on_canvas(cropped, spec)?;
        vec![Tile {
            image,
            geometry: TileGeometry {
                tile_offset: (0, 0),
                canvas_offset,
                crop_offset: (0, 0),
                content_size: (w, h),
            },
        }]
    } else {
        divide_page(cropped, spec)?
    };
    for t in &mut tiles {
        t.geometry.crop_offset = crop_offset;
    }
    Ok(tiles)
}

/// Centers a query on the query canvas (texture or black fill).
pub fn prepare_query(query: &RawImage, spec: &CanvasSpec) -> Result<Tile> {
    let (image, canvas_offset) = place_on_canvas(query, spec)?;
    Ok(Tile {
        image,
        geometry: TileGeometry {
            tile_offset: (0, 0),
            canvas_offset,
            crop_offset: (0, 0),
            content_size: query.dimensions(),
        },
    })
}
