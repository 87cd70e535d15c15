use image::{GrayImage, Luma};
use imageproc::contrast::otsu_level;
use imageproc::distance_transform::Norm;
use imageproc::morphology::{dilate_mut, erode_mut};

use super::RawImage;

/// Foreground/background mask with the dimensions of its source image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32, fill: bool) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn is_foreground(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = value;
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Sub-mask covering `[x0, x0+w) x [y0, y0+h)`.
    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| self.is_foreground(x0 + x, y0 + y))
    }

    fn from_gray(img: &GrayImage) -> Self {
        Self::from_fn(img.width(), img.height(), |x, y| img.get_pixel(x, y)[0] != 0)
    }
}

/// Dark-ink mask: global Otsu threshold on luminance, then a 3x3 opening
/// (one erosion followed by one dilation). Pixels at or below the threshold
/// are foreground. Uniform images have no foreground.
pub fn binarize(image: &RawImage) -> BinaryMask {
    let gray = image::imageops::grayscale(image);
    let (lo, hi) = gray
        .pixels()
        .fold((u8::MAX, u8::MIN), |(lo, hi), p| (lo.min(p[0]), hi.max(p[0])));
    if lo == hi {
        return BinaryMask::new(image.width(), image.height(), false);
    }
    let level = otsu_level(&gray);
    let mut ink = GrayImage::from_fn(gray.width(), gray.height(), |x, y| {
        Luma([if gray.get_pixel(x, y)[0] <= level { 255 } else { 0 }])
    });
    // LInf radius 1 is the 3x3 square structuring element.
    erode_mut(&mut ink, Norm::LInf, 1);
    dilate_mut(&mut ink, Norm::LInf, 1);
    BinaryMask::from_gray(&ink)
}
