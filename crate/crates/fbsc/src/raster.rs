//! Image storage and the crop geometry used everywhere in the pipeline.
//!
//! Frames are held as 8-bit RGB (`RgbFrame`) and converted to `Raster`
//! (channel-first `f64` in `[0, 1]`) when crops are extracted. All sampling
//! is bilinear with clamped borders, so extraction is a pure function of
//! the frame bytes and the crop rectangle.

use std::path::Path;

use ndarray::Array3;

use crate::{fsaudit, Error, Result};

/// Channel-first (3, H, W) image with values in [0, 1].
pub type Raster = Array3<f64>;

/// 8-bit interleaved RGB frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbFrame {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major, `3 * width * height` bytes.
    pub data: Vec<u8>,
}

impl RgbFrame {
    pub fn new(width: usize, height: usize) -> Self {
        RgbFrame {
            width,
            height,
            data: vec![0; 3 * width * height],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn load_png(path: &Path) -> Result<RgbFrame> {
        fsaudit::record(path);
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?
            .into_rgb8();
        Ok(RgbFrame {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img: image::RgbImage = image::ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.clone(),
        )
        .expect("buffer matches dimensions");
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Per-channel mean in [0, 1].
    pub fn mean_color(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += f64::from(px[c]);
            }
        }
        let n = (self.width * self.height) as f64;
        [
            acc[0] / (255.0 * n),
            acc[1] / (255.0 * n),
            acc[2] / (255.0 * n),
        ]
    }

    /// Full frame as a float raster.
    pub fn to_raster(&self) -> Raster {
        let mut out = Array3::zeros((3, self.height, self.width));
        for y in 0..self.height {
            for x in 0..self.width {
                let px = self.pixel(x, y);
                for c in 0..3 {
                    out[[c, y, x]] = f64::from(px[c]) / 255.0;
                }
            }
        }
        out
    }

    /// Bilinear sample at continuous coordinates, clamped to the border.
    /// Coordinates are in pixel units where (0.0, 0.0) is the center of the
    /// top-left pixel.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let xm = (self.width - 1) as f64;
        let ym = (self.height - 1) as f64;
        let x = x.clamp(0.0, xm);
        let y = y.clamp(0.0, ym);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = f64::from(p00[c]) * (1.0 - fx) + f64::from(p10[c]) * fx;
            let bot = f64::from(p01[c]) * (1.0 - fx) + f64::from(p11[c]) * fx;
            out[c] = (top * (1.0 - fy) + bot * fy) / 255.0;
        }
        out
    }

    /// Fill an axis-aligned box (clamped to the frame) with a constant color.
    pub fn fill_box(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, rgb: [u8; 3]) {
        let xa = x1.floor().max(0.0) as usize;
        let ya = y1.floor().max(0.0) as usize;
        let xb = (x2.ceil() as usize).min(self.width);
        let yb = (y2.ceil() as usize).min(self.height);
        for y in ya..yb {
            for x in xa..xb {
                self.set_pixel(x, y, rgb);
            }
        }
    }
}

/// Square crop window in frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRect {
    /// Left edge (pixel units).
    pub x: f64,
    /// Top edge.
    pub y: f64,
    /// Side length.
    pub side: f64,
}

impl CropRect {
    /// Square window around a box: side = margin * max(w, h), centered on
    /// the box center, shifted (and if necessary shrunk) to stay inside the
    /// `frame_w` x `frame_h` bounds.
    pub fn around_box(
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        margin: f64,
        frame_w: usize,
        frame_h: usize,
    ) -> CropRect {
        let (fw, fh) = (frame_w as f64, frame_h as f64);
        let side = ((x2 - x1).max(y2 - y1) * margin).min(fw.min(fh));
        let cx = 0.5 * (x1 + x2);
        let cy = 0.5 * (y1 + y2);
        let x = (cx - side / 2.0).clamp(0.0, fw - side);
        let y = (cy - side / 2.0).clamp(0.0, fh - side);
        CropRect { x, y, side }
    }

    /// Overlap area with a box, in square pixels.
    pub fn box_overlap(&self, x1: f64, y1: f64, x2: f64, y2: f64) -> f64 {
        let w = (x2.min(self.x + self.side) - x1.max(self.x)).max(0.0);
        let h = (y2.min(self.y + self.side) - y1.max(self.y)).max(0.0);
        w * h
    }
}

/// Extract `rect` from `frame` and resample it to `out_size` x `out_size`.
///
/// Output pixel centers map linearly onto the rect so that the crop's outer
/// edges coincide with the rect's edges.
pub fn crop_resize(frame: &RgbFrame, rect: CropRect, out_size: usize) -> Raster {
    let mut out = Array3::zeros((3, out_size, out_size));
    let scale = rect.side / out_size as f64;
    for oy in 0..out_size {
        let sy = rect.y + (oy as f64 + 0.5) * scale - 0.5;
        for ox in 0..out_size {
            let sx = rect.x + (ox as f64 + 0.5) * scale - 0.5;
            let rgb = frame.sample(sx, sy);
            for c in 0..3 {
                out[[c, oy, ox]] = rgb[c];
            }
        }
    }
    out
}

pub fn quantize_color(rgb: [f64; 3]) -> [u8; 3] {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [q(rgb[0]), q(rgb[1]), q(rgb[2])]
}
