//! Image decoding, resizing and normalization, plus overlay and heat-map
//! rendering.

use std::path::Path;

use image::{imageops, imageops::FilterType, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::graph::Preprocessing;
use crate::region::{BBox, EllipseParams};
use crate::tensor::Tensor;

pub const DEFAULT_LONG_SIDE: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreprocessSpec {
    pub long_side: usize,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            long_side: DEFAULT_LONG_SIDE,
        }
    }
}

/// `(height, width)` after scaling the long side to `long_side`, short side rounded.
pub fn target_size(height: usize, width: usize, long_side: usize) -> (usize, usize) {
    let long = height.max(width);
    let scale = |v: usize| ((v as f64 * long_side as f64 / long as f64).round() as usize).max(1);
    if height >= width {
        (long_side, scale(width))
    } else {
        (scale(height), long_side)
    }
}

/// A resized, normalized image and the geometry linking it to the original.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    /// `(H, W, 3)` network input, RGB.
    pub tensor: Tensor,
    pub original: (usize, usize),
    pub network: (usize, usize),
    /// Resized 8-bit image, handy for overlays on the network frame.
    pub resized: RgbImage,
}

impl Preprocessed {
    fn ratios(&self) -> (f64, f64) {
        (
            self.network.0 as f64 / self.original.0 as f64,
            self.network.1 as f64 / self.original.1 as f64,
        )
    }

    /// Original-image box onto the network frame, rounding outward.
    pub fn to_network(&self, b: &BBox) -> BBox {
        let (ry, rx) = self.ratios();
        scale_box(b, ry, rx).clip(self.network.0, self.network.1)
    }

    /// Network-frame box onto the original image, rounding outward.
    pub fn to_original(&self, b: &BBox) -> BBox {
        let (ry, rx) = self.ratios();
        scale_box(b, 1.0 / ry, 1.0 / rx).clip(self.original.0, self.original.1)
    }

    pub fn ellipse_to_original(&self, e: &EllipseParams) -> EllipseParams {
        let (ry, rx) = self.ratios();
        // Pixel centers map as (p + 0.5) / r - 0.5.
        let cy = (e.cy + 0.5) / ry - 0.5;
        let cx = (e.cx + 0.5) / rx - 0.5;
        EllipseParams::from_moments(
            cy,
            cx,
            e.mxx / (rx * rx),
            e.mxy / (rx * ry),
            e.myy / (ry * ry),
            e.pixels,
        )
    }
}

fn scale_box(b: &BBox, sy: f64, sx: f64) -> BBox {
    // Scale then snap outward; the epsilon absorbs representation error in
    // exact multiples.
    let lo = |v: i32, s: f64| (v as f64 * s + 1e-9).floor() as i32;
    let hi = |v: i32, s: f64| (v as f64 * s - 1e-9).ceil() as i32;
    BBox::new(lo(b.top, sy), lo(b.left, sx), hi(b.bottom, sy), hi(b.right, sx))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    if rgb.width() == 0 || rgb.height() == 0 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            message: "zero-area image".into(),
        });
    }
    Ok(rgb)
}

/// Resizes (bilinear, anti-aliased when shrinking) so the long side equals
/// the target, then maps pixels through the graph's normalization.
pub fn preprocess_image(img: &RgbImage, spec: &PreprocessSpec, norm: &Preprocessing) -> Result<Preprocessed> {
    if spec.long_side == 0 {
        return Err(Error::Config("long side must be positive".into()));
    }
    if norm.mean.len() != 3 || norm.scale.len() != 3 {
        return Err(Error::Config("RGB input needs three means and scales".into()));
    }
    let (h, w) = (img.height() as usize, img.width() as usize);
    if h == 0 || w == 0 {
        return Err(Error::Data("zero-area image".into()));
    }
    let (nh, nw) = target_size(h, w, spec.long_side);
    let resized = if (nh, nw) == (h, w) {
        img.clone()
    } else {
        imageops::resize(img, nw as u32, nh as u32, FilterType::Triangle)
    };
    let mut data = Vec::with_capacity(nh * nw * 3);
    for px in resized.pixels() {
        for c in 0..3 {
            data.push((px[c] as f32 * norm.pixel_scale - norm.mean[c]) / norm.scale[c]);
        }
    }
    Ok(Preprocessed {
        tensor: Tensor::new(vec![nh, nw, 3], data)?,
        original: (h, w),
        network: (nh, nw),
        resized,
    })
}

pub fn preprocess(path: &Path, spec: &PreprocessSpec, norm: &Preprocessing) -> Result<Preprocessed> {
    let img = load_rgb(path)?;
    preprocess_image(&img, spec, norm).map_err(|e| match e {
        Error::Data(m) => Error::Image {
            path: path.to_path_buf(),
            message: m,
        },
        other => other,
    })
}

/// Color ramp used for heat maps: blue, cyan, green, yellow, red at
/// 0, 0.25, 0.5, 0.75 and 1.
pub fn heat_color(v: f32) -> Rgb<u8> {
    const STOPS: [[f32; 3]; 5] = [
        [0.0, 0.0, 255.0],
        [0.0, 255.0, 255.0],
        [0.0, 255.0, 0.0],
        [255.0, 255.0, 0.0],
        [255.0, 0.0, 0.0],
    ];
    let t = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 } * 4.0;
    let i = (t.floor() as usize).min(3);
    let f = t - i as f32;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (STOPS[i][c] + (STOPS[i + 1][c] - STOPS[i][c]) * f).round() as u8;
    }
    Rgb(out)
}

/// Renders an `(h, w)` map as a heat map of size `(height, width)` with
/// nearest-neighbor upsampling. Values are scaled by the map maximum; negative
/// values render as zero.
pub fn render_heatmap(map: &Tensor, height: usize, width: usize) -> Result<RgbImage> {
    let (mh, mw) = match map.dims() {
        &[h, w] => (h, w),
        &[h, w, 1] => (h, w),
        d => return Err(Error::Shape(format!("heat map needs a 2-D map, got {d:?}"))),
    };
    let max = map.max().max(0.0);
    let mut img = RgbImage::new(width as u32, height as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let sy = (y as usize * mh / height).min(mh - 1);
        let sx = (x as usize * mw / width).min(mw - 1);
        let v = map.data()[sy * mw + sx].max(0.0);
        *px = heat_color(if max > 0.0 { v / max } else { 0.0 });
    }
    Ok(img)
}

pub const BOX_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
pub const ELLIPSE_COLOR: Rgb<u8> = Rgb([0, 255, 0]);

/// Draws the one-pixel outline of a box: rows `top` and `bottom - 1`,
/// columns `left` and `right - 1`.
pub fn draw_bbox(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    let (w, h) = (img.width() as i32, img.height() as i32);
    let b = BBox::new(b.top.max(0), b.left.max(0), b.bottom.min(h), b.right.min(w));
    if !b.is_valid() {
        return;
    }
    for x in b.left..b.right {
        img.put_pixel(x as u32, b.top as u32, color);
        img.put_pixel(x as u32, (b.bottom - 1) as u32, color);
    }
    for y in b.top..b.bottom {
        img.put_pixel(b.left as u32, y as u32, color);
        img.put_pixel((b.right - 1) as u32, y as u32, color);
    }
}

pub fn draw_ellipse(img: &mut RgbImage, e: &EllipseParams, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let steps = ((e.major * 8.0).ceil() as usize).clamp(32, 4096);
    let (s, c) = e.orientation.sin_cos();
    for k in 0..steps {
        let t = k as f64 / steps as f64 * std::f64::consts::TAU;
        let (u, v) = (e.major * t.cos(), e.minor * t.sin());
        let x = (e.cx + u * c - v * s).round() as i64;
        let y = (e.cy + u * s + v * c).round() as i64;
        if x >= 0 && y >= 0 && x < w && y < h {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}
