//! Salient regions from probability maps: thresholding, second-moment
//! ellipses, circumscribed boxes and greedy NMS.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excitation::{backprop_peak, detect_peaks, seed_pixels_above_mean, Peak, ProbabilityMap};
use crate::graph::{mean_activation_map, ActivationCache, NetworkGraph};
use crate::tensor::Tensor;

/// Half-open pixel box: rows `top..bottom`, columns `left..right`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub top: i32,
    pub left: i32,
    pub bottom: i32,
    pub right: i32,
}

impl BBox {
    pub fn new(top: i32, left: i32, bottom: i32, right: i32) -> Self {
        BBox { top, left, bottom, right }
    }

    pub fn is_valid(&self) -> bool {
        self.bottom > self.top && self.right > self.left
    }

    pub fn height(&self) -> i32 {
        self.bottom - self.top
    }

    pub fn width(&self) -> i32 {
        self.right - self.left
    }

    pub fn area(&self) -> i64 {
        if self.is_valid() {
            self.height() as i64 * self.width() as i64
        } else {
            0
        }
    }

    pub fn intersection(&self, other: &BBox) -> i64 {
        let h = (self.bottom.min(other.bottom) - self.top.max(other.top)).max(0) as i64;
        let w = (self.right.min(other.right) - self.left.max(other.left)).max(0) as i64;
        h * w
    }

    pub fn clip(&self, height: usize, width: usize) -> BBox {
        BBox {
            top: self.top.clamp(0, height as i32),
            left: self.left.clamp(0, width as i32),
            bottom: self.bottom.clamp(0, height as i32),
            right: self.right.clamp(0, width as i32),
        }
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            top: self.top.min(other.top),
            left: self.left.min(other.left),
            bottom: self.bottom.max(other.bottom),
            right: self.right.max(other.right),
        }
    }

    pub fn contains_point(&self, y: f64, x: f64) -> bool {
        y >= self.top as f64 - 0.5 && y < self.bottom as f64 - 0.5 && x >= self.left as f64 - 0.5 && x < self.right as f64 - 0.5
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.top, self.left, self.bottom, self.right)
    }
}

impl FromStr for BBox {
    type Err = Error;

    /// Parses `top,left,bottom,right`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let err = || Error::Data(format!("bad box `{s}`, expected top,left,bottom,right"));
        if parts.len() != 4 {
            return Err(err());
        }
        let v: Vec<i32> = parts.iter().map(|p| p.parse().map_err(|_| err())).collect::<Result<_>>()?;
        let b = BBox::new(v[0], v[1], v[2], v[3]);
        if !b.is_valid() {
            return Err(Error::Data(format!("empty box `{s}`")));
        }
        Ok(b)
    }
}

/// Intersection over union of two half-open boxes, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectorMode {
    /// Seeds from the 3x3 local maxima of the mean activation map.
    #[serde(rename = "dasr")]
    Dasr,
    /// Seeds from every above-mean position, followed by NMS.
    #[serde(rename = "dasr-star")]
    DasrStar,
}

impl FromStr for DetectorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dasr" => Ok(DetectorMode::Dasr),
            "dasr-star" | "dasr*" => Ok(DetectorMode::DasrStar),
            other => Err(Error::Config(format!("unknown detector mode `{other}`"))),
        }
    }
}

impl fmt::Display for DetectorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetectorMode::Dasr => "dasr",
            DetectorMode::DasrStar => "dasr-star",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub tau: f32,
    pub beta: f32,
    pub mode: DetectorMode,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            tau: 0.1,
            beta: 0.3,
            mode: DetectorMode::DasrStar,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        Ok(())
    }
}

/// Second-moment ellipse of a thresholded pixel set.
///
/// Moments are central, taken about the centroid of the selected pixels and
/// divided by their count; each pixel counts as a unit square, so a `w x h`
/// block has `mxx = w^2 / 12` and `myy = h^2 / 12`. Semi-axes are
/// `2 * sqrt(eigenvalue)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    pub cy: f64,
    pub cx: f64,
    pub mxx: f64,
    pub mxy: f64,
    pub myy: f64,
    pub major: f64,
    pub minor: f64,
    /// Angle of the major axis from the +x axis, radians in `(-pi/2, pi/2]`.
    pub orientation: f64,
    pub pixels: usize,
}

const PIXEL_VARIANCE: f64 = 1.0 / 12.0;

impl EllipseParams {
    pub fn from_moments(cy: f64, cx: f64, mxx: f64, mxy: f64, myy: f64, pixels: usize) -> Self {
        let half_trace = 0.5 * (mxx + myy);
        let disc = (0.25 * (mxx - myy) * (mxx - myy) + mxy * mxy).sqrt();
        let l1 = half_trace + disc;
        let l2 = (half_trace - disc).max(0.0);
        let orientation = if mxy == 0.0 && mxx >= myy {
            0.0
        } else if mxy == 0.0 {
            std::f64::consts::FRAC_PI_2
        } else {
            0.5 * (2.0 * mxy).atan2(mxx - myy)
        };
        EllipseParams {
            cy,
            cx,
            mxx,
            mxy,
            myy,
            major: 2.0 * l1.sqrt(),
            minor: 2.0 * l2.sqrt(),
            orientation,
            pixels,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.minor < 1.0
    }

    /// Half extents `(rows, cols)` of the ellipse's axis-aligned hull.
    pub fn half_extents(&self) -> (f64, f64) {
        (2.0 * self.myy.sqrt(), 2.0 * self.mxx.sqrt())
    }

    /// Circumscribed rectangle over pixels whose centers fall inside the
    /// ellipse's hull, clipped to the image. Degenerate ellipses grow to at
    /// least a 3x3 box around the center pixel.
    pub fn bbox(&self, height: usize, width: usize) -> BBox {
        let (hy, hx) = self.half_extents();
        let (ry, rx) = (self.cy.round() as i32, self.cx.round() as i32);
        let mut b = BBox::new(
            (self.cy - hy).ceil() as i32,
            (self.cx - hx).ceil() as i32,
            (self.cy + hy).floor() as i32 + 1,
            (self.cx + hx).floor() as i32 + 1,
        )
        .union(&BBox::new(ry, rx, ry + 1, rx + 1));
        if self.is_degenerate() {
            b = b.union(&BBox::new(ry - 1, rx - 1, ry + 2, rx + 2));
        }
        b.clip(height, width)
    }
}

/// Fits the second-moment ellipse to every pixel of `map` at or above `tau`.
pub fn fit_ellipse(map: &Tensor, tau: f32) -> Result<EllipseParams> {
    let (h, w) = match map.dims() {
        &[h, w] => (h, w),
        d => return Err(Error::Shape(format!("expected a 2-D probability map, got {d:?}"))),
    };
    let selected: Vec<(f64, f64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| map.at2(y, x) >= tau)
        .map(|(y, x)| (y as f64, x as f64))
        .collect();
    if selected.is_empty() {
        return Err(Error::EmptyRegion { tau });
    }
    let n = selected.len() as f64;
    let cy = selected.iter().map(|p| p.0).sum::<f64>() / n;
    let cx = selected.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut syy, mut sxy, mut sxx) = (0.0, 0.0, 0.0);
    for &(y, x) in &selected {
        let (dy, dx) = (y - cy, x - cx);
        syy += dy * dy;
        sxy += dx * dy;
        sxx += dx * dx;
    }
    Ok(EllipseParams::from_moments(
        cy,
        cx,
        sxx / n + PIXEL_VARIANCE,
        sxy / n,
        syy / n + PIXEL_VARIANCE,
        selected.len(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SalientRegion {
    pub peak: Peak,
    pub ellipse: EllipseParams,
    /// In network-input pixel coordinates.
    pub bbox: BBox,
    pub score: f32,
    pub probability_mass: f64,
}

impl SalientRegion {
    pub fn from_map(map: &ProbabilityMap, tau: f32) -> Result<Self> {
        let ellipse = fit_ellipse(&map.values, tau)?;
        let (h, w) = (map.values.dims()[0], map.values.dims()[1]);
        Ok(SalientRegion {
            peak: map.peak,
            ellipse,
            bbox: ellipse.bbox(h, w),
            score: map.peak.response,
            probability_mass: map.mass,
        })
    }
}

fn nms_order(a: &SalientRegion, b: &SalientRegion) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then((a.peak.y, a.peak.x).cmp(&(b.peak.y, b.peak.x)))
}

/// Greedy NMS: strongest first, a region is dropped when its IoU with any
/// kept region exceeds `beta`. Equal scores go by peak raster position.
pub fn nms(mut regions: Vec<SalientRegion>, beta: f64) -> Vec<SalientRegion> {
    regions.sort_by(nms_order);
    let mut kept: Vec<SalientRegion> = Vec::with_capacity(regions.len());
    for r in regions {
        if kept.iter().all(|k| iou(&k.bbox, &r.bbox) <= beta) {
            kept.push(r);
        }
    }
    kept
}

#[derive(Debug, Clone, Default)]
pub struct Detection {
    pub regions: Vec<SalientRegion>,
    pub seeds: usize,
    /// Seeds whose map had no pixel above `tau`.
    pub empty: usize,
    pub suppressed: usize,
    /// Total probability dropped at dead ends, summed over seeds.
    pub dropped_mass: f64,
    /// Dropped probability per layer summed over seeds, seeding losses under `seed`.
    pub dropped_by_layer: Vec<(String, f64)>,
}

/// Detects salient regions on a cached forward pass.
pub fn detect_regions(graph: &NetworkGraph, cache: &ActivationCache, config: &DetectorConfig) -> Result<Detection> {
    config.validate()?;
    let mean = mean_activation_map(cache, graph.backprop_start())?;
    let seeds = match config.mode {
        DetectorMode::Dasr => detect_peaks(&mean)?,
        DetectorMode::DasrStar => seed_pixels_above_mean(&mean)?,
    };
    let maps: Vec<ProbabilityMap> = seeds
        .par_iter()
        .map(|p| backprop_peak(graph, cache, p))
        .collect::<Result<_>>()?;

    let mut det = Detection {
        seeds: seeds.len(),
        ..Detection::default()
    };
    let mut regions = Vec::with_capacity(maps.len());
    let mut by_layer: BTreeMap<&str, f64> = BTreeMap::new();
    for m in &maps {
        det.dropped_mass += m.diagnostics.total_dropped();
        *by_layer.entry("seed").or_default() += m.diagnostics.seed_dropped;
        for (name, d) in &m.diagnostics.dropped {
            *by_layer.entry(name).or_default() += d;
        }
        match SalientRegion::from_map(m, config.tau) {
            Ok(r) => regions.push(r),
            Err(Error::EmptyRegion { .. }) => det.empty += 1,
            Err(e) => return Err(e),
        }
    }
    if config.mode == DetectorMode::DasrStar {
        let before = regions.len();
        regions = nms(regions, config.beta as f64);
        det.suppressed = before - regions.len();
    }
    det.regions = regions;
    det.dropped_by_layer = by_layer.into_iter().map(|(n, d)| (n.to_string(), d)).collect();
    log::debug!(
        "{} seeds, {} empty, {} suppressed, {} regions",
        det.seeds,
        det.empty,
        det.suppressed,
        det.regions.len()
    );
    Ok(det)
}
