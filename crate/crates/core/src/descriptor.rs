//! Instance descriptors: region average pooling and l2 / PCA-whitening / l2
//! post-processing, plus the binary descriptor store.

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{ActivationCache, NetworkGraph};
use crate::linalg::{self, l2_normalize};
use crate::model_io::{ByteReader, WeightContainer};
use crate::region::BBox;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub image_id: String,
    pub region_id: u32,
    /// Region box in original-image pixel coordinates.
    pub bbox: BBox,
    pub score: f32,
    pub vector: Vec<f32>,
    pub normalized: bool,
}

impl Descriptor {
    /// A finalized descriptor whose vector collapsed to zero.
    pub fn is_valid(&self) -> bool {
        self.vector.iter().any(|&v| v != 0.0)
    }
}

/// Maps a box on the network input onto the grid of a layer with cumulative
/// stride `(sy, sx)`, rounding outward and keeping at least one cell.
pub fn project_bbox(bbox: &BBox, stride: (usize, usize), height: usize, width: usize) -> (usize, usize, usize, usize) {
    let (sy, sx) = (stride.0 as i32, stride.1 as i32);
    let ceil_div = |a: i32, b: i32| -((-a).div_euclid(b));
    let clamp = |v: i32, hi: usize| v.clamp(0, hi as i32) as usize;
    let mut top = clamp(bbox.top.div_euclid(sy), height);
    let mut left = clamp(bbox.left.div_euclid(sx), width);
    let mut bottom = clamp(ceil_div(bbox.bottom, sy), height);
    let mut right = clamp(ceil_div(bbox.right, sx), width);
    if bottom <= top {
        top = top.min(height - 1);
        bottom = top + 1;
    }
    if right <= left {
        left = left.min(width - 1);
        right = left + 1;
    }
    (top, left, bottom, right)
}

/// Per-channel mean of `tap` over the projection of `bbox` (network-input
/// coordinates).
pub fn pool_region(graph: &NetworkGraph, cache: &ActivationCache, tap: &str, bbox: &BBox) -> Result<Vec<f32>> {
    let layer = graph.layer_index(tap)?;
    let map = cache.get(tap)?;
    average_pool(map, bbox, graph.cumulative_stride(layer))
}

pub fn average_pool(map: &Tensor, bbox: &BBox, stride: (usize, usize)) -> Result<Vec<f32>> {
    let (h, w, c) = map.hwc()?;
    let (top, left, bottom, right) = project_bbox(bbox, stride, h, w);
    let mut acc = vec![0f64; c];
    for y in top..bottom {
        let row = &map.data()[(y * w + left) * c..(y * w + right) * c];
        for px in row.chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v as f64;
            }
        }
    }
    let n = ((bottom - top) * (right - left)) as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// `y = scale * (rotation * (x - mean))`, with rows of `rotation` the
/// principal axes in descending variance.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenModel {
    pub mean: Vec<f32>,
    /// `output_dim x dim`, row-major.
    pub rotation: Vec<f32>,
    pub scale: Vec<f32>,
}

/// Relative eigenvalue floor applied before inverting variances.
pub const EIGENVALUE_FLOOR: f64 = 1e-6;
/// Absolute eigenvalue floor; keeps the f32 scale within about 1e6.
pub const MIN_EIGENVALUE: f64 = 1e-12;

impl WhitenModel {
    pub fn identity(dim: usize) -> Self {
        let mut rotation = vec![0.0; dim * dim];
        for i in 0..dim {
            rotation[i * dim + i] = 1.0;
        }
        WhitenModel {
            mean: vec![0.0; dim],
            rotation,
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.scale.len()
    }

    pub fn apply(&self, v: &[f32]) -> Result<Vec<f32>> {
        let d = self.dim();
        if v.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: v.len(),
            });
        }
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(&x, &m)| x as f64 - m as f64).collect();
        Ok(self
            .rotation
            .chunks_exact(d)
            .zip(&self.scale)
            .map(|(row, &s)| {
                let p: f64 = row.iter().zip(&centered).map(|(&r, &c)| r as f64 * c).sum();
                (p * s as f64) as f32
            })
            .collect())
    }

    pub fn to_container(&self, prefix: &str) -> Result<WeightContainer> {
        let mut c = WeightContainer::new();
        self.store_into(&mut c, prefix)?;
        Ok(c)
    }

    pub fn store_into(&self, c: &mut WeightContainer, prefix: &str) -> Result<()> {
        let (d, o) = (self.dim(), self.output_dim());
        c.insert(&format!("{prefix}.mean"), Tensor::new(vec![d], self.mean.clone())?)?;
        c.insert(&format!("{prefix}.rotation"), Tensor::new(vec![o, d], self.rotation.clone())?)?;
        c.insert(&format!("{prefix}.scale"), Tensor::new(vec![o], self.scale.clone())?)?;
        Ok(())
    }

    pub fn from_container(c: &WeightContainer, prefix: &str) -> Result<Self> {
        let mean = c.require(&format!("{prefix}.mean"))?.data().to_vec();
        let rot = c.require(&format!("{prefix}.rotation"))?;
        let scale = c.require(&format!("{prefix}.scale"))?.data().to_vec();
        if rot.dims() != [scale.len(), mean.len()] {
            return Err(Error::Shape(format!(
                "whitening rotation is {:?}, expected [{}, {}]",
                rot.dims(),
                scale.len(),
                mean.len()
            )));
        }
        Ok(WhitenModel {
            mean,
            rotation: rot.data().to_vec(),
            scale,
        })
    }
}

/// Fits PCA whitening on the given vectors as they are.
///
/// Eigenvalues below `EIGENVALUE_FLOOR` times the largest are raised to that
/// floor before inversion. `output_dim` keeps the leading axes; `None` keeps
/// all of them.
pub fn fit_whitening(samples: &[Vec<f32>], output_dim: Option<usize>) -> Result<WhitenModel> {
    let pca = linalg::pca(samples)?;
    let d = pca.mean.len();
    let out = output_dim.unwrap_or(d);
    if out == 0 || out > d {
        return Err(Error::Config(format!("whitening output dim {out} must lie in 1..={d}")));
    }
    let largest = pca.eigenvalues[0];
    let floor = (largest * EIGENVALUE_FLOOR).max(MIN_EIGENVALUE);
    let scale = pca.eigenvalues[..out].iter().map(|&l| (1.0 / l.max(floor).sqrt()) as f32).collect();
    let mut rotation = Vec::with_capacity(out * d);
    for r in 0..out {
        rotation.extend(pca.axes.row(r).iter().map(|&v| v as f32));
    }
    Ok(WhitenModel {
        mean: pca.mean.iter().map(|&m| m as f32).collect(),
        rotation,
        scale,
    })
}

/// l2-normalize, whiten, l2-normalize. A vector that is zero at either
/// normalization comes back as zeros with `false`.
pub fn finalize(raw: &[f32], model: &WhitenModel) -> Result<(Vec<f32>, bool)> {
    if raw.len() != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got: raw.len(),
        });
    }
    let mut v = raw.to_vec();
    if !l2_normalize(&mut v) {
        return Ok((vec![0.0; model.output_dim()], false));
    }
    let mut w = model.apply(&v)?;
    let ok = l2_normalize(&mut w);
    Ok((w, ok))
}

pub fn finalize_descriptor(d: &Descriptor, model: &WhitenModel) -> Result<Descriptor> {
    let (vector, _) = finalize(&d.vector, model)?;
    Ok(Descriptor {
        vector,
        normalized: true,
        ..d.clone()
    })
}

const STORE_MAGIC: [u8; 4] = *b"DASD";
const STORE_VERSION: u32 = 1;

/// Flat list of descriptors sharing one dimension.
///
/// Layout (little-endian): magic `DASD`, version `u32`, dim `u32`,
/// normalized flag `u32`, count `u32`, then per record: id length `u32`, UTF-8
/// image id, region id `u32`, box `4 x i32` (top, left, bottom, right), score
/// `f32`, vector `dim x f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorStore {
    pub dim: usize,
    pub normalized: bool,
    pub records: Vec<Descriptor>,
}

impl DescriptorStore {
    pub fn new(dim: usize, normalized: bool) -> Self {
        DescriptorStore {
            dim,
            normalized,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, d: Descriptor) -> Result<()> {
        if d.vector.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: d.vector.len(),
            });
        }
        self.records.push(d);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&STORE_MAGIC);
        for v in [STORE_VERSION, self.dim as u32, self.normalized as u32, self.records.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.records {
            out.extend_from_slice(&(r.image_id.len() as u32).to_le_bytes());
            out.extend_from_slice(r.image_id.as_bytes());
            out.extend_from_slice(&r.region_id.to_le_bytes());
            for v in [r.bbox.top, r.bbox.left, r.bbox.bottom, r.bbox.right] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&r.score.to_le_bytes());
            for v in &r.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(STORE_MAGIC)?;
        let version = r.u32("version")?;
        if version != STORE_VERSION {
            return Err(Error::VersionMismatch {
                expected: STORE_VERSION,
                found: version,
            });
        }
        let dim = r.u32("dim")? as usize;
        let normalized = r.u32("flags")? != 0;
        let count = r.u32("count")? as usize;
        let mut store = DescriptorStore::new(dim, normalized);
        for _ in 0..count {
            let len = r.u32("id length")? as usize;
            let image_id = std::str::from_utf8(r.take(len, "image id")?)
                .map_err(|_| Error::Data("image id is not UTF-8".into()))?
                .to_string();
            let region_id = r.u32("region id")?;
            let bbox = BBox::new(r.i32("box")?, r.i32("box")?, r.i32("box")?, r.i32("box")?);
            let score = r.f32("score")?;
            let vector = r.f32s(dim, "vector")?;
            store.records.push(Descriptor {
                image_id,
                region_id,
                bbox,
                score,
                vector,
                normalized,
            });
        }
        r.finish()?;
        Ok(store)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
