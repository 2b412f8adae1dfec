//! Image-level VLAD vectors built from a bag of instance descriptors.
//!
//! Post-processing after residual accumulation: optional PCA rotation,
//! signed power-law `sign(z) * |z|^0.5`, and l2 normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, l2_normalize};
use crate::model_io::WeightContainer;
use crate::tensor::Tensor;

pub const DEFAULT_CODEBOOK_SIZE: usize = 4;
pub const DEFAULT_SEED: u64 = 0x5eed;
pub const POWER: f64 = 0.5;
const MAX_ITERATIONS: usize = 100;
const RELATIVE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `k` centroids of length `dim`.
    pub centroids: Vec<Vec<f32>>,
    pub seed: u64,
    pub iterations: usize,
    pub inertia: f64,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    /// Index of the nearest centroid; ties go to the lower index.
    pub fn assign(&self, v: &[f32]) -> usize {
        nearest(&self.centroids, v).0
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

fn nearest(centroids: &[Vec<f32>], v: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means with k-means++ seeding from a fixed seed.
pub fn train_codebook(samples: &[Vec<f32>], k: usize, seed: u64) -> Result<Codebook> {
    if k == 0 {
        return Err(Error::Config("codebook size must be at least 1".into()));
    }
    if samples.len() < k {
        return Err(Error::Empty(format!("{} samples cannot train {k} centroids", samples.len())));
    }
    let d = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(Error::Dimension {
            expected: d,
            got: bad.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<Vec<f32>> = vec![samples[rng.random_range(0..samples.len())].clone()];
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = d2.iter().rposition(|&v| v > 0.0).unwrap();
            for (i, &v) in d2.iter().enumerate() {
                if v > 0.0 && r < v {
                    idx = i;
                    break;
                }
                r -= v;
            }
            idx
        } else {
            rng.random_range(0..samples.len())
        };
        centroids.push(samples[pick].clone());
        for (dv, s) in d2.iter_mut().zip(samples) {
            *dv = dv.min(sq_dist(s, centroids.last().unwrap()));
        }
    }

    let mut assignment = vec![0usize; samples.len()];
    let mut inertia = f64::INFINITY;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut current = 0.0;
        for (a, s) in assignment.iter_mut().zip(samples) {
            let (c, dist) = nearest(&centroids, s);
            *a = c;
            current += dist;
        }
        let mut sums = vec![vec![0f64; d]; k];
        let mut counts = vec![0usize; k];
        for (&a, s) in assignment.iter().zip(samples) {
            counts[a] += 1;
            for (acc, &v) in sums[a].iter_mut().zip(s) {
                *acc += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster at the sample farthest from its centroid.
                let far = (0..samples.len())
                    .max_by(|&a, &b| {
                        sq_dist(&samples[a], &centroids[assignment[a]])
                            .total_cmp(&sq_dist(&samples[b], &centroids[assignment[b]]))
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                centroids[c] = samples[far].clone();
                assignment[far] = c;
            } else {
                centroids[c] = sums[c].iter().map(|&s| (s / counts[c] as f64) as f32).collect();
            }
        }
        let converged = current == 0.0 || (inertia - current).abs() <= RELATIVE_TOLERANCE * inertia;
        inertia = current;
        if converged {
            break;
        }
    }
    inertia = samples.iter().map(|s| nearest(&centroids, s).1).sum();
    Ok(Codebook {
        centroids,
        seed,
        iterations,
        inertia,
    })
}

/// Concatenated per-centroid residual sums, `k * dim` long.
///
/// Descriptors are summed in a canonical order, so the result does not
/// depend on the order of the bag.
pub fn residual_accumulator(descriptors: &[Vec<f32>], codebook: &Codebook) -> Result<Vec<f64>> {
    let d = codebook.dim();
    let mut acc = vec![0f64; codebook.k() * d];
    let mut bag: Vec<&Vec<f32>> = descriptors.iter().collect();
    bag.sort_by(|a, b| canonical_order(a, b));
    for v in bag {
        if v.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: v.len(),
            });
        }
        let c = codebook.assign(v);
        for (j, (&x, &m)) in v.iter().zip(&codebook.centroids[c]).enumerate() {
            acc[c * d + j] += x as f64 - m as f64;
        }
    }
    Ok(acc)
}

fn canonical_order(a: &[f32], b: &[f32]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(a.len().cmp(&b.len()))
}

/// Orthonormal rotation applied to the raw accumulator, rows are principal axes.
#[derive(Debug, Clone, PartialEq)]
pub struct VladRotation {
    pub dim: usize,
    pub rows: Vec<f32>,
}

impl VladRotation {
    pub fn identity(dim: usize) -> Self {
        let mut rows = vec![0.0; dim * dim];
        for i in 0..dim {
            rows[i * dim + i] = 1.0;
        }
        VladRotation { dim, rows }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.rows
            .chunks_exact(self.dim)
            .map(|r| r.iter().zip(v).map(|(&a, &b)| a as f64 * b).sum())
            .collect()
    }
}

/// PCA axes of held-out raw accumulators, kept at full dimension.
pub fn train_rotation(accumulators: &[Vec<f32>]) -> Result<VladRotation> {
    let pca = linalg::pca(accumulators)?;
    let dim = pca.mean.len();
    Ok(VladRotation {
        dim,
        rows: row_major(&pca.axes),
    })
}

fn row_major(m: &nalgebra::DMatrix<f64>) -> Vec<f32> {
    (0..m.nrows())
        .flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)] as f32))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VladModel {
    pub codebook: Codebook,
    pub rotation: Option<VladRotation>,
}

impl VladModel {
    pub fn output_dim(&self) -> usize {
        self.codebook.k() * self.codebook.dim()
    }

    pub fn to_container(&self) -> Result<WeightContainer> {
        let mut c = WeightContainer::new();
        let (k, d) = (self.codebook.k(), self.codebook.dim());
        let flat: Vec<f32> = self.codebook.centroids.iter().flatten().copied().collect();
        c.insert("vlad.centroids", Tensor::new(vec![k, d], flat)?)?;
        if let Some(r) = &self.rotation {
            c.insert("vlad.rotation", Tensor::new(vec![r.dim, r.dim], r.rows.clone())?)?;
        }
        Ok(c)
    }

    /// Training metadata (seed, iterations, inertia) is not part of the container.
    pub fn from_container(c: &WeightContainer) -> Result<Self> {
        let cent = c.require("vlad.centroids")?;
        let &[k, d] = cent.dims() else {
            return Err(Error::Shape(format!("centroids have dims {:?}", cent.dims())));
        };
        let centroids = cent.data().chunks_exact(d).map(<[f32]>::to_vec).collect();
        let rotation = match c.get("vlad.rotation") {
            Some(r) => {
                if r.dims() != [k * d, k * d] {
                    return Err(Error::Shape(format!("rotation has dims {:?}, expected [{n}, {n}]", r.dims(), n = k * d)));
                }
                Some(VladRotation {
                    dim: k * d,
                    rows: r.data().to_vec(),
                })
            }
            None => None,
        };
        Ok(VladModel {
            codebook: Codebook {
                centroids,
                seed: 0,
                iterations: 0,
                inertia: 0.0,
            },
            rotation,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VladVector {
    pub values: Vec<f32>,
    /// False for an empty bag or a zero accumulator.
    pub valid: bool,
}

/// Encodes one image's descriptors.
pub fn encode(descriptors: &[Vec<f32>], model: &VladModel) -> Result<VladVector> {
    let dim = model.output_dim();
    let zero = || VladVector {
        values: vec![0.0; dim],
        valid: false,
    };
    if descriptors.is_empty() {
        return Ok(zero());
    }
    let acc = residual_accumulator(descriptors, &model.codebook)?;
    let rotated = match &model.rotation {
        Some(r) => r.apply(&acc),
        None => acc,
    };
    let mut values: Vec<f32> = rotated.iter().map(|&z| (z.signum() * z.abs().powf(POWER)) as f32).collect();
    if !l2_normalize(&mut values) {
        return Ok(zero());
    }
    Ok(VladVector { values, valid: true })
}
