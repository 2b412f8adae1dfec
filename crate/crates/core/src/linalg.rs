//! Covariance and eigen-decomposition helpers (backed by nalgebra).

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Principal axes of a sample set.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Eigenvalues in descending order.
    pub eigenvalues: Vec<f64>,
    /// Row `k` is the unit eigenvector of `eigenvalues[k]`.
    pub axes: DMatrix<f64>,
}

/// Sample mean and biased (divide-by-n) covariance of equal-length vectors.
pub fn mean_and_covariance(samples: &[Vec<f32>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let first = samples.first().ok_or_else(|| Error::Empty("no training samples".into()))?;
    let d = first.len();
    if d == 0 {
        return Err(Error::Empty("zero-length samples".into()));
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(Error::Dimension {
            expected: d,
            got: bad.len(),
        });
    }
    let n = samples.len();
    let mut mean = vec![0f64; d];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| samples[i][j] as f64 - mean[j]);
    let cov = (centered.transpose() * &centered) / n as f64;
    Ok((mean, cov))
}

pub fn pca(samples: &[Vec<f32>]) -> Result<Pca> {
    let (mean, cov) = mean_and_covariance(samples)?;
    let d = mean.len();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let mut axes = DMatrix::zeros(d, d);
    for (row, &k) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        // Fix the sign so the largest-magnitude component is positive.
        let pivot = (0..d).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a))).unwrap();
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            axes[(row, j)] = sign * v[j];
        }
    }
    Ok(Pca { mean, eigenvalues, axes })
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit length in place; returns `false` (leaving zeros) for a zero vector.
///
/// Entries are first divided by the largest magnitude, so inputs that are
/// exact positive multiples of each other normalize to identical bits.
pub fn l2_normalize(v: &mut [f32]) -> bool {
    let m = v.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs()));
    if !(m > 0.0 && m.is_finite()) || v.iter().any(|x| !x.is_finite()) {
        v.iter_mut().for_each(|x| *x = 0.0);
        return false;
    }
    let y: Vec<f64> = v.iter().map(|&x| x as f64 / m).collect();
    let n = y.iter().map(|t| t * t).sum::<f64>().sqrt();
    for (x, t) in v.iter_mut().zip(&y) {
        *x = (t / n) as f32;
    }
    true
}
