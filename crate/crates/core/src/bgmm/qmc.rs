//! Randomly shifted Halton point set on the unit cube.

use nalgebra::DMatrix;
use rand::Rng;

use super::normal::std_quantile;

/// Default number of low-discrepancy points (2^14).
pub const DEFAULT_QMC_POINTS: usize = 1 << 14;

#[derive(Debug, Clone)]
pub struct QmcRule {
    dim: usize,
    len: usize,
    /// Row-major `len x dim` points in (0, 1).
    points: Vec<f64>,
    /// Standard-normal images of `points`.
    normals: Vec<f64>,
    normal_mean: Vec<f64>,
    /// Population covariance of `normals`.
    normal_cov: DMatrix<f64>,
}

fn primes(count: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(count);
    let mut n = 2u64;
    while out.len() < count {
        if out.iter().take_while(|&&p| p * p <= n).all(|&p| n % p != 0) {
            out.push(n);
        }
        n += 1;
    }
    out
}

fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while index > 0 {
        r += (index % base) as f64 * f;
        index /= base;
        f *= inv;
    }
    r
}

impl QmcRule {
    /// Halton points `1..=len` in `dim` dimensions with a Cranley-Patterson
    /// rotation drawn from `seed`.
    pub fn new(dim: usize, len: usize, seed: u64) -> Self {
        let bases = primes(dim);
        let mut rng = crate::rng::stream(seed, "qmc-shift", 0);
        let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        let eps = f64::EPSILON;
        let mut points = Vec::with_capacity(len * dim);
        for i in 0..len {
            for (j, &b) in bases.iter().enumerate() {
                let u = (radical_inverse(i as u64 + 1, b) + shift[j]).fract();
                points.push(u.clamp(eps, 1.0 - eps));
            }
        }
        let normals: Vec<f64> = points.iter().map(|&u| std_quantile(u)).collect();
        let mut normal_mean = vec![0.0; dim];
        for row in normals.chunks(dim.max(1)) {
            for (m, z) in normal_mean.iter_mut().zip(row) {
                *m += z;
            }
        }
        normal_mean.iter_mut().for_each(|m| *m /= len as f64);
        let mut normal_cov = DMatrix::zeros(dim, dim);
        for row in normals.chunks(dim.max(1)) {
            for a in 0..dim {
                let da = row[a] - normal_mean[a];
                for b in 0..=a {
                    normal_cov[(a, b)] += da * (row[b] - normal_mean[b]);
                }
            }
        }
        for a in 0..dim {
            for b in 0..=a {
                let v = normal_cov[(a, b)] / len as f64;
                normal_cov[(a, b)] = v;
                normal_cov[(b, a)] = v;
            }
        }
        Self {
            dim,
            len,
            points,
            normals,
            normal_mean,
            normal_cov,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn normal(&self, i: usize) -> &[f64] {
        &self.normals[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn normal_mean(&self) -> &[f64] {
        &self.normal_mean
    }

    pub(crate) fn normal_cov(&self) -> &DMatrix<f64> {
        &self.normal_cov
    }
}
