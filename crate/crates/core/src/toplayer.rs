//! Low-rank process layer on the warped domain.
//!
//! The process is `Y(s) = sum_j w_j a_j(f(s))` with compactly supported
//! bisquare basis functions `a_j(u) = (1 - (||u - gamma_j|| / delta_j)^2)^2`
//! on `||u - gamma_j|| <= delta_j`, centroids on a regular grid over the unit
//! hypercube, and Gaussian weights with exponential covariance
//! `Sigma[j,j'] = sigma^2 exp(-||gamma_j - gamma_j'|| / ell)` (plus a small
//! diagonal jitter). Because the bisquare is `C^1` at the support boundary,
//! differentiating only the stored nonzeros of the basis matrix still yields
//! the exact gradient.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative diagonal jitter added to the weight covariance.
pub const COV_JITTER: f64 = 1e-8;

/// Aperture multiplier: each basis radius is 1.5 grid spacings.
pub const APERTURE_FACTOR: f64 = 1.5;

/// Basis centroids, apertures and the weight-covariance hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProcessLayer {
    /// `r x d` centroid coordinates on the unit hypercube.
    pub centroids: DMatrix<f64>,
    /// Support radius of each basis function.
    pub apertures: Vec<f64>,
    pub log_sigma2: f64,
    pub log_ell: f64,
}

impl ProcessLayer {
    /// Regular grid of `per_dim` centroids per dimension over `[0, 1]^d`
    /// (endpoints included, row-major in 2D), aperture 1.5x the spacing.
    pub fn new(per_dim: usize, dim: usize) -> Self {
        assert!(per_dim >= 2);
        assert!(dim == 1 || dim == 2);
        let spacing = 1.0 / (per_dim - 1) as f64;
        let aperture = APERTURE_FACTOR * spacing;
        let centroids = if dim == 1 {
            DMatrix::from_fn(per_dim, 1, |i, _| i as f64 * spacing)
        } else {
            let mut m = DMatrix::zeros(per_dim * per_dim, 2);
            for row in 0..per_dim {
                for col in 0..per_dim {
                    m[(row * per_dim + col, 0)] = col as f64 * spacing;
                    m[(row * per_dim + col, 1)] = row as f64 * spacing;
                }
            }
            m
        };
        let r = centroids.nrows();
        Self {
            centroids,
            apertures: vec![aperture; r],
            log_sigma2: 0.0,
            log_ell: libm::log(0.25),
        }
    }

    pub fn rank(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn sigma2(&self) -> f64 {
        libm::exp(self.log_sigma2)
    }

    pub fn ell(&self) -> f64 {
        libm::exp(self.log_ell)
    }

    /// Pairwise centroid distances (`r x r`).
    pub fn centroid_distances(&self) -> DMatrix<f64> {
        let r = self.rank();
        let d = self.dim();
        let mut out = DMatrix::zeros(r, r);
        for i in 0..r {
            for j in (i + 1)..r {
                let mut q = 0.0;
                for k in 0..d {
                    let diff = self.centroids[(i, k)] - self.centroids[(j, k)];
                    q += diff * diff;
                }
                let dist = libm::sqrt(q);
                out[(i, j)] = dist;
                out[(j, i)] = dist;
            }
        }
        out
    }

    /// Weight covariance `sigma^2 exp(-dist/ell)` with diagonal jitter
    /// `1e-8 sigma^2`.
    pub fn weight_cov_from_dist(&self, dist: &DMatrix<f64>) -> DMatrix<f64> {
        let s2 = self.sigma2();
        let ell = self.ell();
        let mut out = dist.map(|h| s2 * libm::exp(-h / ell));
        for i in 0..out.nrows() {
            out[(i, i)] += COV_JITTER * s2;
        }
        out
    }

    pub fn weight_cov(&self) -> DMatrix<f64> {
        self.weight_cov_from_dist(&self.centroid_distances())
    }

    /// `d Sigma / d log sigma^2` is `Sigma` itself (jitter included).
    pub fn dcov_dlogsigma2(&self, cov: &DMatrix<f64>) -> DMatrix<f64> {
        cov.clone()
    }

    /// `d Sigma / d log ell = sigma^2 exp(-h/ell) (h/ell)`, zero diagonal.
    pub fn dcov_dlogell(&self, dist: &DMatrix<f64>) -> DMatrix<f64> {
        let s2 = self.sigma2();
        let ell = self.ell();
        dist.map(|h| s2 * libm::exp(-h / ell) * (h / ell))
    }
}

/// Sparse row-major basis matrix: `rows[i]` holds the nonzero `(j, a_ij)`
/// pairs of observation `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub r: usize,
}

impl BasisMatrix {
    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.rows.len(), self.r);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                a[(i, j)] = v;
            }
        }
        a
    }

    /// `A' A` (`r x r`).
    pub fn gram(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.r, self.r);
        for row in &self.rows {
            for &(j, vj) in row {
                for &(k, vk) in row {
                    g[(j, k)] += vj * vk;
                }
            }
        }
        g
    }

    /// `A' v` for a length-N vector.
    pub fn tr_mul_vec(&self, v: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
        let mut out = nalgebra::DVector::zeros(self.r);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, a) in row {
                out[j] += a * v[i];
            }
        }
        out
    }

    /// `A w` for a length-r vector.
    pub fn mul_vec(&self, w: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
        let mut out = nalgebra::DVector::zeros(self.rows.len());
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, a) in row {
                out[i] += a * w[j];
            }
        }
        out
    }
}

/// Basis values together with `d a_ij / d u_i` for every stored nonzero
/// (second component zero in 1D), aligned entry-for-entry with `basis.rows`.
#[derive(Debug, Clone)]
pub struct BasisEval {
    pub basis: BasisMatrix,
    pub grads: Vec<Vec<[f64; 2]>>,
}

/// Evaluate the bisquare basis at warped locations `u` (`N x d`).
pub fn basis_matrix(layer: &ProcessLayer, u: &DMatrix<f64>) -> Result<BasisMatrix> {
    Ok(basis_eval_impl(layer, u, false)?.basis)
}

/// Evaluate values and location-gradients in one pass.
pub fn basis_eval(layer: &ProcessLayer, u: &DMatrix<f64>) -> Result<BasisEval> {
    basis_eval_impl(layer, u, true)
}

fn basis_eval_impl(layer: &ProcessLayer, u: &DMatrix<f64>, want_grads: bool) -> Result<BasisEval> {
    let d = layer.dim();
    if u.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: u.ncols(),
        });
    }
    let n = u.nrows();
    let r = layer.rank();
    let mut rows = Vec::with_capacity(n);
    let mut grads = Vec::with_capacity(if want_grads { n } else { 0 });
    for i in 0..n {
        let mut row = Vec::new();
        let mut grow = Vec::new();
        for j in 0..r {
            let delta = layer.apertures[j];
            let mut q = 0.0;
            let mut diff = [0.0; 2];
            for k in 0..d {
                diff[k] = u[(i, k)] - layer.centroids[(j, k)];
                q += diff[k] * diff[k];
            }
            let d2 = delta * delta;
            if q < d2 {
                let t = 1.0 - q / d2;
                row.push((j, t * t));
                if want_grads {
                    // d/du (1 - q/d2)^2 = -4 (1 - q/d2) (u - gamma) / d2
                    let c = -4.0 * t / d2;
                    grow.push([c * diff[0], c * diff[1]]);
                }
            }
        }
        rows.push(row);
        if want_grads {
            grads.push(grow);
        }
    }
    Ok(BasisEval {
        basis: BasisMatrix { rows, r },
        grads,
    })
}

/// Scalar bisquare, used by oracles and simulators.
pub fn bisquare(dist: f64, aperture: f64) -> f64 {
    let t = dist / aperture;
    if t < 1.0 {
        let v = 1.0 - t * t;
        v * v
    } else {
        0.0
    }
}
