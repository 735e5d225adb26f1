//! Stationary Matérn-3/2 Gaussian process baseline.
//!
//! Dense maximum-likelihood fit of `Z ~ N(0, K + s I)` with
//! `K(h) = sigma^2 (1 + sqrt(3) h / rho) exp(-sqrt(3) h / rho)`, intended
//! for the moderate sample sizes of the comparison studies.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::domain::{Dataset, LocationSet, PredictiveSummary};
use crate::error::{Error, Result};
use crate::siwgp::AdamState;

const LN_2PI: f64 = 1.8378770664093453;
const SQRT3: f64 = 1.7320508075688772;

/// Log-parameterised Matérn-3/2 hyperparameters plus noise variance.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MaternParams {
    pub log_sigma2: f64,
    pub log_rho: f64,
    pub log_noise: f64,
}

impl MaternParams {
    pub fn sigma2(&self) -> f64 {
        libm::exp(self.log_sigma2)
    }

    pub fn rho(&self) -> f64 {
        libm::exp(self.log_rho)
    }

    pub fn noise_var(&self) -> f64 {
        libm::exp(self.log_noise)
    }

    /// Data-driven start: sample variance, a quarter of the domain side,
    /// a tenth of the sample variance.
    pub fn init(data: &Dataset, domain_side: f64) -> Self {
        let n = data.len() as f64;
        let mean = data.z.sum() / n;
        let var = (data.z.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n).max(1e-12);
        Self {
            log_sigma2: libm::log(var),
            log_rho: libm::log(0.25 * domain_side),
            log_noise: libm::log(0.1 * var),
        }
    }
}

/// Matérn-3/2 correlation times `sigma2`.
#[inline]
pub fn matern32(h: f64, sigma2: f64, rho: f64) -> f64 {
    let t = SQRT3 * h / rho;
    sigma2 * (1.0 + t) * libm::exp(-t)
}

fn pairwise_dists(locs: &LocationSet) -> DMatrix<f64> {
    let n = locs.len();
    let d = locs.dim();
    let c = locs.coords();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut q = 0.0;
            for k in 0..d {
                let diff = c[(i, k)] - c[(j, k)];
                q += diff * diff;
            }
            let h = libm::sqrt(q);
            out[(i, j)] = h;
            out[(j, i)] = h;
        }
    }
    out
}

/// Log-likelihood and gradient in the three log-parameters.
pub fn gp_loglik_grad(
    dists: &DMatrix<f64>,
    z: &DVector<f64>,
    p: &MaternParams,
) -> Result<(f64, [f64; 3])> {
    let n = z.len();
    let s2 = p.sigma2();
    let rho = p.rho();
    let s = p.noise_var();
    let kern = dists.map(|h| matern32(h, s2, rho));
    let mut cov = kern.clone();
    for i in 0..n {
        cov[(i, i)] += s;
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::IllConditioned("Matérn covariance not positive definite".into()))?;
    let logdet = 2.0 * chol.l().diagonal().map(libm::log).sum();
    let alpha = chol.solve(z);
    let ll = -(n as f64 / 2.0) * LN_2PI - 0.5 * logdet - 0.5 * z.dot(&alpha);

    let kinv = chol.inverse();
    // d K / d log rho = sigma2 c^2 h^2 exp(-c h), c = sqrt(3)/rho
    let c = SQRT3 / rho;
    let d_rho = dists.map(|h| s2 * c * c * h * h * libm::exp(-c * h));
    let d_s2 = kern; // d K / d log sigma2
    let grad_of = |d: &DMatrix<f64>| -> f64 {
        let da = d * &alpha;
        0.5 * (alpha.dot(&da) - kinv.zip_fold(d, 0.0, |acc, ki, di| acc + ki * di))
    };
    let g_s2 = grad_of(&d_s2);
    let g_rho = grad_of(&d_rho);
    // d K / d log s = s I
    let g_noise = 0.5 * s * (alpha.dot(&alpha) - kinv.trace());
    Ok((ll, [g_s2, g_rho, g_noise]))
}

#[derive(Debug, Clone)]
pub struct GpFit {
    pub params: MaternParams,
    pub trace: Vec<f64>,
    pub final_ll: f64,
}

/// Adam maximum-likelihood fit of the three hyperparameters.
pub fn gp_fit_ml(data: &Dataset, domain_side: f64, steps: usize, lr: f64) -> Result<GpFit> {
    let dists = pairwise_dists(&data.locations);
    let mut p = MaternParams::init(data, domain_side);
    let mut vec_p = [p.log_sigma2, p.log_rho, p.log_noise];
    let mut adam = AdamState::new(3);
    let lrs = [lr; 3];
    let mut trace = Vec::with_capacity(steps);
    let (mut best_ll, _) = gp_loglik_grad(&dists, &data.z, &p)?;
    let mut best = vec_p;
    let mut grad = gp_loglik_grad(&dists, &data.z, &p)?.1;
    for _ in 0..steps {
        let prev = vec_p;
        adam.step(&mut vec_p, &grad, &lrs);
        p = MaternParams {
            log_sigma2: vec_p[0],
            log_rho: vec_p[1],
            log_noise: vec_p[2],
        };
        match gp_loglik_grad(&dists, &data.z, &p) {
            Ok((ll, g)) => {
                if ll > best_ll {
                    best_ll = ll;
                    best = vec_p;
                }
                trace.push(ll);
                grad = g;
            }
            Err(Error::IllConditioned(_)) => {
                vec_p = prev;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(GpFit {
        params: MaternParams {
            log_sigma2: best[0],
            log_rho: best[1],
            log_noise: best[2],
        },
        trace,
        final_ll: best_ll,
    })
}

/// Gaussian predictive distribution of the latent process at new locations.
/// Predictive variances are clipped at zero (they can go fractionally
/// negative through round-off).
pub fn gp_predict(
    data: &Dataset,
    p: &MaternParams,
    pred: &LocationSet,
) -> Result<PredictiveSummary> {
    if pred.dim() != data.locations.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.locations.dim(),
            got: pred.dim(),
        });
    }
    let n = data.len();
    let s2 = p.sigma2();
    let rho = p.rho();
    let dists = pairwise_dists(&data.locations);
    let mut cov = dists.map(|h| matern32(h, s2, rho));
    for i in 0..n {
        cov[(i, i)] += p.noise_var();
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::IllConditioned("Matérn covariance not positive definite".into()))?;
    let alpha = chol.solve(&data.z);

    let d = data.locations.dim();
    let dc = data.locations.coords();
    let pc = pred.coords();
    let mut mean = Vec::with_capacity(pred.len());
    let mut sd = Vec::with_capacity(pred.len());
    let mut kstar = DVector::zeros(n);
    for i in 0..pred.len() {
        for j in 0..n {
            let mut q = 0.0;
            for k in 0..d {
                let diff = pc[(i, k)] - dc[(j, k)];
                q += diff * diff;
            }
            kstar[j] = matern32(libm::sqrt(q), s2, rho);
        }
        mean.push(kstar.dot(&alpha));
        let sol = chol.solve(&kstar);
        let var = s2 - kstar.dot(&sol);
        sd.push(libm::sqrt(var.max(0.0)));
    }
    Ok(PredictiveSummary::from_gaussian(mean, sd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use approx::assert_relative_eq;

    fn matern_data(n: usize, seed: u64) -> Dataset {
        // exact draw from the model via dense Cholesky
        let mut rng = RngStream::new(seed);
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let locs = LocationSet::from_1d(&xs).unwrap();
        let dists = pairwise_dists(&locs);
        let mut cov = dists.map(|h| matern32(h, 1.0, 0.2));
        for i in 0..n {
            cov[(i, i)] += 1e-10;
        }
        let l = cov.cholesky().unwrap();
        let e = DVector::from_fn(n, |_, _| rng.next_gaussian());
        let y = l.l() * e;
        let z = DVector::from_fn(n, |i, _| y[i] + 0.1 * rng.next_gaussian());
        Dataset::new(locs, z, 0.01, seed).unwrap()
    }

    #[test]
    fn matern_values() {
        assert_relative_eq!(matern32(0.0, 2.0, 0.3), 2.0);
        let h = 0.3;
        let t = SQRT3;
        assert_relative_eq!(
            matern32(h, 1.0, 0.3),
            (1.0 + t) * libm::exp(-t),
            max_relative = 1e-12
        );
        assert!(matern32(10.0, 1.0, 0.1) < 1e-10);
    }

    #[test]
    fn loglik_gradient_matches_fd() {
        let data = matern_data(30, 5);
        let dists = pairwise_dists(&data.locations);
        let p = MaternParams {
            log_sigma2: 0.2,
            log_rho: -1.4,
            log_noise: -3.5,
        };
        let (_, g) = gp_loglik_grad(&dists, &data.z, &p).unwrap();
        let h = 1e-6;
        let fields: [fn(&mut MaternParams) -> &mut f64; 3] = [
            |p| &mut p.log_sigma2,
            |p| &mut p.log_rho,
            |p| &mut p.log_noise,
        ];
        for (idx, f) in fields.iter().enumerate() {
            let mut pp = p;
            *f(&mut pp) += h;
            let up = gp_loglik_grad(&dists, &data.z, &pp).unwrap().0;
            *f(&mut pp) -= 2.0 * h;
            let dn = gp_loglik_grad(&dists, &data.z, &pp).unwrap().0;
            let fd = (up - dn) / (2.0 * h);
            assert_relative_eq!(g[idx], fd, max_relative = 1e-5, epsilon = 1e-7);
        }
    }

    #[test]
    fn fit_improves_and_recovers_roughly() {
        let data = matern_data(120, 11);
        let fit = gp_fit_ml(&data, 1.0, 150, 0.05).unwrap();
        assert!(fit.final_ll >= fit.trace[0]);
        // order-of-magnitude recovery of the generating parameters
        assert!(fit.params.sigma2() > 0.2 && fit.params.sigma2() < 5.0);
        assert!(fit.params.rho() > 0.03 && fit.params.rho() < 1.0);
        assert!(fit.params.noise_var() > 1e-4 && fit.params.noise_var() < 0.2);
    }

    #[test]
    fn predict_interpolates() {
        let data = matern_data(100, 21);
        let fit = gp_fit_ml(&data, 1.0, 100, 0.05).unwrap();
        // predict at the data locations: close to the observations
        let summary = gp_predict(&data, &fit.params, &data.locations).unwrap();
        let z: Vec<f64> = data.z.iter().copied().collect();
        let err = crate::scoring::rmspe(&z, &summary.mean).unwrap();
        assert!(err < 0.25, "rmspe {err}");
        assert!(summary.sd.iter().all(|&s| s.is_finite() && s >= 0.0));
    }

    #[test]
    fn predictive_variance_nonnegative_at_data() {
        // tiny noise makes the predictive variance at data locations tend
        // to zero; the clip must keep it nonnegative
        let data = matern_data(40, 33);
        let p = MaternParams {
            log_sigma2: 0.0,
            log_rho: libm::log(0.2),
            log_noise: libm::log(1e-9),
        };
        let summary = gp_predict(&data, &p, &data.locations).unwrap();
        assert!(summary.sd.iter().all(|&s| s >= 0.0));
    }
}
