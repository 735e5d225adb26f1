//! Maximum-likelihood fitting of the warped low-rank process.
//!
//! With basis matrix `A` (evaluated at the warped data locations), weight
//! covariance `Sigma` and noise variance `s`, the observations are
//! `Z ~ N(0, A Sigma A' + s I)`. The marginal log-likelihood is evaluated in
//! `O(N r^2 + r^3)` via the information matrix `M = A'A/s + Sigma^{-1}`:
//!
//! `ll = -(N/2) log 2 pi - (N/2) log s - (1/2) log|Sigma| - (1/2) log|M|
//!       - (1/2) [Z'Z/s - b' M^{-1} b / s^2]`,  `b = A'Z`.
//!
//! Gradients with respect to the basis entries, the covariance
//! hyperparameters and the noise variance are exact and propagate through
//! the warp by the chain rule. All parameters are updated by Adam in three
//! stages: warp weights, then covariance/noise hyperparameters, then
//! everything jointly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::domain::{Dataset, LocationSet, PredictiveSummary};
use crate::error::{Error, Result};
use crate::toplayer::{basis_eval, basis_matrix, BasisMatrix, ProcessLayer};
use crate::warp::{backprop, forward_trace, LayerGrad, WarpStack};

const LN_2PI: f64 = 1.8378770664093453;

/// Adam optimiser state for a fixed-length parameter vector (maximisation).
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One ascent step; entries with zero learning rate are left untouched
    /// (their moments do not accumulate either).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        assert_eq!(lr.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - libm::pow(self.beta1, self.t as f64);
        let b2t = 1.0 - libm::pow(self.beta2, self.t as f64);
        for i in 0..params.len() {
            if lr[i] == 0.0 {
                continue;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] += lr[i] * mhat / (libm::sqrt(vhat) + self.eps);
        }
    }
}

/// Marginal log-likelihood together with the factors needed for gradients
/// and prediction.
#[derive(Debug, Clone)]
pub struct LikEval {
    pub ll: f64,
    /// Posterior mean of the basis weights given Z.
    pub mu: DVector<f64>,
    /// Posterior covariance `M^{-1}` of the basis weights.
    pub post_cov: DMatrix<f64>,
    /// Residual precision vector `alpha = (Z - A mu)/s`.
    pub alpha: DVector<f64>,
    /// `u = A' alpha`.
    pub u: DVector<f64>,
    /// `Sigma u`.
    pub sigma_u: DVector<f64>,
    /// `Sigma` itself.
    pub sigma: DMatrix<f64>,
    /// `W2 = M^{-1} (A'A) Sigma`.
    pub w2: DMatrix<f64>,
    /// `B = (A'A)/s - (A'A) M^{-1} (A'A) / s^2`.
    pub b_mat: DMatrix<f64>,
    /// `tr(M^{-1} A'A)`.
    pub tr_pg: f64,
}

/// Evaluate the marginal log-likelihood and its gradient factors.
pub fn marginal_loglik(
    a: &BasisMatrix,
    layer: &ProcessLayer,
    dist: &DMatrix<f64>,
    noise_var: f64,
    z: &DVector<f64>,
) -> Result<LikEval> {
    if !(noise_var > 0.0) || !noise_var.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise variance must be positive and finite, got {noise_var}"
        )));
    }
    let n = z.len();
    if a.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: a.nrows(),
        });
    }
    let s = noise_var;
    let sigma = layer.weight_cov_from_dist(dist);
    let chol_sigma = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::IllConditioned("weight covariance not positive definite".into()))?;
    let logdet_sigma = 2.0 * chol_sigma.l().diagonal().map(libm::log).sum();
    let sigma_inv = chol_sigma.inverse();

    let g = a.gram();
    let b = a.tr_mul_vec(z);
    let m = &g / s + &sigma_inv;
    let chol_m = m
        .cholesky()
        .ok_or_else(|| Error::IllConditioned("information matrix not positive definite".into()))?;
    let logdet_m = 2.0 * chol_m.l().diagonal().map(libm::log).sum();
    let post_cov = chol_m.inverse();
    let mu = &post_cov * &b / s;

    let zz = z.dot(z);
    let quad = zz / s - b.dot(&mu) / s;
    let ll = -(n as f64 / 2.0) * LN_2PI
        - (n as f64 / 2.0) * libm::log(s)
        - 0.5 * logdet_sigma
        - 0.5 * logdet_m
        - 0.5 * quad;

    let amu = a.mul_vec(&mu);
    let alpha = (z - amu) / s;
    let u = a.tr_mul_vec(&alpha);
    let sigma_u = &sigma * &u;
    let k2 = &post_cov * &g; // M^{-1} G
    let tr_pg = post_cov.zip_fold(&g, 0.0, |acc, p, gg| acc + p * gg);
    let w2 = &k2 * &sigma;
    let b_mat = &g / s - (&g * &k2) / (s * s);

    Ok(LikEval {
        ll,
        mu,
        post_cov,
        alpha,
        u,
        sigma_u,
        sigma,
        w2,
        b_mat,
        tr_pg,
    })
}

/// `d ll / d a_ij` at the stored nonzeros of `A` only; exact because the
/// bisquare basis is `C^1` at its support boundary, so entries leaving or
/// entering the pattern have zero derivative.
pub fn grad_wrt_basis(a: &BasisMatrix, ev: &LikEval, noise_var: f64) -> Vec<Vec<f64>> {
    let s = noise_var;
    let mut out = Vec::with_capacity(a.rows.len());
    for (i, row) in a.rows.iter().enumerate() {
        let mut grow = Vec::with_capacity(row.len());
        for &(j, _) in row {
            // alpha (Sigma u)' - A Sigma / s + A W2 / s^2, evaluated at (i, j)
            let mut asig = 0.0;
            let mut aw2 = 0.0;
            for &(k, aik) in row {
                asig += aik * ev.sigma[(k, j)];
                aw2 += aik * ev.w2[(k, j)];
            }
            grow.push(ev.alpha[i] * ev.sigma_u[j] - asig / s + aw2 / (s * s));
        }
        out.push(grow);
    }
    out
}

/// Gradients of the marginal log-likelihood in the log-hyperparameters.
pub fn grad_hypers(
    ev: &LikEval,
    layer: &ProcessLayer,
    dist: &DMatrix<f64>,
    noise_var: f64,
    n: usize,
) -> (f64, f64, f64) {
    let s = noise_var;
    // d ll / d theta = (1/2)[u' D u - sum(B .* D)] for D = d Sigma / d theta
    let d_s2 = layer.dcov_dlogsigma2(&ev.sigma);
    let d_ell = layer.dcov_dlogell(dist);
    let quad_form = |d: &DMatrix<f64>| -> f64 {
        let du = d * &ev.u;
        0.5 * (ev.u.dot(&du) - ev.b_mat.zip_fold(d, 0.0, |acc, b, dd| acc + b * dd))
    };
    let g_logs2 = quad_form(&d_s2);
    let g_logell = quad_form(&d_ell);
    // d ll / d s = (1/2)(alpha'alpha - tr C^{-1}); tr C^{-1} = N/s - tr(PG)/s^2
    let tr_cinv = n as f64 / s - ev.tr_pg / (s * s);
    let g_noise = 0.5 * (ev.alpha.dot(&ev.alpha) - tr_cinv) * s; // chain to log s
    (g_logs2, g_logell, g_noise)
}

/// Warp stack + process layer + noise, the full maximum-likelihood model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SiwgpModel {
    pub stack: WarpStack,
    pub top: ProcessLayer,
    pub log_noise: f64,
}

impl SiwgpModel {
    pub fn noise_var(&self) -> f64 {
        libm::exp(self.log_noise)
    }

    /// Data-driven starting hyperparameters: noise a tenth of the sample
    /// variance, marginal variance the sample variance, range a quarter of
    /// the longest domain side.
    pub fn init_hypers(&mut self, data: &Dataset, domain_side: f64) {
        let n = data.len() as f64;
        let mean = data.z.sum() / n;
        let var = data.z.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n;
        let var = var.max(1e-12);
        self.log_noise = libm::log(0.1 * var);
        self.top.log_sigma2 = libm::log(var);
        self.top.log_ell = libm::log(0.25 * domain_side);
    }

    /// Total number of free parameters (warp + 3 hyperparameters).
    pub fn n_params(&self) -> usize {
        self.stack.n_params() + 3
    }

    /// Flattened parameters: warp params, then `log sigma^2`, `log ell`,
    /// `log noise`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.stack.params();
        p.push(self.top.log_sigma2);
        p.push(self.top.log_ell);
        p.push(self.log_noise);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let nw = self.stack.n_params();
        self.stack.set_params(&p[..nw]);
        self.top.log_sigma2 = p[nw];
        self.top.log_ell = p[nw + 1];
        self.log_noise = p[nw + 2];
    }
}

/// Objective value and full parameter gradient, in the layout of
/// [`SiwgpModel::params`].
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub ll: f64,
    pub grad: Vec<f64>,
}

/// Marginal log-likelihood and its gradient in all model parameters.
pub fn siwgp_objective(model: &SiwgpModel, data: &Dataset) -> Result<ObjectiveEval> {
    let dist = model.top.centroid_distances();
    siwgp_objective_with_dist(model, data, &dist)
}

/// Same as [`siwgp_objective`] but with precomputed centroid distances.
pub fn siwgp_objective_with_dist(
    model: &SiwgpModel,
    data: &Dataset,
    dist: &DMatrix<f64>,
) -> Result<ObjectiveEval> {
    let s = model.noise_var();
    let trace = forward_trace(&model.stack, data.locations.coords())?;
    let warped = trace.data_output();
    let ev_basis = basis_eval(&model.top, &warped)?;
    let lik = marginal_loglik(&ev_basis.basis, &model.top, dist, s, &data.z)?;
    let ga = grad_wrt_basis(&ev_basis.basis, &lik, s);

    // chain basis-entry gradients into a cotangent on the warped locations
    let d = warped.ncols();
    let mut ct = DMatrix::zeros(warped.nrows(), d);
    for i in 0..warped.nrows() {
        for (idx, g) in ga[i].iter().enumerate() {
            for k in 0..d {
                ct[(i, k)] += g * ev_basis.grads[i][idx][k];
            }
        }
    }
    let layer_grads = backprop(&model.stack, &trace, &ct);
    let (g_s2, g_ell, g_noise) = grad_hypers(&lik, &model.top, dist, s, data.len());

    let mut grad = Vec::with_capacity(model.n_params());
    for lg in &layer_grads {
        grad.extend_from_slice(lg.as_slice());
    }
    grad.push(g_s2);
    grad.push(g_ell);
    grad.push(g_noise);
    Ok(ObjectiveEval { ll: lik.ll, grad })
}

/// Step counts for the three optimisation stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FitSchedule {
    /// Warp weights only.
    pub stage1: usize,
    /// Covariance + noise hyperparameters only.
    pub stage2: usize,
    /// Everything jointly.
    pub stage3: usize,
}

impl FitSchedule {
    pub fn uniform(steps: usize) -> Self {
        Self {
            stage1: steps,
            stage2: steps,
            stage3: steps,
        }
    }
}

/// Learning rates: slower for warp weights, faster for the top layer.
pub const LR_WARP: f64 = 0.1;
pub const LR_TOP: f64 = 0.05;

/// Consecutive failed (reverted) steps tolerated before aborting a stage.
pub const MAX_CONSECUTIVE_FAILURES: usize = 25;

#[derive(Debug, Clone)]
pub struct SiwgpFit {
    pub model: SiwgpModel,
    /// Objective value after each accepted step (stages concatenated).
    pub trace: Vec<f64>,
    pub initial_ll: f64,
    pub final_ll: f64,
    /// Steps skipped because the proposal left the admissible region.
    pub skipped_steps: usize,
}

/// Generic staged Adam ascent over a parameter vector. `eval` returns the
/// objective and gradient; `masks` lists the per-stage learning rates.
/// Infeasible proposals (invalid parameter / failed factorisation) are
/// reverted and skipped; the best parameters seen are returned.
pub(crate) fn staged_ascent<F>(
    params0: Vec<f64>,
    stages: &[(usize, Vec<f64>)],
    mut eval: F,
) -> Result<(Vec<f64>, Vec<f64>, f64, f64, usize)>
where
    F: FnMut(&[f64]) -> Result<ObjectiveEval>,
{
    let n = params0.len();
    let first = eval(&params0)?;
    let initial_ll = first.ll;
    let mut params = params0;
    let mut best_params = params.clone();
    let mut best_ll = initial_ll;
    let mut last = first;
    let mut trace = Vec::new();
    let mut skipped = 0usize;

    for (steps, lr) in stages {
        assert_eq!(lr.len(), n);
        let mut adam = AdamState::new(n);
        let mut failures = 0usize;
        let mut done = 0usize;
        while done < *steps {
            let prev = params.clone();
            adam.step(&mut params, &last.grad, lr);
            match eval(&params) {
                Ok(ev) => {
                    failures = 0;
                    if ev.ll > best_ll {
                        best_ll = ev.ll;
                        best_params = params.clone();
                    }
                    trace.push(ev.ll);
                    last = ev;
                    done += 1;
                }
                Err(Error::InvalidParameter(_))
                | Err(Error::IllConditioned(_))
                | Err(Error::DegenerateWarp { .. }) => {
                    params = prev;
                    skipped += 1;
                    failures += 1;
                    done += 1;
                    if failures >= MAX_CONSECUTIVE_FAILURES {
                        break;
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok((best_params, trace, initial_ll, best_ll, skipped))
}

/// Per-stage learning-rate vectors for a SIWGP model.
fn siwgp_stage_lrs(model: &SiwgpModel, schedule: &FitSchedule) -> Vec<(usize, Vec<f64>)> {
    let nw = model.stack.n_params();
    let n = model.n_params();
    let mut warp_only = vec![0.0; n];
    let mut top_only = vec![0.0; n];
    let mut joint = vec![0.0; n];
    for i in 0..nw {
        warp_only[i] = LR_WARP;
        joint[i] = LR_WARP;
    }
    for i in nw..n {
        top_only[i] = LR_TOP;
        joint[i] = LR_TOP;
    }
    vec![
        (schedule.stage1, warp_only),
        (schedule.stage2, top_only),
        (schedule.stage3, joint),
    ]
}

/// Staged maximum-likelihood fit.
pub fn fit_siwgp(model0: &SiwgpModel, data: &Dataset, schedule: &FitSchedule) -> Result<SiwgpFit> {
    let dist = model0.top.centroid_distances();
    let stages = siwgp_stage_lrs(model0, schedule);
    let mut scratch = model0.clone();
    let (best, trace, initial_ll, final_ll, skipped) =
        staged_ascent(model0.params(), &stages, |p| {
            scratch.set_params(p);
            siwgp_objective_with_dist(&scratch, data, &dist)
        })?;
    let mut model = model0.clone();
    model.set_params(&best);
    Ok(SiwgpFit {
        model,
        trace,
        initial_ll,
        final_ll,
        skipped_steps: skipped,
    })
}

/// Gaussian predictive summary of the latent process `Y` at new locations.
pub fn predict_siwgp(
    model: &SiwgpModel,
    data: &Dataset,
    pred: &LocationSet,
) -> Result<PredictiveSummary> {
    let dist = model.top.centroid_distances();
    let s = model.noise_var();
    let trace = forward_trace(&model.stack, data.locations.coords())?;
    let a = basis_matrix(&model.top, &trace.data_output())?;
    let lik = marginal_loglik(&a, &model.top, &dist, s, &data.z)?;

    let ptrace = forward_trace(&model.stack, pred.coords())?;
    let a_star = basis_matrix(&model.top, &ptrace.data_output())?;
    let mean = a_star.mul_vec(&lik.mu);
    let mut sd = Vec::with_capacity(pred.len());
    for row in &a_star.rows {
        let mut var = 0.0;
        for &(j, aj) in row {
            for &(k, ak) in row {
                var += aj * ak * lik.post_cov[(j, k)];
            }
        }
        sd.push(libm::sqrt(var.max(0.0)));
    }
    Ok(PredictiveSummary::from_gaussian(
        mean.iter().copied().collect(),
        sd,
    ))
}

/// Conditional log-likelihood `sum_j log N(z_j; a_j' w, s)` given weights.
pub fn conditional_loglik(a: &BasisMatrix, w: &DVector<f64>, noise_var: f64, z: &DVector<f64>) -> f64 {
    let fitted = a.mul_vec(w);
    let mut ll = 0.0;
    for i in 0..z.len() {
        let r = z[i] - fitted[i];
        ll += -0.5 * LN_2PI - 0.5 * libm::log(noise_var) - 0.5 * r * r / noise_var;
    }
    ll
}

/// Unbiased minibatch estimator of [`conditional_loglik`]: the batch sum
/// scaled by the number of batches `N / |batch|`.
pub fn minibatch_loglik_estimate(
    a: &BasisMatrix,
    w: &DVector<f64>,
    noise_var: f64,
    z: &DVector<f64>,
    batch: &[usize],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("minibatch must be nonempty".into()));
    }
    let n = z.len();
    let mut sum = 0.0;
    for &i in batch {
        if i >= n {
            return Err(Error::InvalidPartition(format!(
                "index {i} out of range for {n} observations"
            )));
        }
        let mut fit = 0.0;
        for &(j, aij) in &a.rows[i] {
            fit += aij * w[j];
        }
        let r = z[i] - fit;
        sum += -0.5 * LN_2PI - 0.5 * libm::log(noise_var) - 0.5 * r * r / noise_var;
    }
    Ok(sum * n as f64 / batch.len() as f64)
}

/// Split `0..n` into consecutive equal-sized batches; errors unless the
/// batch size divides `n`.
pub fn partition_indices(n: usize, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || n % batch_size != 0 {
        return Err(Error::InvalidPartition(format!(
            "batch size {batch_size} does not evenly divide {n}"
        )));
    }
    Ok((0..n / batch_size)
        .map(|b| (b * batch_size..(b + 1) * batch_size).collect())
        .collect())
}

// keep the enum import used in gradient flattening visible to rustdoc
#[allow(unused_imports)]
use LayerGrad as _LayerGradDoc;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::LocationSet;
    use crate::rng::RngStream;
    use crate::warp::{AwuLayer, Layer};
    use approx::assert_relative_eq;

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = RngStream::new(seed);
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let z = DVector::from_fn(n, |i, _| {
            libm::sin(6.0 * xs[i]) + 0.1 * rng.next_gaussian()
        });
        Dataset::new(LocationSet::from_1d(&xs).unwrap(), z, 0.01, seed).unwrap()
    }

    fn toy_model(data: &Dataset, n_sig: usize, r: usize) -> SiwgpModel {
        let knots = crate::domain::make_knots(data, 2000).unwrap();
        let stack = WarpStack::new(
            vec![Layer::Awu(AwuLayer::new(0, n_sig, 20.0, 0.0, 1.0))],
            knots,
        );
        let mut model = SiwgpModel {
            stack,
            top: ProcessLayer::new(r, 1),
            log_noise: 0.0,
        };
        model.init_hypers(data, 1.0);
        model
    }

    /// Dense-path oracle: log N(z; 0, A Sigma A' + s I) via a full N x N
    /// Cholesky, sharing nothing with the low-rank implementation.
    fn dense_loglik(a: &DMatrix<f64>, sigma: &DMatrix<f64>, s: f64, z: &DVector<f64>) -> f64 {
        let n = z.len();
        let mut c = a * sigma * a.transpose();
        for i in 0..n {
            c[(i, i)] += s;
        }
        let chol = c.cholesky().unwrap();
        let logdet = 2.0 * chol.l().diagonal().map(libm::log).sum();
        let sol = chol.solve(z);
        -(n as f64 / 2.0) * LN_2PI - 0.5 * logdet - 0.5 * z.dot(&sol)
    }

    #[test]
    fn marginal_loglik_matches_dense_oracle() {
        let mut rng = RngStream::new(101);
        for rep in 0..10 {
            let n = 40 + rep;
            let data = toy_data(n, 200 + rep as u64);
            let model = toy_model(&data, 5, 8);
            let dist = model.top.centroid_distances();
            let trace = forward_trace(&model.stack, data.locations.coords()).unwrap();
            let a = basis_matrix(&model.top, &trace.data_output()).unwrap();
            let s = 0.05 + 0.1 * rng.next_uniform();
            let lik = marginal_loglik(&a, &model.top, &dist, s, &data.z).unwrap();
            let dense = dense_loglik(
                &a.to_dense(),
                &model.top.weight_cov_from_dist(&dist),
                s,
                &data.z,
            );
            assert_relative_eq!(lik.ll, dense, max_relative = 1e-8);
        }
    }

    #[test]
    fn objective_gradient_matches_fd() {
        let data = toy_data(30, 7);
        let mut model = toy_model(&data, 4, 6);
        // perturb away from the symmetric initial point
        let mut rng = RngStream::new(8);
        let mut p = model.params();
        for v in p.iter_mut() {
            *v += 0.2 * rng.next_gaussian();
        }
        model.set_params(&p);

        let ev = siwgp_objective(&model, &data).unwrap();
        let h = 1e-5;
        for idx in 0..model.n_params() {
            let mut m2 = model.clone();
            let mut pp = p.clone();
            pp[idx] += h;
            m2.set_params(&pp);
            let up = siwgp_objective(&m2, &data).unwrap().ll;
            pp[idx] -= 2.0 * h;
            m2.set_params(&pp);
            let dn = siwgp_objective(&m2, &data).unwrap().ll;
            let fd = (up - dn) / (2.0 * h);
            let g = ev.grad[idx];
            let scale = g.abs().max(fd.abs());
            if scale > 1e-6 {
                assert!(
                    (g - fd).abs() / scale < 1e-4,
                    "param {idx}: analytic {g}, fd {fd}"
                );
            }
        }
    }

    #[test]
    fn adam_moves_only_active_params() {
        let mut adam = AdamState::new(3);
        let mut p = vec![1.0, 2.0, 3.0];
        adam.step(&mut p, &[1.0, 1.0, 1.0], &[0.1, 0.0, 0.1]);
        assert!(p[0] > 1.0);
        assert_eq!(p[1], 2.0);
        assert!(p[2] > 3.0);
    }

    #[test]
    fn adam_first_step_size_is_lr() {
        // with constant gradient the first step is ~lr in magnitude
        let mut adam = AdamState::new(1);
        let mut p = vec![0.0];
        adam.step(&mut p, &[42.0], &[0.05]);
        assert_relative_eq!(p[0], 0.05, max_relative = 1e-6);
    }

    #[test]
    fn fit_improves_objective() {
        let data = toy_data(60, 3);
        let model = toy_model(&data, 6, 10);
        let fit = fit_siwgp(&model, &data, &FitSchedule::uniform(30)).unwrap();
        assert!(fit.final_ll >= fit.initial_ll, "fit must not regress");
        assert!(fit.final_ll > fit.initial_ll + 1.0, "fit should improve");
        assert_eq!(fit.trace.len(), 90 - fit.skipped_steps.min(90));
    }

    #[test]
    fn predict_interpolates_smooth_signal() {
        let data = toy_data(80, 5);
        let model = toy_model(&data, 6, 14);
        let fit = fit_siwgp(&model, &data, &FitSchedule::uniform(50)).unwrap();
        let grid: Vec<f64> = (0..40).map(|i| 0.0125 + i as f64 / 41.0).collect();
        let pred_locs = LocationSet::from_1d(&grid).unwrap();
        let summary = predict_siwgp(&fit.model, &data, &pred_locs).unwrap();
        let truth: Vec<f64> = grid.iter().map(|&x| libm::sin(6.0 * x)).collect();
        let err = crate::scoring::rmspe(&truth, &summary.mean).unwrap();
        assert!(err < 0.15, "rmspe {err}");
        assert!(summary.sd.iter().all(|&s| s.is_finite() && s >= 0.0));
    }

    #[test]
    fn minibatch_estimator_averages_to_full() {
        let data = toy_data(100, 9);
        let model = toy_model(&data, 5, 8);
        let trace = forward_trace(&model.stack, data.locations.coords()).unwrap();
        let a = basis_matrix(&model.top, &trace.data_output()).unwrap();
        let mut rng = RngStream::new(4);
        let w = DVector::from_fn(a.r, |_, _| rng.next_gaussian());
        let s = 0.04;
        let full = conditional_loglik(&a, &w, s, &data.z);
        for bs in [2usize, 5, 10] {
            let parts = partition_indices(100, bs).unwrap();
            let avg: f64 = parts
                .iter()
                .map(|b| minibatch_loglik_estimate(&a, &w, s, &data.z, b).unwrap())
                .sum::<f64>()
                / parts.len() as f64;
            assert!((avg - full).abs() < 1e-10, "batch {bs}: {avg} vs {full}");
        }
    }

    #[test]
    fn partition_rejects_uneven_sizes() {
        assert!(partition_indices(100, 3).is_err());
        assert!(partition_indices(100, 0).is_err());
        assert_eq!(partition_indices(100, 10).unwrap().len(), 10);
    }

    #[test]
    fn invalid_noise_rejected() {
        let data = toy_data(20, 1);
        let model = toy_model(&data, 3, 5);
        let dist = model.top.centroid_distances();
        let trace = forward_trace(&model.stack, data.locations.coords()).unwrap();
        let a = basis_matrix(&model.top, &trace.data_output()).unwrap();
        assert!(marginal_loglik(&a, &model.top, &dist, 0.0, &data.z).is_err());
        assert!(marginal_loglik(&a, &model.top, &dist, -1.0, &data.z).is_err());
    }
}
