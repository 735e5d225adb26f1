//! Simulation harnesses: reference 1-d test processes, Matérn field draws
//! and draws from the warped low-rank model itself.

use nalgebra::{DMatrix, DVector};

use crate::domain::{Dataset, Domain, LocationSet};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::siwgp::SiwgpModel;
use crate::toplayer::basis_matrix;
use crate::warp::{forward_trace, Layer, WarpStack};

/// Piecewise-constant step process on `[-0.5, 0.5]`: `0.5` on
/// `[-0.2, 0.2]`, `-0.5` outside.
pub fn eval_y11(s: f64) -> f64 {
    if libm::fabs(s) > 0.2 {
        -0.5
    } else {
        0.5
    }
}

/// Sharply varying process on `[-0.5, 0.5]`: a smooth bump
/// `exp(4 + 5 / (2 s (10 s + 5)))` on `(-0.5, 0)`, a plateau at 1 on
/// `[0.2, 0.3]`, `-1` on `(0.3, 0.4]`, zero elsewhere.
pub fn eval_y12(s: f64) -> f64 {
    if s > -0.5 && s < 0.0 {
        libm::exp(4.0 + 5.0 / (2.0 * s * (10.0 * s + 5.0)))
    } else if (0.2..=0.3).contains(&s) {
        1.0
    } else if s > 0.3 && s <= 0.4 {
        -1.0
    } else {
        0.0
    }
}

/// Reference 1-d test processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TestProcess1d {
    /// Symmetric step ([`eval_y11`]).
    Step,
    /// Bump/plateau/jump mixture ([`eval_y12`]).
    Sharp,
}

impl TestProcess1d {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            TestProcess1d::Step => eval_y11(s),
            TestProcess1d::Sharp => eval_y12(s),
        }
    }

    pub fn domain(&self) -> Domain {
        Domain::new(&[-0.5], &[0.5]).unwrap()
    }
}

/// Uniform locations over a domain.
pub fn sample_uniform(domain: &Domain, n: usize, rng: &mut RngStream) -> Result<LocationSet> {
    if n == 0 {
        return Err(Error::EmptyInput("need n >= 1 locations".into()));
    }
    let d = domain.dim();
    let mut m = DMatrix::zeros(n, d);
    for i in 0..n {
        for k in 0..d {
            m[(i, k)] = domain.lower(k) + domain.side(k) * rng.next_uniform();
        }
    }
    LocationSet::new(m)
}

/// Noisy observations of a deterministic 1-d test process at uniform
/// locations.
pub fn simulate_1d(
    process: TestProcess1d,
    n: usize,
    noise_var: f64,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = RngStream::new(seed);
    let locs = sample_uniform(&process.domain(), n, &mut rng)?;
    let z = DVector::from_fn(n, |i, _| {
        process.eval(locs.coords()[(i, 0)]) + libm::sqrt(noise_var) * rng.next_gaussian()
    });
    Dataset::new(locs, z, noise_var, seed)
}

/// Exact draw of a Matérn-3/2 field at the given locations (dense
/// Cholesky with relative jitter `1e-8 sigma2`).
pub fn sample_matern_field(
    locs: &LocationSet,
    sigma2: f64,
    rho: f64,
    rng: &mut RngStream,
) -> Result<DVector<f64>> {
    let n = locs.len();
    let d = locs.dim();
    let c = locs.coords();
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut q = 0.0;
            for k in 0..d {
                let diff = c[(i, k)] - c[(j, k)];
                q += diff * diff;
            }
            let v = crate::baseline::matern32(libm::sqrt(q), sigma2, rho);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    for i in 0..n {
        cov[(i, i)] += 1e-8 * sigma2;
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::IllConditioned("Matérn field covariance not PD".into()))?;
    let e = DVector::from_fn(n, |_, _| rng.next_gaussian());
    Ok(chol.l() * e)
}

/// Additive Gaussian noise.
pub fn add_noise(y: &DVector<f64>, noise_var: f64, rng: &mut RngStream) -> DVector<f64> {
    let sd = libm::sqrt(noise_var);
    DVector::from_fn(y.len(), |i, _| y[i] + sd * rng.next_gaussian())
}

/// Latent draw `Y = A(f(S)) w`, `w ~ N(0, Sigma)`, from a warped low-rank
/// model at the given locations.
pub fn draw_siwgp(
    model: &SiwgpModel,
    locs: &LocationSet,
    rng: &mut RngStream,
) -> Result<DVector<f64>> {
    let trace = forward_trace(&model.stack, locs.coords())?;
    let a = basis_matrix(&model.top, &trace.data_output())?;
    let sigma = model.top.weight_cov();
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::IllConditioned("weight covariance not PD".into()))?;
    let e = DVector::from_fn(a.r, |_, _| rng.next_gaussian());
    let w = chol.l() * e;
    Ok(a.mul_vec(&w))
}

/// Randomise a stack's transformed weights into a nonstationary but
/// admissible configuration: AWU and RBF transformed weights are drawn
/// from the same Gaussian priors used for variational inference
/// (injectivity is then automatic), and Möbius coefficients are standard
/// normal, redrawn until the pole clears an inflated unit square around
/// the domain the layer acts on.
pub fn randomize_stack_weights(stack: &mut WarpStack, rng: &mut RngStream) {
    use crate::sdsp::{PRIOR_MEAN_AWU_LINEAR, PRIOR_MEAN_AWU_SIGMOID, PRIOR_MEAN_RBF, PRIOR_VAR};
    let prior_sd = libm::sqrt(PRIOR_VAR);
    for layer in stack.layers.iter_mut() {
        match layer {
            Layer::Awu(l) => {
                l.tweights[0] = PRIOR_MEAN_AWU_LINEAR + prior_sd * rng.next_gaussian();
                for t in l.tweights.iter_mut().skip(1) {
                    *t = PRIOR_MEAN_AWU_SIGMOID + prior_sd * rng.next_gaussian();
                }
            }
            Layer::Rbf(l) => {
                l.tweight = PRIOR_MEAN_RBF + prior_sd * rng.next_gaussian();
            }
            Layer::Mobius(l) => {
                // redraw until the pole clears an inflated unit square;
                // the margin keeps the layer admissible even for inputs
                // that fall somewhat outside the rescaled hypercube
                // (evaluation points beyond the knot hull land there)
                for _ in 0..1000 {
                    for v in l.a.iter_mut() {
                        *v = rng.next_gaussian();
                    }
                    let clear = match l.pole() {
                        Some(p) => !(p.re >= -0.25 && p.re <= 1.25 && p.im >= -0.25 && p.im <= 1.25),
                        None => true,
                    };
                    if clear {
                        break;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::make_knots;
    use crate::toplayer::ProcessLayer;
    use alloc::vec::Vec;
    use approx::assert_relative_eq;

    #[test]
    fn y11_values() {
        assert_relative_eq!(eval_y11(0.0), 0.5);
        assert_relative_eq!(eval_y11(0.2), 0.5);
        assert_relative_eq!(eval_y11(0.21), -0.5);
        assert_relative_eq!(eval_y11(-0.4), -0.5);
    }

    #[test]
    fn y12_values() {
        // interior of the bump: 2 s (10 s + 5) = -1.25 at s = -0.25
        assert_relative_eq!(eval_y12(-0.25), 1.0, max_relative = 1e-12);
        // bump vanishes at its edges
        assert!(eval_y12(-0.499).abs() < 1e-10);
        assert!(eval_y12(-0.001).abs() < 1e-10);
        assert_relative_eq!(eval_y12(0.25), 1.0);
        assert_relative_eq!(eval_y12(0.35), -1.0);
        assert_relative_eq!(eval_y12(0.45), 0.0);
        assert_relative_eq!(eval_y12(0.1), 0.0);
        assert_relative_eq!(eval_y12(0.5), 0.0);
    }

    #[test]
    fn simulate_1d_reproducible() {
        let a = simulate_1d(TestProcess1d::Step, 100, 0.01, 5).unwrap();
        let b = simulate_1d(TestProcess1d::Step, 100, 0.01, 5).unwrap();
        assert_eq!(a.z, b.z);
        assert_eq!(a.locations, b.locations);
        let c = simulate_1d(TestProcess1d::Step, 100, 0.01, 6).unwrap();
        assert_ne!(a.z, c.z);
        // locations stay inside the domain
        let dom = TestProcess1d::Step.domain();
        for i in 0..a.len() {
            assert!(dom.contains(&a.locations.row(i)));
        }
    }

    #[test]
    fn matern_field_moments() {
        // pointwise variance close to sigma2 across replicates
        let xs: Vec<f64> = (0..30).map(|i| i as f64 / 29.0).collect();
        let locs = LocationSet::from_1d(&xs).unwrap();
        let mut rng = RngStream::new(8);
        let reps = 400;
        let mut sumsq = 0.0;
        for _ in 0..reps {
            let y = sample_matern_field(&locs, 2.0, 0.2, &mut rng).unwrap();
            sumsq += y[10] * y[10];
        }
        let var = sumsq / reps as f64;
        assert!((var - 2.0).abs() < 0.45, "pointwise var {var}");
    }

    #[test]
    fn draw_siwgp_has_model_variance() {
        let data = simulate_1d(TestProcess1d::Step, 60, 0.01, 3).unwrap();
        let knots = make_knots(&data, 2000).unwrap();
        let model = SiwgpModel {
            stack: WarpStack::new(Vec::new(), knots),
            top: ProcessLayer::new(10, 1),
            log_noise: libm::log(0.01),
        };
        let mut rng = RngStream::new(14);
        let mut acc = 0.0;
        let reps = 200;
        for _ in 0..reps {
            let y = draw_siwgp(&model, &data.locations, &mut rng).unwrap();
            acc += y.dot(&y) / y.len() as f64;
        }
        let avg_var = acc / reps as f64;
        // sigma2 = 1, basis rows overlap: variance O(1)
        assert!(avg_var > 0.2 && avg_var < 10.0, "avg var {avg_var}");
    }

    #[test]
    fn randomized_stacks_remain_injective() {
        let data = simulate_1d(TestProcess1d::Step, 50, 0.01, 9).unwrap();
        let knots = make_knots(&data, 2000).unwrap();
        let mut rng = RngStream::new(4);
        for _ in 0..20 {
            let mut stack = WarpStack::new(
                alloc::vec![Layer::Awu(crate::warp::AwuLayer::new(0, 10, 200.0, -0.5, 0.5))],
                knots.clone(),
            );
            randomize_stack_weights(&mut stack, &mut rng);
            let (pass, _) = crate::warp::injectivity_check(&stack, 128).unwrap();
            assert!(pass);
        }
    }
}
