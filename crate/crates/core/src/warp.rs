//! Injective warping units and the composed warping function.
//!
//! A warp stack is an ordered list of layers, each an axial warping unit
//! (AWU), a radial basis function (RBF) unit, or a Möbius transformation.
//! After every layer the output is affinely rescaled, per dimension, so that
//! the warped images of a fixed knot set span exactly `[c1, c1 + 1]` (we fix
//! `c1 = 0`). Gradients with respect to all transformed weights and Möbius
//! parameters are computed by an exact chain rule through the layers and the
//! rescaling, with subgradients at the knot min/max.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::domain::{Domain, KnotSet, LocationSet};
use crate::error::{Error, Result};

/// Degeneracy floor on (max - min) of a knot image before rescaling.
pub const RESCALE_FLOOR: f64 = 1e-12;

/// Initial transformed weight for AWU sigmoid terms (weight 0.01).
pub fn awu_sigmoid_init() -> f64 {
    libm::log(0.01)
}

/// Upper bound `exp(3/2)/2` of the admissible RBF weight interval.
pub fn rbf_weight_upper() -> f64 {
    libm::exp(1.5) / 2.0
}

/// Transformed RBF weight corresponding to `w = 0` (approximately -0.807).
pub fn rbf_tweight_identity() -> f64 {
    // logit((1 + 0) / (1 + exp(3/2)/2))
    let p = 1.0 / (1.0 + rbf_weight_upper());
    libm::log(p / (1.0 - p))
}

#[inline]
fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// The sigmoid basis function `1 / (1 + exp(-steepness (s - center)))`.
#[inline]
pub fn sigmoid(s: f64, steepness: f64, center: f64) -> f64 {
    logistic(steepness * (s - center))
}

/// Back-transform of an RBF weight: maps the real line onto
/// `(-1, exp(3/2)/2)`, the interval that guarantees injectivity.
#[inline]
pub fn rbf_weight_from_tweight(tweight: f64) -> f64 {
    (1.0 + rbf_weight_upper()) * logistic(tweight) - 1.0
}

/// Axial warping unit: a strictly monotone map of one input dimension built
/// from a linear term plus positive-weighted sigmoids; other dimensions pass
/// through unchanged.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AwuLayer {
    pub axis: usize,
    pub steepness: f64,
    /// Sigmoid inflection points, strictly increasing.
    pub centers: Vec<f64>,
    /// Transformed weights; `[0]` is the linear term, the rest pair with
    /// `centers`. Weights are `exp(tweights)`, hence strictly positive.
    pub tweights: Vec<f64>,
}

impl AwuLayer {
    /// A near-identity AWU with `n_sigmoids` inflection points regularly
    /// spaced (endpoints included) over the input interval `[lo, hi]`.
    pub fn new(axis: usize, n_sigmoids: usize, steepness: f64, lo: f64, hi: f64) -> Self {
        assert!(steepness > 0.0);
        assert!(n_sigmoids >= 1);
        let centers: Vec<f64> = if n_sigmoids == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..n_sigmoids)
                .map(|j| lo + (hi - lo) * j as f64 / (n_sigmoids - 1) as f64)
                .collect()
        };
        let mut tweights = vec![awu_sigmoid_init(); n_sigmoids + 1];
        tweights[0] = 0.0; // linear weight 1
        Self {
            axis,
            steepness,
            centers,
            tweights,
        }
    }

    /// Back-transformed (positive) weights.
    pub fn weights(&self) -> Vec<f64> {
        self.tweights.iter().map(|&t| libm::exp(t)).collect()
    }
}

/// One Perrin-family RBF layer: a bounded radial expansion/contraction
/// around a centroid. Injectivity holds for `-1 < w < exp(3/2)/2`, which the
/// logistic back-transform of `tweight` enforces by construction.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RbfLayer {
    pub centroid: [f64; 2],
    pub scale: f64,
    pub tweight: f64,
    /// Test-only escape hatch that bypasses the admissible-interval
    /// transform. Never set outside of tests.
    #[doc(hidden)]
    #[cfg_attr(feature = "serde", serde(default))]
    pub weight_override: Option<f64>,
}

impl RbfLayer {
    pub fn new(centroid: [f64; 2], scale: f64) -> Self {
        assert!(scale > 0.0);
        Self {
            centroid,
            scale,
            tweight: rbf_tweight_identity(),
            weight_override: None,
        }
    }

    pub fn weight(&self) -> f64 {
        self.weight_override
            .unwrap_or_else(|| rbf_weight_from_tweight(self.tweight))
    }
}

/// Möbius transformation `(a1 z + a2) / (a3 z + a4)` of `z = s1 + i s2`,
/// parameterised by the real/imaginary parts of `a1..a4`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MobiusLayer {
    /// `[Re a1, Im a1, Re a2, Im a2, Re a3, Im a3, Re a4, Im a4]`.
    pub a: [f64; 8],
}

impl MobiusLayer {
    /// The identity transformation (`a = (1, 0, 0, 1)`).
    pub fn identity() -> Self {
        Self {
            a: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    pub fn coefficients(&self) -> [Complex64; 4] {
        [
            Complex64::new(self.a[0], self.a[1]),
            Complex64::new(self.a[2], self.a[3]),
            Complex64::new(self.a[4], self.a[5]),
            Complex64::new(self.a[6], self.a[7]),
        ]
    }

    /// The pole `-a4/a3`, if `a3 != 0`.
    pub fn pole(&self) -> Option<Complex64> {
        let [_, _, a3, a4] = self.coefficients();
        if a3.norm() > 0.0 {
            Some(-a4 / a3)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Layer {
    Awu(AwuLayer),
    Rbf(RbfLayer),
    Mobius(MobiusLayer),
}

impl Layer {
    pub fn n_params(&self) -> usize {
        match self {
            Layer::Awu(l) => l.tweights.len(),
            Layer::Rbf(_) => 1,
            Layer::Mobius(_) => 8,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Layer::Awu(l) => l.tweights.clone(),
            Layer::Rbf(l) => vec![l.tweight],
            Layer::Mobius(l) => l.a.to_vec(),
        }
    }

    pub fn set_params(&mut self, p: &[f64]) {
        match self {
            Layer::Awu(l) => l.tweights.copy_from_slice(p),
            Layer::Rbf(l) => l.tweight = p[0],
            Layer::Mobius(l) => l.a.copy_from_slice(p),
        }
    }

    fn check_dim(&self, d: usize, index: usize) -> Result<()> {
        let ok = match self {
            Layer::Awu(l) => l.axis < d,
            Layer::Rbf(_) | Layer::Mobius(_) => d == 2,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "layer {index} incompatible with input dimension {d}"
            )))
        }
    }
}

/// Gradient of a scalar objective with respect to one layer's parameters.
#[derive(Debug, Clone)]
pub enum LayerGrad {
    Awu(Vec<f64>),
    Rbf(f64),
    Mobius([f64; 8]),
}

impl LayerGrad {
    pub fn as_slice(&self) -> &[f64] {
        match self {
            LayerGrad::Awu(v) => v,
            LayerGrad::Rbf(g) => core::slice::from_ref(g),
            LayerGrad::Mobius(a) => a,
        }
    }
}

/// Per-dimension affine rescaling derived from a layer's knot image.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScalingRecord {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Knot-row indices attaining min/max (lowest index on ties); these
    /// receive the subgradient of the non-smooth min/max.
    pub argmin: Vec<usize>,
    pub argmax: Vec<usize>,
    pub c1: f64,
}

impl ScalingRecord {
    /// Build a record from the knot rows (`knot_start..`) of an unscaled
    /// layer output.
    pub fn from_knot_rows(unscaled: &DMatrix<f64>, knot_start: usize, c1: f64) -> Result<Self> {
        let d = unscaled.ncols();
        let mut rec = ScalingRecord {
            min: vec![f64::INFINITY; d],
            max: vec![f64::NEG_INFINITY; d],
            argmin: vec![0; d],
            argmax: vec![0; d],
            c1,
        };
        for k in 0..d {
            for i in knot_start..unscaled.nrows() {
                let v = unscaled[(i, k)];
                if v < rec.min[k] {
                    rec.min[k] = v;
                    rec.argmin[k] = i;
                }
                if v > rec.max[k] {
                    rec.max[k] = v;
                    rec.argmax[k] = i;
                }
            }
            if !(rec.max[k] - rec.min[k] > RESCALE_FLOOR) {
                return Err(Error::DegenerateWarp {
                    layer: usize::MAX, // patched by the caller
                    range: rec.max[k] - rec.min[k],
                });
            }
        }
        Ok(rec)
    }
}

/// Affine rescale of every row: per dimension, `(x - min)/(max - min) + c1`.
pub fn rescale(unscaled: &DMatrix<f64>, record: &ScalingRecord) -> DMatrix<f64> {
    let mut out = unscaled.clone();
    for k in 0..unscaled.ncols() {
        let range = record.max[k] - record.min[k];
        for i in 0..unscaled.nrows() {
            out[(i, k)] = (unscaled[(i, k)] - record.min[k]) / range + record.c1;
        }
    }
    out
}

/// Unscaled AWU forward pass.
pub fn awu_forward(layer: &AwuLayer, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = x.clone();
    let w = layer.weights();
    let k = layer.axis;
    for i in 0..x.nrows() {
        let s = x[(i, k)];
        let mut acc = w[0] * s;
        for (j, &c) in layer.centers.iter().enumerate() {
            acc += w[j + 1] * sigmoid(s, layer.steepness, c);
        }
        y[(i, k)] = acc;
    }
    y
}

/// Unscaled RBF forward pass: `s + w * psi(s)` with
/// `psi_j(s) = (s_j - gamma_j) exp(-a ||s - gamma||^2)`.
pub fn rbf_forward(layer: &RbfLayer, x: &DMatrix<f64>) -> DMatrix<f64> {
    let w = layer.weight();
    let a = layer.scale;
    let g = layer.centroid;
    let mut y = x.clone();
    for i in 0..x.nrows() {
        let dx0 = x[(i, 0)] - g[0];
        let dx1 = x[(i, 1)] - g[1];
        let e = libm::exp(-a * (dx0 * dx0 + dx1 * dx1));
        y[(i, 0)] += w * dx0 * e;
        y[(i, 1)] += w * dx1 * e;
    }
    y
}

/// Unscaled Möbius forward pass. Errors if the pole lies inside the
/// bounding box of the input points.
pub fn mobius_forward(layer: &MobiusLayer, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_pole(layer, x)?;
    let [a1, a2, a3, a4] = layer.coefficients();
    let mut y = x.clone();
    for i in 0..x.nrows() {
        let z = Complex64::new(x[(i, 0)], x[(i, 1)]);
        let f = (a1 * z + a2) / (a3 * z + a4);
        y[(i, 0)] = f.re;
        y[(i, 1)] = f.im;
    }
    Ok(y)
}

fn check_pole(layer: &MobiusLayer, x: &DMatrix<f64>) -> Result<()> {
    if let Some(p) = layer.pole() {
        let (mut lo0, mut hi0) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut lo1, mut hi1) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..x.nrows() {
            lo0 = lo0.min(x[(i, 0)]);
            hi0 = hi0.max(x[(i, 0)]);
            lo1 = lo1.min(x[(i, 1)]);
            hi1 = hi1.max(x[(i, 1)]);
        }
        if p.re >= lo0 && p.re <= hi0 && p.im >= lo1 && p.im <= hi1 {
            return Err(Error::InvalidParameter(format!(
                "Möbius pole ({}, {}) inside the input square",
                p.re, p.im
            )));
        }
    }
    Ok(())
}

/// Single-resolution RBF block: `3^l x 3^l` centroids on a regular grid over
/// `domain` (row-major), scale `2 (3^l - 1)^2`, weights initialised to zero
/// warp.
pub fn build_sr_rbf(resolution: u32, domain: &Domain) -> Vec<RbfLayer> {
    assert!(resolution >= 1);
    assert_eq!(domain.dim(), 2);
    let g = 3usize.pow(resolution);
    let a = 2.0 * ((g - 1) as f64) * ((g - 1) as f64);
    let mut layers = Vec::with_capacity(g * g);
    for row in 0..g {
        for col in 0..g {
            let cx = domain.lower(0) + domain.side(0) * col as f64 / (g - 1) as f64;
            let cy = domain.lower(1) + domain.side(1) * row as f64 / (g - 1) as f64;
            layers.push(RbfLayer::new([cx, cy], a));
        }
    }
    layers
}

/// An ordered stack of warping layers plus the knot set that drives the
/// per-layer rescaling.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WarpStack {
    pub layers: Vec<Layer>,
    pub knots: KnotSet,
}

impl WarpStack {
    pub fn new(layers: Vec<Layer>, knots: KnotSet) -> Self {
        Self { layers, knots }
    }

    pub fn dim(&self) -> usize {
        self.knots.dim()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    /// Flattened parameter vector over all layers.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            out.extend_from_slice(&layer.params());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut offset = 0;
        for layer in &mut self.layers {
            let n = layer.n_params();
            layer.set_params(&p[offset..offset + n]);
            offset += n;
        }
        debug_assert_eq!(offset, p.len());
    }
}

/// Everything recorded during a forward pass, enough to replay the chain
/// rule backwards.
#[derive(Debug, Clone)]
pub struct WarpTrace {
    /// Number of data rows; knot rows follow them in every stored matrix.
    pub n_data: usize,
    /// Combined (data + knot) input of each layer; `inputs[0]` is S over
    /// the knots.
    pub inputs: Vec<DMatrix<f64>>,
    /// Unscaled layer outputs.
    pub unscaled: Vec<DMatrix<f64>>,
    pub records: Vec<ScalingRecord>,
    /// Final combined scaled output.
    pub output: DMatrix<f64>,
}

impl WarpTrace {
    /// Final warped data locations (first `n_data` rows).
    pub fn data_output(&self) -> DMatrix<f64> {
        self.output.rows(0, self.n_data).into_owned()
    }

    /// Per-layer scaled knot images.
    pub fn knot_images(&self) -> Vec<DMatrix<f64>> {
        let m = self.output.nrows() - self.n_data;
        let mut out = Vec::with_capacity(self.records.len());
        for i in 0..self.records.len() {
            let scaled = if i + 1 < self.inputs.len() {
                &self.inputs[i + 1]
            } else {
                &self.output
            };
            out.push(scaled.rows(self.n_data, m).into_owned());
        }
        out
    }
}

/// Forward pass of the full stack over arbitrary points, propagating the
/// stack's knots alongside to build each layer's scaling record.
pub fn forward_trace(stack: &WarpStack, points: &DMatrix<f64>) -> Result<WarpTrace> {
    let d = points.ncols();
    if d != stack.dim() {
        return Err(Error::DimensionMismatch {
            expected: stack.dim(),
            got: d,
        });
    }
    let n_data = points.nrows();
    let m = stack.knots.len();
    let mut combined = DMatrix::zeros(n_data + m, d);
    combined.rows_mut(0, n_data).copy_from(points);
    combined
        .rows_mut(n_data, m)
        .copy_from(stack.knots.coords());

    let mut inputs = Vec::with_capacity(stack.layers.len());
    let mut unscaled = Vec::with_capacity(stack.layers.len());
    let mut records = Vec::with_capacity(stack.layers.len());
    let mut current = combined;

    for (idx, layer) in stack.layers.iter().enumerate() {
        layer.check_dim(d, idx)?;
        let raw = match layer {
            Layer::Awu(l) => awu_forward(l, &current),
            Layer::Rbf(l) => rbf_forward(l, &current),
            Layer::Mobius(l) => mobius_forward(l, &current)?,
        };
        let record = ScalingRecord::from_knot_rows(&raw, n_data, 0.0).map_err(|e| match e {
            Error::DegenerateWarp { range, .. } => Error::DegenerateWarp { layer: idx, range },
            other => other,
        })?;
        let scaled = rescale(&raw, &record);
        inputs.push(current);
        unscaled.push(raw);
        records.push(record);
        current = scaled;
    }

    Ok(WarpTrace {
        n_data,
        inputs,
        unscaled,
        records,
        output: current,
    })
}

/// Warp a location set through the stack; returns the final warped
/// locations and the per-layer knot images.
pub fn warp_forward(stack: &WarpStack, s: &LocationSet) -> Result<(LocationSet, Vec<DMatrix<f64>>)> {
    let trace = forward_trace(stack, s.coords())?;
    let out = LocationSet::new(trace.data_output())?;
    Ok((out, trace.knot_images()))
}

/// Reverse-mode gradient of `sum(cotangent .* F_n)` with respect to every
/// layer's transformed weights / Möbius parameters.
///
/// `cotangent` has one row per data location; the subgradient of the
/// rescaling min/max flows through the attaining knot.
pub fn warp_gradient(
    stack: &WarpStack,
    s: &LocationSet,
    cotangent: &DMatrix<f64>,
) -> Result<Vec<LayerGrad>> {
    let trace = forward_trace(stack, s.coords())?;
    Ok(backprop(stack, &trace, cotangent))
}

/// Backprop through an existing trace. `cotangent` covers the data rows;
/// knot rows start at zero and pick up contributions through the rescaling.
pub fn backprop(stack: &WarpStack, trace: &WarpTrace, cotangent: &DMatrix<f64>) -> Vec<LayerGrad> {
    let d = trace.output.ncols();
    let total = trace.output.nrows();
    assert_eq!(cotangent.nrows(), trace.n_data);
    assert_eq!(cotangent.ncols(), d);

    let mut grad = DMatrix::zeros(total, d);
    grad.rows_mut(0, trace.n_data).copy_from(cotangent);

    let mut layer_grads: Vec<LayerGrad> = Vec::with_capacity(stack.layers.len());
    for (idx, layer) in stack.layers.iter().enumerate().rev() {
        // Rescaling: y -> (y - min)/range, min/max over knot rows.
        let rec = &trace.records[idx];
        let raw = &trace.unscaled[idx];
        let mut graw = DMatrix::zeros(total, d);
        for k in 0..d {
            let range = rec.max[k] - rec.min[k];
            let mut sum_g = 0.0;
            let mut sum_gs = 0.0;
            for p in 0..total {
                let g = grad[(p, k)];
                graw[(p, k)] += g / range;
                sum_g += g;
                sum_gs += g * (raw[(p, k)] - rec.min[k]) / range;
            }
            graw[(rec.argmin[k], k)] += (sum_gs - sum_g) / range;
            graw[(rec.argmax[k], k)] -= sum_gs / range;
        }

        let x = &trace.inputs[idx];
        let (gx, lg) = match layer {
            Layer::Awu(l) => awu_backward(l, x, &graw),
            Layer::Rbf(l) => rbf_backward(l, x, &graw),
            Layer::Mobius(l) => mobius_backward(l, x, &graw),
        };
        layer_grads.push(lg);
        grad = gx;
    }
    layer_grads.reverse();
    layer_grads
}

fn awu_backward(l: &AwuLayer, x: &DMatrix<f64>, gy: &DMatrix<f64>) -> (DMatrix<f64>, LayerGrad) {
    let w = l.weights();
    let k = l.axis;
    let mut gx = gy.clone();
    let mut gtw = vec![0.0; l.tweights.len()];
    for p in 0..x.nrows() {
        let g = gy[(p, k)];
        let s = x[(p, k)];
        gtw[0] += g * s * w[0];
        let mut slope = w[0];
        for (j, &c) in l.centers.iter().enumerate() {
            let sig = sigmoid(s, l.steepness, c);
            gtw[j + 1] += g * sig * w[j + 1];
            slope += w[j + 1] * l.steepness * sig * (1.0 - sig);
        }
        gx[(p, k)] = g * slope;
    }
    (gx, LayerGrad::Awu(gtw))
}

fn rbf_backward(l: &RbfLayer, x: &DMatrix<f64>, gy: &DMatrix<f64>) -> (DMatrix<f64>, LayerGrad) {
    let w = l.weight();
    let a = l.scale;
    let mut gx = DMatrix::zeros(x.nrows(), 2);
    let mut gw = 0.0;
    for p in 0..x.nrows() {
        let dx0 = x[(p, 0)] - l.centroid[0];
        let dx1 = x[(p, 1)] - l.centroid[1];
        let e = libm::exp(-a * (dx0 * dx0 + dx1 * dx1));
        let (g0, g1) = (gy[(p, 0)], gy[(p, 1)]);
        gw += g0 * dx0 * e + g1 * dx1 * e;
        let gdotdx = g0 * dx0 + g1 * dx1;
        gx[(p, 0)] = g0 + w * e * (g0 - 2.0 * a * dx0 * gdotdx);
        gx[(p, 1)] = g1 + w * e * (g1 - 2.0 * a * dx1 * gdotdx);
    }
    // chain through the logistic back-transform
    let sig = logistic(l.tweight);
    let dw_dtw = if l.weight_override.is_some() {
        0.0
    } else {
        (1.0 + rbf_weight_upper()) * sig * (1.0 - sig)
    };
    (gx, LayerGrad::Rbf(gw * dw_dtw))
}

fn mobius_backward(l: &MobiusLayer, x: &DMatrix<f64>, gy: &DMatrix<f64>) -> (DMatrix<f64>, LayerGrad) {
    let [a1, a2, a3, a4] = l.coefficients();
    let mut gx = DMatrix::zeros(x.nrows(), 2);
    let mut ga = [0.0; 8];
    for p in 0..x.nrows() {
        let z = Complex64::new(x[(p, 0)], x[(p, 1)]);
        let den = a3 * z + a4;
        let num = a1 * z + a2;
        let (g0, g1) = (gy[(p, 0)], gy[(p, 1)]);
        // df/dz via the holomorphic derivative
        let fp = (a1 * a4 - a2 * a3) / (den * den);
        gx[(p, 0)] = g0 * fp.re + g1 * fp.im;
        gx[(p, 1)] = -g0 * fp.im + g1 * fp.re;
        // df/da_k, all holomorphic in the coefficients
        let fa = [
            z / den,
            Complex64::new(1.0, 0.0) / den,
            -z * num / (den * den),
            -num / (den * den),
        ];
        for (k, f) in fa.iter().enumerate() {
            ga[2 * k] += g0 * f.re + g1 * f.im;
            ga[2 * k + 1] += -g0 * f.im + g1 * f.re;
        }
    }
    (gx, LayerGrad::Mobius(ga))
}

/// Numerical injectivity check on a regular grid over the knots' bounding
/// box: strict monotonicity in 1D, sign-constant Jacobian determinant
/// (central differences) in 2D. Returns pass/fail and the worst statistic
/// (min slope or min |det|).
pub fn injectivity_check(stack: &WarpStack, grid_per_dim: usize) -> Result<(bool, f64)> {
    assert!(grid_per_dim >= 16);
    let d = stack.dim();
    let knots = stack.knots.coords();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for i in 0..knots.nrows() {
        for k in 0..d {
            lo[k] = lo[k].min(knots[(i, k)]);
            hi[k] = hi[k].max(knots[(i, k)]);
        }
    }

    if d == 1 {
        let n = grid_per_dim;
        let mut pts = DMatrix::zeros(n, 1);
        for i in 0..n {
            pts[(i, 0)] = lo[0] + (hi[0] - lo[0]) * i as f64 / (n - 1) as f64;
        }
        let h = (hi[0] - lo[0]) / (n - 1) as f64;
        let out = forward_trace(stack, &pts)?.data_output();
        let mut min_slope = f64::INFINITY;
        for i in 1..n {
            min_slope = min_slope.min((out[(i, 0)] - out[(i - 1, 0)]) / h);
        }
        Ok((min_slope > 0.0, min_slope))
    } else {
        let n = grid_per_dim;
        let h = 1e-4 * (hi[0] - lo[0]).max(hi[1] - lo[1]);
        // four perturbed copies of each grid node, evaluated in one pass
        let mut pts = DMatrix::zeros(4 * n * n, 2);
        let mut idx = 0;
        for i in 0..n {
            for j in 0..n {
                let x = lo[0] + (hi[0] - lo[0]) * i as f64 / (n - 1) as f64;
                let y = lo[1] + (hi[1] - lo[1]) * j as f64 / (n - 1) as f64;
                for (dx, dy) in [(h, 0.0), (-h, 0.0), (0.0, h), (0.0, -h)] {
                    pts[(idx, 0)] = x + dx;
                    pts[(idx, 1)] = y + dy;
                    idx += 1;
                }
            }
        }
        let out = forward_trace(stack, &pts)?.data_output();
        let mut min_abs = f64::INFINITY;
        let mut sign = 0.0;
        for c in 0..n * n {
            let b = 4 * c;
            let j00 = (out[(b, 0)] - out[(b + 1, 0)]) / (2.0 * h);
            let j10 = (out[(b, 1)] - out[(b + 1, 1)]) / (2.0 * h);
            let j01 = (out[(b + 2, 0)] - out[(b + 3, 0)]) / (2.0 * h);
            let j11 = (out[(b + 2, 1)] - out[(b + 3, 1)]) / (2.0 * h);
            let det = j00 * j11 - j01 * j10;
            if det == 0.0 {
                return Ok((false, 0.0));
            }
            let s = det.signum();
            if sign == 0.0 {
                sign = s;
            } else if s != sign {
                return Ok((false, det.abs()));
            }
            min_abs = min_abs.min(det.abs());
        }
        Ok((true, min_abs))
    }
}

/// Builds an identity-like String tag for error contexts (kept internal).
#[allow(dead_code)]
fn layer_tag(layer: &Layer) -> String {
    match layer {
        Layer::Awu(l) => format!("awu(axis={})", l.axis),
        Layer::Rbf(_) => "rbf".into(),
        Layer::Mobius(_) => "mobius".into(),
    }
}
