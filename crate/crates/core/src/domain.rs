//! Shared domain types: spatial domains, location sets, datasets and knots.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Default cap on the number of rescaling knots.
pub const DEFAULT_KNOT_CAP: usize = 2000;

/// Normal quantile for two-sided 95% intervals.
pub const Z95: f64 = 1.959964;

/// A hyper-rectangular spatial domain in one or two dimensions.
///
/// Internal warped domains are always the unit hypercube `[0, 1]^d`; the
/// geographic domain may be arbitrary.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Domain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: &[f64], upper: &[f64]) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() || lower.len() > 2 {
            return Err(Error::InvalidParameter(format!(
                "domain dimension must be 1 or 2, got {}",
                lower.len()
            )));
        }
        for k in 0..lower.len() {
            if !(lower[k] < upper[k]) || !lower[k].is_finite() || !upper[k].is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "domain bounds must satisfy lower < upper in dim {k}"
                )));
            }
        }
        Ok(Self {
            lower: lower.to_vec(),
            upper: upper.to_vec(),
        })
    }

    /// The unit hypercube `[0, 1]^d`.
    pub fn unit(dim: usize) -> Self {
        Self {
            lower: alloc::vec![0.0; dim],
            upper: alloc::vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self, k: usize) -> f64 {
        self.lower[k]
    }

    pub fn upper(&self, k: usize) -> f64 {
        self.upper[k]
    }

    pub fn side(&self, k: usize) -> f64 {
        self.upper[k] - self.lower[k]
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point
            .iter()
            .enumerate()
            .all(|(k, &x)| x >= self.lower[k] && x <= self.upper[k])
    }
}

/// N locations in d-dimensional space, one row per location.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LocationSet {
    coords: DMatrix<f64>,
}

impl LocationSet {
    pub fn new(coords: DMatrix<f64>) -> Result<Self> {
        if coords.nrows() == 0 {
            return Err(Error::EmptyInput("location set must have N >= 1".into()));
        }
        if coords.ncols() == 0 || coords.ncols() > 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: coords.ncols(),
            });
        }
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(
                "location coordinates must be finite".into(),
            ));
        }
        Ok(Self { coords })
    }

    pub fn from_1d(xs: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_column_slice(xs.len(), 1, xs))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::EmptyInput("location set must have N >= 1".into()));
        }
        let d = rows[0].len();
        let mut m = DMatrix::zeros(n, d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
            for k in 0..d {
                m[(i, k)] = row[k];
            }
        }
        Self::new(m)
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn coords(&self) -> &DMatrix<f64> {
        &self.coords
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.dim()).map(|k| self.coords[(i, k)]).collect()
    }
}

/// Noisy observations of the process at a set of locations.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dataset {
    pub locations: LocationSet,
    pub z: DVector<f64>,
    pub noise_var: f64,
    /// Seed used for any deterministic choice derived from the data
    /// (currently knot subsampling).
    pub seed: u64,
}

impl Dataset {
    pub fn new(locations: LocationSet, z: DVector<f64>, noise_var: f64, seed: u64) -> Result<Self> {
        if z.len() != locations.len() {
            return Err(Error::DimensionMismatch {
                expected: locations.len(),
                got: z.len(),
            });
        }
        if !(noise_var > 0.0) {
            return Err(Error::InvalidParameter("noise_var must be > 0".into()));
        }
        Ok(Self {
            locations,
            z,
            noise_var,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// Reference points whose warped images define the per-layer rescaling.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KnotSet {
    coords: DMatrix<f64>,
}

impl KnotSet {
    pub fn new(coords: DMatrix<f64>) -> Result<Self> {
        if coords.nrows() < 2 {
            return Err(Error::DegenerateData(
                "knot set needs at least 2 distinct locations".into(),
            ));
        }
        Ok(Self { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn coords(&self) -> &DMatrix<f64> {
        &self.coords
    }
}

/// Unique data locations, deterministically subsampled to `cap` when there
/// are more than that.
pub fn make_knots(data: &Dataset, cap: usize) -> Result<KnotSet> {
    assert!(cap >= 2, "knot cap must be >= 2");
    let coords = data.locations.coords();
    let d = coords.ncols();

    // Dedup on exact bit patterns, keeping first-occurrence order.
    let mut seen: BTreeSet<Vec<u64>> = BTreeSet::new();
    let mut unique: Vec<usize> = Vec::new();
    for i in 0..coords.nrows() {
        let key: Vec<u64> = (0..d).map(|k| coords[(i, k)].to_bits()).collect();
        if seen.insert(key) {
            unique.push(i);
        }
    }
    if unique.len() < 2 {
        return Err(Error::DegenerateData(format!(
            "need at least 2 unique locations, found {}",
            unique.len()
        )));
    }

    let chosen: Vec<usize> = if unique.len() <= cap {
        unique
    } else {
        // Partial Fisher-Yates driven by the dataset's seed; indices are
        // re-sorted so the knot order does not depend on the shuffle.
        let mut rng = RngStream::new(data.seed).substream(0x6b6e6f74); // "knot"
        let mut pool = unique;
        let m = pool.len();
        for i in 0..cap {
            let j = i + rng.next_index(m - i);
            pool.swap(i, j);
        }
        let mut picked: Vec<usize> = pool[..cap].to_vec();
        picked.sort_unstable();
        picked
    };

    let mut out = DMatrix::zeros(chosen.len(), d);
    for (r, &i) in chosen.iter().enumerate() {
        for k in 0..d {
            out[(r, k)] = coords[(i, k)];
        }
    }
    KnotSet::new(out)
}

/// Per-location predictive moments and central 95% interval.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PredictiveSummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub lower95: Vec<f64>,
    pub upper95: Vec<f64>,
}

impl PredictiveSummary {
    pub fn from_gaussian(mean: Vec<f64>, sd: Vec<f64>) -> Self {
        let lower95 = mean
            .iter()
            .zip(&sd)
            .map(|(m, s)| m - Z95 * s)
            .collect::<Vec<_>>();
        let upper95 = mean
            .iter()
            .zip(&sd)
            .map(|(m, s)| m + Z95 * s)
            .collect::<Vec<_>>();
        Self {
            mean,
            sd,
            lower95,
            upper95,
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn dataset_1d(xs: &[f64], seed: u64) -> Dataset {
        let locs = LocationSet::from_1d(xs).unwrap();
        let z = DVector::zeros(xs.len());
        Dataset::new(locs, z, 0.01, seed).unwrap()
    }

    #[test]
    fn knots_under_cap_identity() {
        let xs: Vec<f64> = (0..300).map(|i| i as f64 / 299.0 - 0.5).collect();
        let knots = make_knots(&dataset_1d(&xs, 1), 2000).unwrap();
        assert_eq!(knots.len(), 300);
        for (i, &x) in xs.iter().enumerate() {
            assert_eq!(knots.coords()[(i, 0)], x);
        }
    }

    #[test]
    fn knots_dedup() {
        let xs = vec![0.1, 0.2, 0.1, 0.3, 0.2];
        let knots = make_knots(&dataset_1d(&xs, 1), 2000).unwrap();
        assert_eq!(knots.len(), 3);
    }

    #[test]
    fn knots_subsample_reproducible() {
        let xs: Vec<f64> = (0..4000).map(|i| i as f64).collect();
        let a = make_knots(&dataset_1d(&xs, 9), 2000).unwrap();
        let b = make_knots(&dataset_1d(&xs, 9), 2000).unwrap();
        assert_eq!(a.len(), 2000);
        assert_eq!(a, b);
        let c = make_knots(&dataset_1d(&xs, 10), 2000).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn knots_idempotent() {
        let xs: Vec<f64> = (0..4000).map(|i| i as f64).collect();
        let a = make_knots(&dataset_1d(&xs, 9), 2000).unwrap();
        let again = {
            let xs2: Vec<f64> = (0..a.len()).map(|i| a.coords()[(i, 0)]).collect();
            make_knots(&dataset_1d(&xs2, 9), 2000).unwrap()
        };
        assert_eq!(a, again);
    }

    #[test]
    fn degenerate_data_errors() {
        let xs = vec![0.5, 0.5, 0.5];
        assert!(matches!(
            make_knots(&dataset_1d(&xs, 1), 2000),
            Err(Error::DegenerateData(_))
        ));
    }
}
