//! JSON run configuration: model choice, warp architecture, top layer,
//! optimisation schedule and simulation settings.

use deepwarp_core::siwgp::FitSchedule;
use deepwarp_core::warp::{build_sr_rbf, AwuLayer, Layer, MobiusLayer};
use deepwarp_core::Domain;
use serde::{Deserialize, Serialize};

use crate::run::AppError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Siwgp,
    Sdsp,
    Gp,
    /// Fixed rank kriging: the low-rank model with an empty warp stack.
    Frk,
}

/// One architecture entry; the ordered list defines the warp stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "unit", rename_all = "snake_case")]
pub enum UnitSpec {
    /// Axial warping unit on `axis` with `r` sigmoids of the given
    /// steepness.
    Awu { axis: usize, r: usize, steepness: f64 },
    /// Single-resolution RBF block at resolution `l` (`3^l x 3^l` layers).
    SrRbf { l: u32 },
    /// Möbius transformation initialised at the identity.
    Mobius,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub stage1: usize,
    pub stage2: usize,
    pub stage3: usize,
}

impl From<ScheduleConfig> for FitSchedule {
    fn from(s: ScheduleConfig) -> Self {
        FitSchedule {
            stage1: s.stage1,
            stage2: s.stage2,
            stage3: s.stage3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimProcess {
    Y11,
    Y12,
    Matern,
    SiwgpDraw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub process: SimProcess,
    pub n: usize,
    pub noise_var: f64,
    /// Truth grid resolution (points in 1D, points per side in 2D).
    #[serde(default = "default_grid")]
    pub grid: usize,
    /// Matérn field variance / top-layer variance for model draws.
    #[serde(default)]
    pub sigma2: Option<f64>,
    /// Matérn range.
    #[serde(default)]
    pub rho: Option<f64>,
    /// Top-layer weight correlation range for model draws.
    #[serde(default)]
    pub ell: Option<f64>,
}

fn default_grid() -> usize {
    1001
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelKind,
    #[serde(default)]
    pub architecture: Vec<UnitSpec>,
    /// Top-layer basis functions per dimension.
    pub top_per_dim: usize,
    /// Monte Carlo samples per variational step.
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    /// Full (non-diagonal) variational Cholesky factors.
    #[serde(default)]
    pub full_covariance: bool,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
}

fn default_n_mc() -> usize {
    10
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AppError> {
        if self.top_per_dim < 2 {
            return Err(AppError::Config("top_per_dim must be >= 2".into()));
        }
        // chaining Möbius units back to back adds nothing; warn, keep going
        let mut consecutive = 0usize;
        for u in &self.architecture {
            if matches!(u, UnitSpec::Mobius) {
                consecutive += 1;
                if consecutive > 1 {
                    eprintln!(
                        "warning: consecutive Möbius units; one such unit already spans the family"
                    );
                }
            } else {
                consecutive = 0;
            }
        }
        Ok(())
    }

    /// Instantiate the warp layers over a geographic domain. The first
    /// unit sees the geographic bounds; every later unit sees the unit
    /// hypercube produced by the preceding rescaling.
    pub fn build_layers(&self, geo: &Domain) -> Result<Vec<Layer>, AppError> {
        let d = geo.dim();
        let mut layers = Vec::new();
        let mut cur = geo.clone();
        for unit in &self.architecture {
            match unit {
                UnitSpec::Awu { axis, r, steepness } => {
                    if *axis >= d {
                        return Err(AppError::Config(format!(
                            "awu axis {axis} out of range for dimension {d}"
                        )));
                    }
                    layers.push(Layer::Awu(AwuLayer::new(
                        *axis,
                        *r,
                        *steepness,
                        cur.lower(*axis),
                        cur.upper(*axis),
                    )));
                }
                UnitSpec::SrRbf { l } => {
                    if d != 2 {
                        return Err(AppError::Config("sr_rbf requires a 2-d domain".into()));
                    }
                    layers.extend(build_sr_rbf(*l, &cur).into_iter().map(Layer::Rbf));
                }
                UnitSpec::Mobius => {
                    if d != 2 {
                        return Err(AppError::Config("mobius requires a 2-d domain".into()));
                    }
                    layers.push(Layer::Mobius(MobiusLayer::identity()));
                }
            }
            cur = Domain::unit(d);
        }
        Ok(layers)
    }
}
