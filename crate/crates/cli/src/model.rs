//! Serialized fitted models. `model.bin` is a JSON document embedding the
//! fitted parameters and the training data needed for prediction.

use std::path::Path;

use deepwarp_core::baseline::MaternParams;
use deepwarp_core::sdsp::SdspModel;
use deepwarp_core::siwgp::SiwgpModel;
use deepwarp_core::warp::WarpStack;
use deepwarp_core::Dataset;
use serde::{Deserialize, Serialize};

use crate::run::AppError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Model {
    /// Maximum-likelihood warped model (an empty stack is the FRK model).
    Siwgp { model: SiwgpModel, data: Dataset },
    /// Variational model.
    Sdsp { model: SdspModel, data: Dataset },
    /// Stationary Matérn-3/2 baseline.
    Gp { params: MaternParams, data: Dataset },
}

impl Model {
    pub fn save(&self, path: &Path) -> Result<(), AppError> {
        let text = serde_json::to_string(self)
            .map_err(|e| AppError::Io(format!("serialize model: {e}")))?;
        std::fs::write(path, text).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| AppError::Parse(format!("{}: {e}", path.display())))
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Siwgp { data, .. } | Model::Sdsp { data, .. } | Model::Gp { data, .. } => {
                data.locations.dim()
            }
        }
    }

    /// The warp to visualise: the fitted stack for SIWGP, the
    /// variational-posterior-mean stack for SDSP, none for the GP.
    pub fn export_stack(&self) -> Option<WarpStack> {
        match self {
            Model::Siwgp { model, .. } => Some(model.stack.clone()),
            Model::Sdsp { model, .. } => Some(model.mean_stack()),
            Model::Gp { .. } => None,
        }
    }
}
