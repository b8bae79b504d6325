// SPDX-License-Identifier: Apache-2.0

//! One TOML document holding every module's settings.
//!
//! ```toml
//! [angular]
//! rows = 128
//! cols = 2048
//! elevation_min = -0.3927
//! elevation_max = 0.3927
//!
//! [voxel]
//! extent = [100.0, 8.0, 100.0]
//! voxel_size = [0.5, 0.5, 0.5]
//!
//! [bev]
//! rows = 200
//! cols = 200
//! extent = 100.0
//!
//! [distill]
//! temperature = 4.0
//!
//! [loss]
//! focal_alpha = 0.25
//! ```
//!
//! Missing sections take their defaults. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::error::{config_err, Error, Result};
use crate::geometry::{AngularGridSpec, RigidTransform};
use crate::gt::BevGridSpec;
use crate::task_losses::StudentLossConfig;
use crate::view_transformer::{CompressMode, VoxelGridSpec};

/// Ground-truth construction settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub centerness_sigma_cells: f64,
    pub min_points: usize,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self { centerness_sigma_cells: 2.0, min_points: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub angular: AngularGridSpec,
    pub voxel: VoxelGridSpec,
    pub bev: BevGridSpec,
    pub compress: CompressMode,
    pub distill: DistillConfig,
    pub loss: StudentLossConfig,
    pub targets: TargetConfig,
    /// LiDAR-to-panorama extrinsic; identity when absent.
    pub extrinsic: Option<RigidTransform>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            angular: AngularGridSpec {
                rows: 128,
                cols: 2048,
                elevation_min: -22.5f64.to_radians(),
                elevation_max: 22.5f64.to_radians(),
            },
            voxel: VoxelGridSpec::default(),
            bev: BevGridSpec::default(),
            compress: CompressMode::Mean,
            distill: DistillConfig::default(),
            loss: StudentLossConfig::default(),
            targets: TargetConfig::default(),
            extrinsic: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Checks each section and that the BEV grid is the voxel grid's
    /// ground-plane footprint.
    pub fn validate(&self) -> Result<()> {
        self.angular.validate()?;
        let [nx, _, nz] = self.voxel.dims()?;
        self.bev.validate()?;
        self.distill.validate()?;
        self.loss.weights.validate()?;
        if self.bev.cols != nx || self.bev.rows != nz {
            return config_err(format!(
                "BEV grid {}x{} does not match voxel footprint {nz}x{nx}",
                self.bev.rows, self.bev.cols
            ));
        }
        let [ex, _, ez] = self.voxel.extent;
        if (self.bev.extent - ex).abs() > 1e-9 || (self.bev.extent - ez).abs() > 1e-9 {
            return config_err(format!("BEV extent {} m does not match voxel extent {ex} x {ez} m", self.bev.extent));
        }
        if !(self.targets.centerness_sigma_cells > 0.0) {
            return config_err("centerness sigma must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_consistent_and_roundtrips() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn partial_sections() {
        let cfg = PipelineConfig::from_toml("[distill]\ntemperature = 2.0\n[loss]\nbmse_sigma = 0.5\n").unwrap();
        assert_eq!(cfg.distill.temperature, 2.0);
        assert_eq!(cfg.distill.alpha1, 1.0);
        assert_eq!(cfg.loss.bmse_sigma, 0.5);
    }

    #[test]
    fn cross_field_mismatch() {
        let text = "[bev]\nrows = 100\ncols = 100\nextent = 100.0\n";
        assert!(matches!(PipelineConfig::from_toml(text), Err(Error::InvalidConfig(_))));
        let text = "[voxel]\nextent = [50.0, 8.0, 50.0]\nvoxel_size = [0.25, 0.5, 0.25]\n[bev]\nrows = 200\ncols = 200\nextent = 50.0\n";
        PipelineConfig::from_toml(text).unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_toml("[distill]\ntemprature = 2.0\n").is_err());
        assert!(PipelineConfig::from_toml("[mystery]\n").is_err());
    }
}
