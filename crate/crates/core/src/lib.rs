// SPDX-License-Identifier: Apache-2.0

//! Panoramic bird's-eye-view kernels.
//!
//! Forward and hand-written backward passes for equirectangular LiDAR
//! imaging, the voxel-aligned view transform, soft-gated fusion, channel-wise
//! distillation and the student task losses, plus BEV ground-truth
//! construction, fisheye conversion and evaluation metrics.
//!
//! Every kernel is generic over [`Real`] (`f32` or `f64`). The aliases below
//! name the two concrete instantiations.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod distill;
pub mod error;
pub mod fisheye;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod gt;
pub mod lidar_image;
pub mod metrics;
pub mod sampling;
pub mod scalar;
pub mod task_losses;
pub mod tensor;
pub mod view_transformer;

pub use config::PipelineConfig;
pub use distill::DistillConfig;
pub use error::{Error, Result};
pub use fusion::SgfmParams;
pub use geometry::{AngularGridSpec, SphericalCoord};
pub use gt::{BevGridSpec, Box3D};
pub use lidar_image::{LidarPoint, PanoLidarImage};
pub use scalar::Real;
pub use tensor::{FeatureMap, Shape};
pub use view_transformer::{BevFeatureMap, SparseVoxelSet, VoxelFeatures, VoxelGridSpec};

pub type FeatureMapF32 = FeatureMap<f32>;
pub type FeatureMapF64 = FeatureMap<f64>;
pub type PanoLidarImageF32 = PanoLidarImage<f32>;
pub type PanoLidarImageF64 = PanoLidarImage<f64>;
pub type VoxelFeaturesF32 = VoxelFeatures<f32>;
pub type VoxelFeaturesF64 = VoxelFeatures<f64>;
pub type BevFeatureMapF32 = BevFeatureMap<f32>;
pub type BevFeatureMapF64 = BevFeatureMap<f64>;
pub type SgfmParamsF32 = SgfmParams<f32>;
pub type SgfmParamsF64 = SgfmParams<f64>;
