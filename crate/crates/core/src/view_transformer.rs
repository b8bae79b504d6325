// SPDX-License-Identifier: Apache-2.0

//! Voxel-aligned view transform: voxelise a point cloud, pull equirectangular
//! features into occupied voxel centres, compress the vertical axis into a
//! BEV map. The dense variant samples every voxel centre of the grid.
//!
//! Grid axes: `x` is sensor forward, `y` is height (sensor `z`), `z` is
//! sensor left (sensor `y`). The BEV map is `C × Z × X`: row `iz`, column
//! `ix`.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::geometry::{cart_to_spherical, spherical_to_pixel, AngularGridSpec, Point3};
use crate::sampling::{BilinearTaps, HorizontalEdge};
use crate::scalar::Real;
use crate::tensor::{FeatureMap, Shape};

/// Detection extent `[-R, R]` per grid axis and the voxel size.
///
/// `extent` holds the full side lengths `2R` in `(x, height, z)` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub extent: [f64; 3],
    pub voxel_size: [f64; 3],
}

impl Default for VoxelGridSpec {
    /// 100 m × 8 m × 100 m at 0.5 m voxels.
    fn default() -> Self {
        Self { extent: [100.0, 8.0, 100.0], voxel_size: [0.5, 0.5, 0.5] }
    }
}

impl VoxelGridSpec {
    pub fn new(extent: [f64; 3], voxel_size: [f64; 3]) -> Result<Self> {
        let s = Self { extent, voxel_size };
        s.dims()?;
        Ok(s)
    }

    /// `(X, Y, Z)` voxel counts; each must be an integer.
    pub fn dims(&self) -> Result<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let (e, r) = (self.extent[a], self.voxel_size[a]);
            if !(e > 0.0 && r > 0.0 && e.is_finite() && r.is_finite()) {
                return config_err(format!("axis {a}: extent {e} and voxel size {r} must be positive"));
            }
            let n = e / r;
            let rounded = n.round();
            if (n - rounded).abs() > 1e-9 * rounded.max(1.0) || rounded < 1.0 {
                return config_err(format!("axis {a}: extent {e} is not a multiple of voxel size {r}"));
            }
            out[a] = rounded as usize;
        }
        Ok(out)
    }

    fn dims_unchecked(&self) -> [usize; 3] {
        self.dims().expect("validated voxel grid")
    }

    /// Grid-frame coordinates `(x, height, z)` of a sensor-frame point.
    #[inline]
    pub fn to_grid_frame<T: Real>(p: Point3<T>) -> Point3<T> {
        [p[0], p[2], p[1]]
    }

    /// Sensor-frame point of grid-frame `(x, height, z)` coordinates.
    #[inline]
    pub fn to_sensor_frame<T: Real>(g: Point3<T>) -> Point3<T> {
        [g[0], g[2], g[1]]
    }

    /// Voxel index `(ix, iy, iz)` containing a sensor-frame point.
    pub fn voxel_of<T: Real>(&self, p: Point3<T>) -> Option<[usize; 3]> {
        let dims = self.dims_unchecked();
        let g = Self::to_grid_frame(p);
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let half = T::lit(self.extent[a] * 0.5);
            let k = ((g[a] + half) / T::lit(self.voxel_size[a])).floor();
            if !(k >= T::zero()) {
                return None;
            }
            let k = k.to_usize()?;
            if k >= dims[a] {
                return None;
            }
            idx[a] = k;
        }
        Some(idx)
    }

    /// Sensor-frame centre of voxel `(ix, iy, iz)`.
    #[inline]
    pub fn center<T: Real>(&self, idx: [usize; 3]) -> Point3<T> {
        let mut g = [T::zero(); 3];
        for a in 0..3 {
            g[a] =
                T::lit(-0.5 * self.extent[a]) + (T::from_usize_lossy(idx[a]) + T::half()) * T::lit(self.voxel_size[a]);
        }
        Self::to_sensor_frame(g)
    }
}

/// Occupied voxels sorted by `(iz, iy, ix)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelSet<T> {
    pub spec: VoxelGridSpec,
    /// `(ix, iy, iz)` triples.
    pub indices: Vec<[usize; 3]>,
    /// Sensor-frame centres matching `indices`.
    pub centers: Vec<Point3<T>>,
}

impl<T: Real> SparseVoxelSet<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Builds a set from arbitrary indices (deduplicated and sorted).
    pub fn from_indices(spec: VoxelGridSpec, indices: impl IntoIterator<Item = [usize; 3]>) -> Result<Self> {
        let dims = spec.dims()?;
        let mut keys = BTreeSet::new();
        for i in indices {
            if i[0] >= dims[0] || i[1] >= dims[1] || i[2] >= dims[2] {
                return shape_err(format!("voxel index {i:?} outside grid {dims:?}"));
            }
            keys.insert([i[2], i[1], i[0]]);
        }
        Ok(Self::from_sorted_keys(spec, keys))
    }

    /// Every voxel of the grid.
    pub fn full(spec: VoxelGridSpec) -> Result<Self> {
        let [nx, ny, nz] = spec.dims()?;
        let mut indices = Vec::with_capacity(nx * ny * nz);
        for iz in 0..nz {
            for iy in 0..ny {
                for ix in 0..nx {
                    indices.push([ix, iy, iz]);
                }
            }
        }
        let centers = indices.iter().map(|&i| spec.center(i)).collect();
        Ok(Self { spec, indices, centers })
    }

    fn from_sorted_keys(spec: VoxelGridSpec, keys: BTreeSet<[usize; 3]>) -> Self {
        let indices: Vec<[usize; 3]> = keys.into_iter().map(|k| [k[2], k[1], k[0]]).collect();
        let centers = indices.iter().map(|&i| spec.center(i)).collect();
        Self { spec, indices, centers }
    }
}

/// One `C`-vector per voxel, stored voxel-major (`values[n*C + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeatures<T> {
    pub set: SparseVoxelSet<T>,
    pub channels: usize,
    pub values: Vec<T>,
    /// Voxels whose centre fell outside the image's elevation band; their
    /// values are zero.
    pub out_of_fov: Vec<bool>,
}

impl<T: Real> VoxelFeatures<T> {
    pub fn value(&self, n: usize) -> &[T] {
        &self.values[n * self.channels..(n + 1) * self.channels]
    }
}

/// BEV features `C × Z × X` with per-column counts of contributing voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap<T> {
    pub features: FeatureMap<T>,
    pub occupancy: Vec<u32>,
}

/// Vertical reduction applied per BEV column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressMode {
    #[default]
    Mean,
    Sum,
}

/// Voxel indices of every in-range point, deduplicated, sorted by
/// `(iz, iy, ix)`.
pub fn voxelize<T: Real>(points: &[Point3<T>], spec: &VoxelGridSpec) -> Result<SparseVoxelSet<T>> {
    spec.dims()?;
    let keys: BTreeSet<[usize; 3]> =
        points.iter().filter_map(|&p| spec.voxel_of(p)).map(|i| [i[2], i[1], i[0]]).collect();
    Ok(SparseVoxelSet::from_sorted_keys(*spec, keys))
}

/// Bilinear taps of a sensor-frame point on the equirectangular grid, or
/// `None` outside its elevation band.
#[inline]
pub fn project_point<T: Real>(p: Point3<T>, grid: &AngularGridSpec) -> Option<BilinearTaps<T>> {
    let s = cart_to_spherical(p);
    let (u, v) = spherical_to_pixel(&s, grid).ok()?;
    Some(BilinearTaps::new(grid.rows, grid.cols, u, v, HorizontalEdge::Cyclic))
}

fn check_image(img_shape: Shape, grid: &AngularGridSpec) -> Result<()> {
    grid.validate()?;
    if img_shape.height != grid.rows || img_shape.width != grid.cols {
        return shape_err(format!("feature map {img_shape} does not match angular grid {}x{}", grid.rows, grid.cols));
    }
    Ok(())
}

/// Samples the image feature map at every voxel centre.
pub fn voxel_pull<T: Real>(
    img_feat: &FeatureMap<T>,
    vox: &SparseVoxelSet<T>,
    grid: &AngularGridSpec,
) -> Result<VoxelFeatures<T>> {
    check_image(img_feat.shape(), grid)?;
    let c = img_feat.channels();
    let mut values = vec![T::zero(); vox.len() * c];
    let mut out_of_fov = vec![false; vox.len()];
    if c > 0 {
        values.par_chunks_mut(c).zip(out_of_fov.par_iter_mut()).zip(vox.centers.par_iter()).for_each(
            |((dst, oof), &center)| match project_point(center, grid) {
                Some(taps) => {
                    for (ch, d) in dst.iter_mut().enumerate() {
                        *d = taps.gather(img_feat.channel(ch));
                    }
                }
                None => *oof = true,
            },
        );
    } else {
        for (oof, &center) in out_of_fov.iter_mut().zip(&vox.centers) {
            *oof = project_point(center, grid).is_none();
        }
    }
    Ok(VoxelFeatures { set: vox.clone(), channels: c, values, out_of_fov })
}

/// Adjoint of [`voxel_pull`] with respect to the image features.
///
/// `grad` is voxel-major like [`VoxelFeatures::values`]. Each channel plane is
/// accumulated in voxel order, so the result is independent of thread count.
pub fn voxel_pull_backward<T: Real>(
    grad: &[T],
    vox: &SparseVoxelSet<T>,
    grid: &AngularGridSpec,
    img_shape: Shape,
) -> Result<FeatureMap<T>> {
    check_image(img_shape, grid)?;
    let c = img_shape.channels;
    if grad.len() != vox.len() * c {
        return shape_err(format!(
            "voxel gradient has {} values, expected {} voxels x {c} channels",
            grad.len(),
            vox.len()
        ));
    }
    let taps: Vec<Option<BilinearTaps<T>>> = vox.centers.par_iter().map(|&p| project_point(p, grid)).collect();
    let mut out = FeatureMap::zeros(img_shape);
    let plane = img_shape.plane();
    if plane == 0 {
        return Ok(out);
    }
    out.data_mut().par_chunks_mut(plane).enumerate().for_each(|(ch, dst)| {
        for (n, t) in taps.iter().enumerate() {
            if let Some(t) = t {
                t.scatter(dst, grad[n * c + ch]);
            }
        }
    });
    Ok(out)
}

fn bev_shape(spec: &VoxelGridSpec, channels: usize) -> Result<(Shape, [usize; 3])> {
    let dims = spec.dims()?;
    Ok((Shape::new(channels, dims[2], dims[0]), dims))
}

/// Reduces each `(iz, ix)` column over its in-view voxels.
///
/// Out-of-view voxels do not count towards occupancy. Empty columns are zero.
pub fn vertical_compress<T: Real>(vf: &VoxelFeatures<T>, mode: CompressMode) -> Result<BevFeatureMap<T>> {
    let c = vf.channels;
    let (shape, dims) = bev_shape(&vf.set.spec, c)?;
    let nx = dims[0];
    let plane = shape.plane();
    let mut occupancy = vec![0u32; plane];
    let mut acc = vec![T::zero(); shape.len()];
    for (n, idx) in vf.set.indices.iter().enumerate() {
        if vf.out_of_fov[n] {
            continue;
        }
        let cell = idx[2] * nx + idx[0];
        occupancy[cell] += 1;
        for ch in 0..c {
            acc[ch * plane + cell] = acc[ch * plane + cell] + vf.values[n * c + ch];
        }
    }
    if mode == CompressMode::Mean {
        for ch in 0..c {
            for cell in 0..plane {
                if occupancy[cell] > 0 {
                    let i = ch * plane + cell;
                    acc[i] = acc[i] / T::lit(occupancy[cell] as f64);
                }
            }
        }
    }
    Ok(BevFeatureMap { features: FeatureMap::from_vec(shape, acc)?, occupancy })
}

/// Adjoint of [`vertical_compress`]: each in-view voxel receives its column's
/// gradient, divided by occupancy in mean mode.
pub fn vertical_compress_backward<T: Real>(
    grad_bev: &FeatureMap<T>,
    vf: &VoxelFeatures<T>,
    mode: CompressMode,
) -> Result<Vec<T>> {
    let c = vf.channels;
    let (shape, dims) = bev_shape(&vf.set.spec, c)?;
    if grad_bev.shape() != shape {
        return shape_err(format!("BEV gradient {} vs expected {shape}", grad_bev.shape()));
    }
    let nx = dims[0];
    let plane = shape.plane();
    let mut occupancy = vec![0u32; plane];
    for (n, idx) in vf.set.indices.iter().enumerate() {
        if !vf.out_of_fov[n] {
            occupancy[idx[2] * nx + idx[0]] += 1;
        }
    }
    let g = grad_bev.data();
    let mut out = vec![T::zero(); vf.set.len() * c];
    for (n, idx) in vf.set.indices.iter().enumerate() {
        if vf.out_of_fov[n] {
            continue;
        }
        let cell = idx[2] * nx + idx[0];
        for ch in 0..c {
            let v = g[ch * plane + cell];
            out[n * c + ch] = match mode {
                CompressMode::Mean => v / T::lit(occupancy[cell] as f64),
                CompressMode::Sum => v,
            };
        }
    }
    Ok(out)
}

/// Dense view transform: samples all `X·Y·Z` voxel centres and compresses each
/// column, without materialising the voxel tensor.
///
/// Agrees bit-for-bit with `voxel_pull` + `vertical_compress` over
/// [`SparseVoxelSet::full`].
pub fn dense_grid_pull<T: Real>(
    img_feat: &FeatureMap<T>,
    spec: &VoxelGridSpec,
    grid: &AngularGridSpec,
    mode: CompressMode,
) -> Result<BevFeatureMap<T>> {
    check_image(img_feat.shape(), grid)?;
    let c = img_feat.channels();
    let (shape, [nx, ny, nz]) = bev_shape(spec, c)?;
    let plane = shape.plane();

    // Per row `iz`: channel-major values for that row plus occupancy.
    let rows: Vec<(Vec<T>, Vec<u32>)> = (0..nz)
        .into_par_iter()
        .map(|iz| {
            let mut vals = vec![T::zero(); c * nx];
            let mut occ = vec![0u32; nx];
            for ix in 0..nx {
                for iy in 0..ny {
                    if let Some(t) = project_point(spec.center::<T>([ix, iy, iz]), grid) {
                        occ[ix] += 1;
                        for ch in 0..c {
                            vals[ch * nx + ix] = vals[ch * nx + ix] + t.gather(img_feat.channel(ch));
                        }
                    }
                }
                if mode == CompressMode::Mean && occ[ix] > 0 {
                    for ch in 0..c {
                        vals[ch * nx + ix] = vals[ch * nx + ix] / T::lit(occ[ix] as f64);
                    }
                }
            }
            (vals, occ)
        })
        .collect();

    let mut data = vec![T::zero(); shape.len()];
    let mut occupancy = vec![0u32; plane];
    for (iz, (vals, occ)) in rows.into_iter().enumerate() {
        occupancy[iz * nx..(iz + 1) * nx].copy_from_slice(&occ);
        for ch in 0..c {
            data[ch * plane + iz * nx..ch * plane + (iz + 1) * nx].copy_from_slice(&vals[ch * nx..(ch + 1) * nx]);
        }
    }
    Ok(BevFeatureMap { features: FeatureMap::from_vec(shape, data)?, occupancy })
}

/// Adjoint of [`dense_grid_pull`] with respect to the image features.
pub fn dense_grid_pull_backward<T: Real>(
    grad_bev: &FeatureMap<T>,
    spec: &VoxelGridSpec,
    grid: &AngularGridSpec,
    img_shape: Shape,
    mode: CompressMode,
) -> Result<FeatureMap<T>> {
    check_image(img_shape, grid)?;
    let c = img_shape.channels;
    let (shape, [nx, ny, nz]) = bev_shape(spec, c)?;
    if grad_bev.shape() != shape {
        return shape_err(format!("BEV gradient {} vs expected {shape}", grad_bev.shape()));
    }
    // Column taps in (iz, ix) order, each column in ascending iy.
    let columns: Vec<Vec<BilinearTaps<T>>> = (0..nz * nx)
        .into_par_iter()
        .map(|cell| {
            let (iz, ix) = (cell / nx, cell % nx);
            (0..ny).filter_map(|iy| project_point(spec.center::<T>([ix, iy, iz]), grid)).collect()
        })
        .collect();
    let mut out = FeatureMap::zeros(img_shape);
    let plane_img = img_shape.plane();
    let plane_bev = shape.plane();
    if plane_img == 0 {
        return Ok(out);
    }
    let g = grad_bev.data();
    out.data_mut().par_chunks_mut(plane_img).enumerate().for_each(|(ch, dst)| {
        for (cell, taps) in columns.iter().enumerate() {
            if taps.is_empty() {
                continue;
            }
            let v = match mode {
                CompressMode::Mean => g[ch * plane_bev + cell] / T::lit(taps.len() as f64),
                CompressMode::Sum => g[ch * plane_bev + cell],
            };
            for t in taps {
                t.scatter(dst, v);
            }
        }
    });
    Ok(out)
}
