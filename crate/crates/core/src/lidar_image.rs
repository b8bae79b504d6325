// SPDX-License-Identifier: Apache-2.0

//! Unified LiDAR image: range, intensity and ambient on an equirectangular
//! grid, plus the `PLX1` point-cloud file format.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{config_err, Error, Result};
use crate::geometry::{cart_to_spherical, direction, spherical_to_pixel, AngularGridSpec, Point3};
use crate::scalar::Real;
use crate::tensor::{FeatureMap, Shape};

pub const PLX_MAGIC: &[u8; 4] = b"PLX1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint<T> {
    pub position: Point3<T>,
    pub intensity: T,
    pub ambient: Option<T>,
}

impl<T: Real> LidarPoint<T> {
    pub fn new(position: Point3<T>, intensity: T) -> Self {
        Self { position, intensity, ambient: None }
    }

    pub fn with_ambient(mut self, ambient: T) -> Self {
        self.ambient = Some(ambient);
        self
    }
}

/// Three-channel equirectangular LiDAR image with a validity mask.
///
/// Pixels without a return hold zero in every channel and `false` in the
/// mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoLidarImage<T> {
    pub grid: AngularGridSpec,
    pub range: Vec<T>,
    pub intensity: Vec<T>,
    pub ambient: Vec<T>,
    pub mask: Vec<bool>,
    /// Number of encoded points that carried no ambient reading.
    pub missing_ambient: usize,
    /// Number of input points skipped for lying outside the elevation band.
    pub out_of_fov: usize,
}

impl<T: Real> PanoLidarImage<T> {
    pub fn empty(grid: AngularGridSpec) -> Self {
        let n = grid.rows * grid.cols;
        Self {
            grid,
            range: vec![T::zero(); n],
            intensity: vec![T::zero(); n],
            ambient: vec![T::zero(); n],
            mask: vec![false; n],
            missing_ambient: 0,
            out_of_fov: 0,
        }
    }

    /// True when every encoded point carried an ambient reading.
    pub fn has_ambient(&self) -> bool {
        self.missing_ambient == 0
    }

    pub fn valid_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Raw channels as a `3×H×W` map (range, intensity, ambient).
    pub fn to_feature_map(&self) -> FeatureMap<T> {
        let mut data = Vec::with_capacity(self.range.len() * 3);
        data.extend_from_slice(&self.range);
        data.extend_from_slice(&self.intensity);
        data.extend_from_slice(&self.ambient);
        FeatureMap::from_vec(Shape::new(3, self.grid.rows, self.grid.cols), data).expect("channel lengths match grid")
    }

    /// Validity mask as a `1×H×W` map of zeros and ones.
    pub fn mask_map(&self) -> FeatureMap<T> {
        let data = self.mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        FeatureMap::from_vec(Shape::new(1, self.grid.rows, self.grid.cols), data).expect("mask length matches grid")
    }
}

/// Pixel hit by a point under round-to-nearest, or `None` outside the band.
pub fn project_to_pixel<T: Real>(p: Point3<T>, grid: &AngularGridSpec) -> Option<(usize, usize)> {
    let s = cart_to_spherical(p);
    let (u, v) = spherical_to_pixel(&s, grid).ok()?;
    let col = u.round().to_usize().unwrap_or(0) % grid.cols;
    let row = v.round().to_usize().unwrap_or(0).min(grid.rows - 1);
    Some((row, col))
}

/// Total order used to resolve pixel collisions: nearest range first, then
/// the remaining payload so the winner never depends on input order.
fn closer<T: Real>(a: &(T, T, T), b: &(T, T, T)) -> bool {
    let key = |t: &(T, T, T)| [t.0.to_f64_lossy(), t.1.to_f64_lossy(), t.2.to_f64_lossy()];
    let (ka, kb) = (key(a), key(b));
    for i in 0..3 {
        match ka[i].total_cmp(&kb[i]) {
            Ordering::Less => return true,
            Ordering::Greater => return false,
            Ordering::Equal => {}
        }
    }
    false
}

/// Projects a point cloud onto the grid, keeping the nearest return per pixel.
pub fn encode_pointcloud<T: Real>(points: &[LidarPoint<T>], grid: &AngularGridSpec) -> Result<PanoLidarImage<T>> {
    grid.validate()?;
    let mut img = PanoLidarImage::empty(*grid);
    for p in points {
        let Some((row, col)) = project_to_pixel(p.position, grid) else {
            img.out_of_fov += 1;
            continue;
        };
        let ambient = match p.ambient {
            Some(a) => a,
            None => {
                img.missing_ambient += 1;
                T::zero()
            }
        };
        let range = cart_to_spherical(p.position).range;
        let cand = (range, p.intensity, ambient);
        let i = row * grid.cols + col;
        if !img.mask[i] || closer(&cand, &(img.range[i], img.intensity[i], img.ambient[i])) {
            img.mask[i] = true;
            img.range[i] = cand.0;
            img.intensity[i] = cand.1;
            img.ambient[i] = cand.2;
        }
    }
    Ok(img)
}

/// Reconstructs one point per valid pixel along the pixel-sample ray.
pub fn decode_range_image<T: Real>(img: &PanoLidarImage<T>) -> Vec<LidarPoint<T>> {
    let g = &img.grid;
    let mut out = Vec::new();
    for row in 0..g.rows {
        for col in 0..g.cols {
            let i = row * g.cols + col;
            if !img.mask[i] {
                continue;
            }
            let (az, el) = g.pixel_angles::<T>(col, row);
            let d = direction(az, el);
            let r = img.range[i];
            out.push(LidarPoint {
                position: [d[0] * r, d[1] * r, d[2] * r],
                intensity: img.intensity[i],
                ambient: Some(img.ambient[i]),
            });
        }
    }
    out
}

/// Per-channel scales used to bring the LiDAR image into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationStats {
    pub max_range: f64,
    pub intensity_scale: f64,
    pub ambient_scale: f64,
}

/// Range divided by the detection range; intensity and ambient divided by
/// their scales and clamped to `[0, 1]`. Masked-out pixels stay zero.
pub fn normalize_lidar_image<T: Real>(img: &PanoLidarImage<T>, stats: &NormalizationStats) -> Result<FeatureMap<T>> {
    for (name, s) in [
        ("max_range", stats.max_range),
        ("intensity_scale", stats.intensity_scale),
        ("ambient_scale", stats.ambient_scale),
    ] {
        if !(s > 0.0 && s.is_finite()) {
            return config_err(format!("{name} must be positive, got {s}"));
        }
    }
    let (mr, is, ams) = (T::lit(stats.max_range), T::lit(stats.intensity_scale), T::lit(stats.ambient_scale));
    let unit = |x: T| x.max(T::zero()).min(T::one());
    let g = &img.grid;
    let shape = Shape::new(3, g.rows, g.cols);
    let plane = shape.plane();
    let mut out = FeatureMap::zeros(shape);
    let data = out.data_mut();
    for i in 0..plane {
        if !img.mask[i] {
            continue;
        }
        data[i] = img.range[i] / mr;
        data[plane + i] = unit(img.intensity[i] / is);
        data[2 * plane + i] = unit(img.ambient[i] / ams);
    }
    Ok(out)
}

/// Writes points as `PLX1`: 12-byte header (magic, `u32` floats per point,
/// `u32` count) followed by little-endian `f32` records
/// `x y z intensity [ambient]`. Ambient is written iff every point has it.
pub fn write_plx<T: Real, W: Write>(points: &[LidarPoint<T>], mut w: W) -> Result<()> {
    let with_ambient = !points.is_empty() && points.iter().all(|p| p.ambient.is_some());
    let stride: u32 = if with_ambient { 5 } else { 4 };
    let count = u32::try_from(points.len()).map_err(|_| Error::Format("too many points for PLX1".into()))?;
    let mut buf = Vec::with_capacity(12 + points.len() * stride as usize * 4);
    buf.extend_from_slice(PLX_MAGIC);
    buf.extend_from_slice(&stride.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    for p in points {
        let mut rec = vec![p.position[0], p.position[1], p.position[2], p.intensity];
        if with_ambient {
            rec.push(p.ambient.unwrap_or(T::zero()));
        }
        for v in rec {
            buf.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_plx<T: Real, R: Read>(mut r: R) -> Result<Vec<LidarPoint<T>>> {
    let mut header = [0u8; 12];
    r.read_exact(&mut header).map_err(|e| Error::Format(format!("PLX1 header: {e}")))?;
    if &header[..4] != PLX_MAGIC {
        return Err(Error::Format("bad PLX1 magic".into()));
    }
    let stride = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if stride != 4 && stride != 5 {
        return Err(Error::Format(format!("PLX1 point size must be 4 or 5 floats, got {stride}")));
    }
    let mut body = vec![0u8; stride * count * 4];
    r.read_exact(&mut body).map_err(|e| Error::Format(format!("PLX1 body: {e}")))?;
    let vals: Vec<T> = body.chunks_exact(4).map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64)).collect();
    Ok(vals
        .chunks_exact(stride)
        .map(|rec| LidarPoint {
            position: [rec[0], rec[1], rec[2]],
            intensity: rec[3],
            ambient: (stride == 5).then(|| rec[4]),
        })
        .collect())
}

pub fn load_plx<T: Real>(path: impl AsRef<Path>) -> Result<Vec<LidarPoint<T>>> {
    read_plx(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn save_plx<T: Real>(points: &[LidarPoint<T>], path: impl AsRef<Path>) -> Result<()> {
    write_plx(points, std::io::BufWriter::new(std::fs::File::create(path)?))
}
