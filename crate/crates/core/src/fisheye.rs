// SPDX-License-Identifier: Apache-2.0

//! Dual-fisheye to equirectangular conversion.
//!
//! Cameras follow the equidistant model `r = f·θ·(1 + Σ kᵢ θ²ⁱ)`, with `θ` the
//! angle from the optical axis. A camera with yaw `ψ` looks along
//! `(cos ψ, sin ψ, 0)` in the rig frame; image `x` grows to the camera's right
//! and image `y` grows downwards.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::geometry::{cart_to_spherical, direction, spherical_to_pixel, AngularGridSpec, Point3};
use crate::sampling::{BilinearTaps, HorizontalEdge};

/// 8-bit interleaved RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.put(x, y, f(x, y));
            }
        }
        img
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `f64` copy, one plane per colour.
    fn planes(&self) -> [Vec<f64>; 3] {
        let mut p = [Vec::with_capacity(self.width * self.height), Vec::new(), Vec::new()];
        p[1].reserve(self.width * self.height);
        p[2].reserve(self.width * self.height);
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                p[c].push(f64::from(px[c]));
            }
        }
        p
    }

    /// Binary PPM (`P6`, maxval 255).
    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        Ok(())
    }

    pub fn read_ppm<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut fields = Vec::with_capacity(4);
        let mut line = String::new();
        while fields.len() < 4 {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("PPM header is truncated".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_owned));
        }
        if fields.len() != 4 || fields[0] != "P6" {
            return Err(Error::Format(format!("not a binary PPM header: {fields:?}")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM header value {s:?}")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("only maxval 255 is supported, got {maxval}")));
        }
        let mut data = vec![0u8; width * height * 3];
        r.read_exact(&mut data).map_err(|e| Error::Format(format!("PPM pixel data: {e}")))?;
        Ok(Self { width, height, data })
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_ppm(std::io::BufWriter::new(f))
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_ppm(std::fs::File::open(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FisheyeCalib {
    /// Optical centre `(x, y)` in pixels.
    pub center: [f64; 2],
    /// Pixels per radian.
    pub focal: f64,
    /// Full field of view, radians.
    pub fov: f64,
    /// Optical-axis yaw in the rig frame, radians.
    pub yaw: f64,
    /// Odd-polynomial distortion `k₁, k₂, …`.
    #[serde(default)]
    pub distortion: Vec<f64>,
}

impl FisheyeCalib {
    pub fn equidistant(center: [f64; 2], focal: f64, fov: f64, yaw: f64) -> Self {
        Self { center, focal, fov, yaw, distortion: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov > 0.0 && self.fov <= std::f64::consts::TAU) {
            return config_err(format!("fisheye fov must lie in (0, 2π], got {}", self.fov));
        }
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return config_err(format!("fisheye focal scale must be positive, got {}", self.focal));
        }
        if !self.center.iter().chain(&self.distortion).all(|v| v.is_finite()) || !self.yaw.is_finite() {
            return config_err("fisheye calibration has non-finite values");
        }
        Ok(())
    }

    pub fn axis(&self) -> Point3<f64> {
        let (s, c) = self.yaw.sin_cos();
        [c, s, 0.0]
    }

    fn right(&self) -> Point3<f64> {
        let (s, c) = self.yaw.sin_cos();
        [s, -c, 0.0]
    }

    /// Angle between `d` (unit) and the optical axis.
    pub fn off_axis_angle(&self, d: Point3<f64>) -> f64 {
        dot(d, self.axis()).clamp(-1.0, 1.0).acos()
    }

    /// Image radius for off-axis angle `theta`.
    pub fn radius(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        let mut poly = 1.0;
        let mut p = t2;
        for &k in &self.distortion {
            poly += k * p;
            p *= t2;
        }
        self.focal * theta * poly
    }

    fn radius_derivative(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        let mut d = 1.0;
        let mut p = t2;
        for (i, &k) in self.distortion.iter().enumerate() {
            d += (2 * i + 3) as f64 * k * p;
            p *= t2;
        }
        self.focal * d
    }

    /// Continuous pixel `(x, y)` of unit ray `d`; `None` outside the FoV.
    pub fn ray_to_pixel(&self, d: Point3<f64>) -> Option<(f64, f64)> {
        let theta = self.off_axis_angle(d);
        if theta > 0.5 * self.fov {
            return None;
        }
        let (rx, ry) = (dot(d, self.right()), -d[2]);
        let phi = ry.atan2(rx);
        let r = self.radius(theta);
        Some((self.center[0] + r * phi.cos(), self.center[1] + r * phi.sin()))
    }

    /// Unit ray through pixel `(x, y)`, inverting the radial polynomial by
    /// Newton iteration.
    pub fn pixel_to_ray(&self, x: f64, y: f64) -> Point3<f64> {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let r = dx.hypot(dy);
        let mut theta = r / self.focal;
        for _ in 0..50 {
            let step = (self.radius(theta) - r) / self.radius_derivative(theta);
            theta -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let phi = dy.atan2(dx);
        let (st, ct) = theta.sin_cos();
        let (a, rt) = (self.axis(), self.right());
        let (u, v) = (st * phi.cos(), st * phi.sin());
        // d = cosθ·axis + u·right − v·up
        [ct * a[0] + u * rt[0], ct * a[1] + u * rt[1], -v]
    }
}

fn dot(a: Point3<f64>, b: Point3<f64>) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Camera pair plus the blend band, as stored in a calibration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FisheyeRig {
    pub left: FisheyeCalib,
    pub right: FisheyeCalib,
    /// Width of the cross-fade around the bisector, radians.
    #[serde(default = "default_blend_band")]
    pub blend_band: f64,
}

pub fn default_blend_band() -> f64 {
    5f64.to_radians()
}

/// Equirectangular raster with its per-pixel validity.
#[derive(Debug, Clone, PartialEq)]
pub struct Equirect {
    pub image: RgbImage,
    pub valid: Vec<bool>,
}

fn sample_rgb(planes: &[Vec<f64>; 3], w: usize, h: usize, x: f64, y: f64, edge: HorizontalEdge) -> [f64; 3] {
    let taps = BilinearTaps::new(h, w, x, y, edge);
    [taps.gather(&planes[0]), taps.gather(&planes[1]), taps.gather(&planes[2])]
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn in_image(img: &RgbImage, x: f64, y: f64) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (img.width - 1) as f64 && y <= (img.height - 1) as f64
}

/// Blend weights `(left, right)` for a ray at off-axis angles `dl`, `dr`.
fn blend_weights(dl: f64, dr: f64, band: f64) -> (f64, f64) {
    if band <= 0.0 {
        return if dl <= dr { (1.0, 0.0) } else { (0.0, 1.0) };
    }
    let s = 0.5 * (dl - dr) / band;
    ((0.5 - s).clamp(0.0, 1.0), (0.5 + s).clamp(0.0, 1.0))
}

/// Resamples a fisheye pair onto `grid`. Each ray is drawn from the camera
/// whose axis is nearer, cross-fading linearly across `blend_band` around the
/// bisector. Rays neither camera sees are black and invalid.
pub fn fisheye_to_equirect(
    left: &RgbImage,
    right: &RgbImage,
    calib_left: &FisheyeCalib,
    calib_right: &FisheyeCalib,
    grid: &AngularGridSpec,
    blend_band: f64,
) -> Result<Equirect> {
    calib_left.validate()?;
    calib_right.validate()?;
    grid.validate()?;
    if left.width == 0 || left.height == 0 || right.width == 0 || right.height == 0 {
        return shape_err("fisheye images must be nonempty");
    }
    if !(blend_band >= 0.0 && blend_band.is_finite()) {
        return config_err(format!("blend band must be nonnegative, got {blend_band}"));
    }
    let (pl, pr) = (left.planes(), right.planes());
    let (w, h) = (grid.cols, grid.rows);
    let rows: Vec<(Vec<u8>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut rgb = vec![0u8; w * 3];
            let mut valid = vec![false; w];
            for col in 0..w {
                let (az, el) = grid.pixel_angles::<f64>(col, row);
                let d = direction(az, el);
                let hit =
                    |cal: &FisheyeCalib, img: &RgbImage| cal.ray_to_pixel(d).filter(|&(x, y)| in_image(img, x, y));
                let (hl, hr) = (hit(calib_left, left), hit(calib_right, right));
                let (mut wl, mut wr) =
                    blend_weights(calib_left.off_axis_angle(d), calib_right.off_axis_angle(d), blend_band);
                if hl.is_none() {
                    wl = 0.0;
                }
                if hr.is_none() {
                    wr = 0.0;
                }
                let total = wl + wr;
                if total <= 0.0 {
                    // Nearer camera misses but the other one sees the ray.
                    match (hl, hr) {
                        (Some(_), None) => wl = 1.0,
                        (None, Some(_)) => wr = 1.0,
                        _ => continue,
                    }
                }
                let total = wl + wr;
                let mut acc = [0.0; 3];
                if let Some((x, y)) = hl.filter(|_| wl > 0.0) {
                    let s = sample_rgb(&pl, left.width, left.height, x, y, HorizontalEdge::Clamp);
                    for c in 0..3 {
                        acc[c] += wl / total * s[c];
                    }
                }
                if let Some((x, y)) = hr.filter(|_| wr > 0.0) {
                    let s = sample_rgb(&pr, right.width, right.height, x, y, HorizontalEdge::Clamp);
                    for c in 0..3 {
                        acc[c] += wr / total * s[c];
                    }
                }
                for c in 0..3 {
                    rgb[col * 3 + c] = to_u8(acc[c]);
                }
                valid[col] = true;
            }
            (rgb, valid)
        })
        .collect();
    let mut image = RgbImage::new(w, h);
    let mut valid = Vec::with_capacity(w * h);
    for (r, (rgb, v)) in rows.into_iter().enumerate() {
        image.data[r * w * 3..(r + 1) * w * 3].copy_from_slice(&rgb);
        valid.extend(v);
    }
    Ok(Equirect { image, valid })
}

/// Forward model: renders the fisheye view of an equirectangular raster.
/// Pixels outside the FoV are black.
pub fn equirect_to_fisheye(
    eq: &RgbImage,
    grid: &AngularGridSpec,
    calib: &FisheyeCalib,
    width: usize,
    height: usize,
) -> Result<RgbImage> {
    calib.validate()?;
    grid.validate()?;
    if eq.width != grid.cols || eq.height != grid.rows {
        return shape_err(format!(
            "equirect image {}x{} does not match grid {}x{}",
            eq.width, eq.height, grid.cols, grid.rows
        ));
    }
    let planes = eq.planes();
    let rows: Vec<Vec<u8>> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut out = vec![0u8; width * 3];
            for x in 0..width {
                let d = calib.pixel_to_ray(x as f64, y as f64);
                if calib.off_axis_angle(d) > 0.5 * calib.fov {
                    continue;
                }
                let s = cart_to_spherical(d);
                let Ok((u, v)) = spherical_to_pixel(&s, grid) else { continue };
                let rgb = sample_rgb(&planes, eq.width, eq.height, u, v, HorizontalEdge::Cyclic);
                for c in 0..3 {
                    out[x * 3 + c] = to_u8(rgb[c]);
                }
            }
            out
        })
        .collect();
    Ok(RgbImage { width, height, data: rows.concat() })
}
