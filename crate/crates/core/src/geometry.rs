// SPDX-License-Identifier: Apache-2.0

//! Spherical coordinates and the equirectangular pixel mapping.
//!
//! Sensor frame: x forward, y left, z up. Azimuth is measured
//! counter-clockwise from +x (towards +y) and wrapped into `[-π, π)`;
//! elevation is positive above the horizontal plane.
//!
//! Pixel mapping: column `u = (az + π) / 2π · W`, row
//! `v = (el_max − el) / (el_max − el_min) · H`. Integer coordinates address
//! pixel samples, so column `k` looks along azimuth `−π + 2πk/W` and row `r`
//! along elevation `el_max − r·Δel`.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::scalar::Real;

pub type Point3<T> = [T; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalCoord<T> {
    pub azimuth: T,
    pub elevation: T,
    pub range: T,
}

impl<T: Real> SphericalCoord<T> {
    /// Unit direction for this azimuth/elevation.
    pub fn direction(&self) -> Point3<T> {
        direction(self.azimuth, self.elevation)
    }

    /// Reconstructs the Cartesian point `range · direction`.
    pub fn to_cartesian(&self) -> Point3<T> {
        let d = self.direction();
        [d[0] * self.range, d[1] * self.range, d[2] * self.range]
    }
}

/// Unit vector for the given azimuth and elevation.
#[inline]
pub fn direction<T: Real>(azimuth: T, elevation: T) -> Point3<T> {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    [ce * ca, ce * sa, se]
}

/// Wraps an angle into `[-π, π)`.
#[inline]
pub fn wrap_angle<T: Real>(a: T) -> T {
    let pi = T::PI();
    let two_pi = pi + pi;
    let mut w = a;
    if w < -pi || w >= pi {
        w = (a + pi) - two_pi * ((a + pi) / two_pi).floor() - pi;
    }
    if w >= pi {
        w = w - two_pi;
    }
    if w < -pi {
        w = -pi;
    }
    w
}

/// Converts a point to spherical coordinates. The origin maps to all zeros.
pub fn cart_to_spherical<T: Real>(p: Point3<T>) -> SphericalCoord<T> {
    let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if range == T::zero() {
        return SphericalCoord { azimuth: T::zero(), elevation: T::zero(), range };
    }
    let mut azimuth = p[1].atan2(p[0]);
    if azimuth >= T::PI() {
        azimuth = -T::PI();
    }
    let s = (p[2] / range).max(-T::one()).min(T::one());
    SphericalCoord { azimuth, elevation: s.asin(), range }
}

/// Equirectangular grid geometry: `rows × cols` over a full azimuth circle and
/// the elevation band `[elevation_min, elevation_max]` (radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularGridSpec {
    pub rows: usize,
    pub cols: usize,
    pub elevation_min: f64,
    pub elevation_max: f64,
}

/// The elevation of a query fell outside the grid's band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutOfFov {
    pub elevation: f64,
}

impl AngularGridSpec {
    pub fn new(rows: usize, cols: usize, elevation_min: f64, elevation_max: f64) -> Result<Self> {
        let g = Self { rows, cols, elevation_min, elevation_max };
        g.validate()?;
        Ok(g)
    }

    /// Full sphere: elevation `[-π/2, π/2]`.
    pub fn full_sphere(rows: usize, cols: usize) -> Self {
        Self { rows, cols, elevation_min: -std::f64::consts::FRAC_PI_2, elevation_max: std::f64::consts::FRAC_PI_2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return config_err(format!("angular grid {}x{} is empty", self.rows, self.cols));
        }
        if !(self.elevation_min.is_finite() && self.elevation_max.is_finite())
            || self.elevation_min >= self.elevation_max
        {
            return config_err(format!(
                "elevation band [{}, {}] is not increasing",
                self.elevation_min, self.elevation_max
            ));
        }
        Ok(())
    }

    /// Angular step between adjacent columns.
    pub fn azimuth_step(&self) -> f64 {
        std::f64::consts::TAU / self.cols as f64
    }

    /// Angular step between adjacent rows.
    pub fn elevation_step(&self) -> f64 {
        (self.elevation_max - self.elevation_min) / self.rows as f64
    }

    /// Azimuth/elevation of the pixel sample at integer `(col, row)`.
    pub fn pixel_angles<T: Real>(&self, col: usize, row: usize) -> (T, T) {
        let az = T::lit(-std::f64::consts::PI)
            + T::lit(std::f64::consts::TAU) * T::from_usize_lossy(col) / T::from_usize_lossy(self.cols);
        let el = T::lit(self.elevation_max)
            - T::from_usize_lossy(row) * T::lit(self.elevation_max - self.elevation_min)
                / T::from_usize_lossy(self.rows);
        (az, el)
    }
}

/// Maps a spherical coordinate to continuous `(u, v)` = (column, row).
///
/// The caller decides how to round. Elevations outside the grid band, widened
/// by a few ulps so decoded pixel rays re-project, yield [`OutOfFov`].
pub fn spherical_to_pixel<T: Real>(s: &SphericalCoord<T>, grid: &AngularGridSpec) -> Result<(T, T), OutOfFov> {
    let el_min = T::lit(grid.elevation_min);
    let el_max = T::lit(grid.elevation_max);
    let slack = T::epsilon() * T::lit(4.0) * (T::one() + el_min.abs().max(el_max.abs()));
    if !(s.elevation >= el_min - slack && s.elevation <= el_max + slack) {
        return Err(OutOfFov { elevation: s.elevation.to_f64_lossy() });
    }
    let pi = T::PI();
    let u = (s.azimuth + pi) / (pi + pi) * T::from_usize_lossy(grid.cols);
    let v = (el_max - s.elevation) / (el_max - el_min) * T::from_usize_lossy(grid.rows);
    Ok((u, v))
}

/// Optional rigid transform `p ↦ R·p + t` that brings points into the
/// common sensor frame before projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] }
    }
}

impl RigidTransform {
    /// Rotation about +z by `yaw` followed by a translation.
    pub fn from_yaw_translation(yaw: f64, translation: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Self { rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], translation }
    }

    pub fn apply<T: Real>(&self, p: Point3<T>) -> Point3<T> {
        let mut out = [T::zero(); 3];
        for (i, o) in out.iter_mut().enumerate() {
            let r = &self.rotation[i];
            *o = T::lit(r[0]) * p[0] + T::lit(r[1]) * p[1] + T::lit(r[2]) * p[2] + T::lit(self.translation[i]);
        }
        out
    }
}
