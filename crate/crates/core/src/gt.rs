// SPDX-License-Identifier: Apache-2.0

//! BEV ground truth from 3D boxes, and per-frame annotation filtering.
//!
//! The BEV grid is centred on the sensor. Column `j` spans sensor `x`, row `i`
//! spans sensor `y`, both increasing with the index, which matches the layout
//! produced by the view transformer.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::geometry::Point3;
use crate::scalar::Real;
use crate::task_losses::BevTargets;
use crate::tensor::{FeatureMap, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxKind {
    Static,
    Dynamic,
}

impl BoxKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoxKind::Static => "static",
            BoxKind::Dynamic => "dynamic",
        }
    }
}

/// Oriented 3D box. `dims` is `(length, width, height)` along the box's own
/// `x`, `y`, `z` axes; `yaw` rotates the box about `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Box3D {
    pub center: Point3<f64>,
    pub dims: [f64; 3],
    pub yaw: f64,
    pub category: String,
    pub kind: BoxKind,
    pub frame_id: Option<u64>,
}

impl Box3D {
    pub fn new(center: Point3<f64>, dims: [f64; 3], yaw: f64) -> Self {
        Self { center, dims, yaw, category: "car".into(), kind: BoxKind::Static, frame_id: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dims.iter().all(|&d| d > 0.0 && d.is_finite()) {
            return config_err(format!("box dims must be positive, got {:?}", self.dims));
        }
        Ok(())
    }

    /// `(x, y)` expressed in the box frame.
    fn local_xy(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Ground-plane footprint test, boundary inclusive.
    pub fn footprint_contains(&self, x: f64, y: f64) -> bool {
        let (lx, ly) = self.local_xy(x, y);
        lx.abs() <= 0.5 * self.dims[0] && ly.abs() <= 0.5 * self.dims[1]
    }

    /// Axis-aligned bounds of the footprint: `[x_min, x_max, y_min, y_max]`.
    fn footprint_bounds(&self) -> [f64; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (0.5 * self.dims[0], 0.5 * self.dims[1]);
        let ex = (c * hl).abs() + (s * hw).abs();
        let ey = (s * hl).abs() + (c * hw).abs();
        [self.center[0] - ex, self.center[0] + ex, self.center[1] - ey, self.center[1] + ey]
    }
}

/// Whether `p` lies inside `b`, boundary inclusive.
pub fn box_contains(p: Point3<f64>, b: &Box3D) -> bool {
    b.footprint_contains(p[0], p[1]) && (p[2] - b.center[2]).abs() <= 0.5 * b.dims[2]
}

/// Square BEV raster centred on the sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevGridSpec {
    pub rows: usize,
    pub cols: usize,
    /// Side length in meters.
    pub extent: f64,
}

impl Default for BevGridSpec {
    fn default() -> Self {
        Self { rows: 200, cols: 200, extent: 100.0 }
    }
}

impl BevGridSpec {
    pub fn new(rows: usize, cols: usize, extent: f64) -> Result<Self> {
        let s = Self { rows, cols, extent };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.rows != self.cols {
            return config_err(format!("BEV grid must be square and nonempty, got {}x{}", self.rows, self.cols));
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return config_err(format!("BEV extent must be positive, got {}", self.extent));
        }
        Ok(())
    }

    pub fn meters_per_cell(&self) -> f64 {
        self.extent / self.cols as f64
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Sensor-frame `(x, y)` of the centre of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let m = self.meters_per_cell();
        let h = 0.5 * self.extent;
        (-h + (col as f64 + 0.5) * m, -h + (row as f64 + 0.5) * m)
    }

    /// Continuous `(row, col)` of a sensor-frame point, in cell units.
    pub fn to_cell_coords(&self, x: f64, y: f64) -> (f64, f64) {
        let m = self.meters_per_cell();
        let h = 0.5 * self.extent;
        ((y + h) / m - 0.5, (x + h) / m - 0.5)
    }

    fn index_range(&self, lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
        let m = self.meters_per_cell();
        let h = 0.5 * self.extent;
        let a = ((lo + h) / m - 0.5).floor().max(0.0);
        let b = ((hi + h) / m - 0.5).ceil() + 1.0;
        let a = (a as usize).min(n);
        let b = if b <= 0.0 { 0 } else { (b as usize).min(n) };
        a..b.max(a)
    }
}

impl fmt::Display for BevGridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}@{}m", self.rows, self.cols, self.extent)
    }
}

impl FromStr for BevGridSpec {
    type Err = Error;
    /// Parses `ROWSxCOLS@EXTENTm`, e.g. `200x200@100m`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("expected ROWSxCOLS@EXTENTm, got {s:?}"));
        let (dims, ext) = s.trim().split_once('@').ok_or_else(bad)?;
        let (r, c) = dims.split_once('x').ok_or_else(bad)?;
        let ext = ext.strip_suffix('m').unwrap_or(ext);
        Self::new(r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?, ext.parse().map_err(|_| bad())?)
    }
}

/// Per-cell owning box: `0` is background, `k + 1` is box `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<u32>,
}

impl InstanceMap {
    pub fn seg(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i != 0).collect()
    }

    pub fn positive_cells(&self) -> usize {
        self.ids.iter().filter(|&&i| i != 0).count()
    }

    /// Number of instances addressed by the map (largest id).
    pub fn max_id(&self) -> u32 {
        self.ids.iter().copied().max().unwrap_or(0)
    }

    /// Mean cell-unit `(row, col)` of each instance's cells, indexed by
    /// `id − 1`; `None` for instances with no cells.
    pub fn centroids(&self) -> Vec<Option<(f64, f64)>> {
        let n = self.max_id() as usize;
        let mut acc = vec![(0.0f64, 0.0f64, 0usize); n];
        for (k, &id) in self.ids.iter().enumerate() {
            if id != 0 {
                let a = &mut acc[id as usize - 1];
                a.0 += (k / self.cols) as f64;
                a.1 += (k % self.cols) as f64;
                a.2 += 1;
            }
        }
        acc.into_iter().map(|(r, c, n)| (n > 0).then(|| (r / n as f64, c / n as f64))).collect()
    }
}

/// Marks every cell whose centre lies inside a box footprint. Later boxes
/// overwrite earlier ones in the instance map.
pub fn rasterize_boxes(boxes: &[Box3D], spec: &BevGridSpec) -> Result<InstanceMap> {
    spec.validate()?;
    for b in boxes {
        b.validate()?;
    }
    let (rows, cols) = (spec.rows, spec.cols);
    let mut ids = vec![0u32; rows * cols];
    for (k, b) in boxes.iter().enumerate() {
        let [x0, x1, y0, y1] = b.footprint_bounds();
        let col_range = spec.index_range(x0, x1, cols);
        let id = u32::try_from(k + 1).map_err(|_| Error::InvalidConfig("too many boxes".into()))?;
        for r in spec.index_range(y0, y1, rows) {
            for c in col_range.clone() {
                let (x, y) = spec.cell_center(r, c);
                if b.footprint_contains(x, y) {
                    ids[r * cols + c] = id;
                }
            }
        }
    }
    Ok(InstanceMap { rows, cols, ids })
}

/// Gaussian of cell distance to each instance centroid, max-composited.
pub fn make_centerness<T: Real>(inst: &InstanceMap, sigma_cells: f64) -> Result<FeatureMap<T>> {
    if !(sigma_cells > 0.0 && sigma_cells.is_finite()) {
        return config_err(format!("centerness sigma must be positive, got {sigma_cells}"));
    }
    let centroids: Vec<(f64, f64)> = inst.centroids().into_iter().flatten().collect();
    let (rows, cols) = (inst.rows, inst.cols);
    let k = -0.5 / (sigma_cells * sigma_cells);
    let data: Vec<T> = (0..rows * cols)
        .into_par_iter()
        .map(|idx| {
            let (r, c) = ((idx / cols) as f64, (idx % cols) as f64);
            let v = centroids
                .iter()
                .map(|&(cr, cc)| ((r - cr).powi(2) + (c - cc).powi(2)) * k)
                .fold(f64::NEG_INFINITY, f64::max);
            if v == f64::NEG_INFINITY {
                T::zero()
            } else {
                T::lit(v.exp())
            }
        })
        .collect();
    FeatureMap::from_vec(Shape::new(1, rows, cols), data)
}

/// Per-cell meters from the cell centre to the owning instance centroid.
/// Channel 0 is `x`, channel 1 is `y`. Returns the field and the valid mask
/// (the instance interiors).
pub fn make_offset<T: Real>(inst: &InstanceMap, spec: &BevGridSpec) -> Result<(FeatureMap<T>, Vec<bool>)> {
    spec.validate()?;
    if inst.rows != spec.rows || inst.cols != spec.cols {
        return crate::error::shape_err("instance map does not match the BEV grid");
    }
    let m = spec.meters_per_cell();
    let centroids = inst.centroids();
    let (rows, cols) = (spec.rows, spec.cols);
    let mut off = FeatureMap::zeros(Shape::new(2, rows, cols));
    let plane = rows * cols;
    for (k, &id) in inst.ids.iter().enumerate() {
        if id == 0 {
            continue;
        }
        let Some((cr, cc)) = centroids[id as usize - 1] else { continue };
        let (r, c) = ((k / cols) as f64, (k % cols) as f64);
        off.data_mut()[k] = T::lit((cc - c) * m);
        off.data_mut()[plane + k] = T::lit((cr - r) * m);
    }
    Ok((off, inst.seg()))
}

/// Segmentation, centerness and offset targets for one frame.
pub fn build_targets<T: Real>(
    boxes: &[Box3D],
    spec: &BevGridSpec,
    sigma_cells: f64,
) -> Result<(BevTargets<T>, InstanceMap)> {
    let inst = rasterize_boxes(boxes, spec)?;
    let centerness = make_centerness(&inst, sigma_cells)?;
    let (offset, valid) = make_offset(&inst, spec)?;
    Ok((BevTargets { seg: inst.seg(), centerness, offset, valid }, inst))
}

/// Static boxes are kept when they contain at least `min_points` points of
/// the frame's cloud; dynamic boxes are kept when their frame id matches.
/// Order is preserved.
pub fn filter_static_boxes(
    boxes: &[Box3D],
    cloud: &[Point3<f64>],
    frame_id: u64,
    min_points: usize,
) -> Result<Vec<Box3D>> {
    let mut keep = Vec::with_capacity(boxes.len());
    for (index, b) in boxes.iter().enumerate() {
        let retain = match b.kind {
            BoxKind::Dynamic => b.frame_id.ok_or(Error::MissingFrameId { index })? == frame_id,
            BoxKind::Static => {
                min_points == 0 || cloud.par_iter().filter(|&&p| box_contains(p, b)).count() >= min_points
            }
        };
        if retain {
            keep.push(b.clone());
        }
    }
    Ok(keep)
}

/// The rejected distance heuristic: static boxes are kept when their centre
/// is within `max_range` meters of the sensor, regardless of occlusion.
/// Dynamic boxes follow the frame-id rule.
pub fn filter_static_boxes_by_distance(boxes: &[Box3D], frame_id: u64, max_range: f64) -> Result<Vec<Box3D>> {
    let mut keep = Vec::with_capacity(boxes.len());
    for (index, b) in boxes.iter().enumerate() {
        let retain = match b.kind {
            BoxKind::Dynamic => b.frame_id.ok_or(Error::MissingFrameId { index })? == frame_id,
            BoxKind::Static => b.center[0].hypot(b.center[1]) <= max_range,
        };
        if retain {
            keep.push(b.clone());
        }
    }
    Ok(keep)
}

/// Parses boxes, one per line: `kind category cx cy cz l w h yaw [frame_id]`.
/// Blank lines and `#` comments are skipped.
pub fn parse_boxes(text: &str) -> Result<Vec<Box3D>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Format(format!("boxes line {}: {m}", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 9 && f.len() != 10 {
            return Err(bad(&format!("expected 9 or 10 fields, got {}", f.len())));
        }
        let kind = match f[0] {
            "static" => BoxKind::Static,
            "dynamic" => BoxKind::Dynamic,
            k => return Err(bad(&format!("unknown kind {k:?}"))),
        };
        let mut v = [0.0f64; 7];
        for (slot, s) in v.iter_mut().zip(&f[2..9]) {
            *slot = s.parse().map_err(|_| bad(&format!("bad number {s:?}")))?;
        }
        let frame_id = match f.get(9) {
            Some(s) => Some(s.parse().map_err(|_| bad(&format!("bad frame id {s:?}")))?),
            None => None,
        };
        let b = Box3D {
            center: [v[0], v[1], v[2]],
            dims: [v[3], v[4], v[5]],
            yaw: v[6],
            category: f[1].to_string(),
            kind,
            frame_id,
        };
        b.validate().map_err(|e| bad(&e.to_string()))?;
        out.push(b);
    }
    Ok(out)
}

pub fn format_boxes(boxes: &[Box3D]) -> String {
    let mut s = String::new();
    for b in boxes {
        let [cx, cy, cz] = b.center;
        let [l, w, h] = b.dims;
        s += &format!("{} {} {cx} {cy} {cz} {l} {w} {h} {}", b.kind.as_str(), b.category, b.yaw);
        if let Some(id) = b.frame_id {
            s += &format!(" {id}");
        }
        s.push('\n');
    }
    s
}
