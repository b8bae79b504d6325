// SPDX-License-Identifier: Apache-2.0

//! Range-cropped IoU, efficiency ratio and a latency harness.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{config_err, shape_err, Result};
use crate::gt::BevGridSpec;

/// Crop side lengths reported by [`EvalReport`], in meters.
pub const EVAL_RANGES: [f64; 3] = [100.0, 50.0, 20.0];

/// IoU of one crop. `empty_union` marks the both-empty case, scored 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeIou {
    pub iou: f64,
    pub intersection: usize,
    pub union: usize,
    pub empty_union: bool,
}

/// Half-open `[start, end)` index window of the centred crop of side `side_m`.
pub fn crop_window(spec: &BevGridSpec, side_m: f64) -> Result<(usize, usize)> {
    spec.validate()?;
    if !(side_m > 0.0) || side_m > spec.extent * (1.0 + 1e-12) {
        return config_err(format!("crop side {side_m} m must lie in (0, {}]", spec.extent));
    }
    let n = ((side_m / spec.meters_per_cell()).round() as usize).clamp(1, spec.cols);
    let start = (spec.cols - n) / 2;
    Ok((start, start + n))
}

/// `|pred ∩ gt| / |pred ∪ gt|` over the centred `side_m` square.
pub fn range_iou(pred: &[bool], gt: &[bool], spec: &BevGridSpec, side_m: f64) -> Result<RangeIou> {
    if pred.len() != gt.len() || pred.len() != spec.cells() {
        return shape_err(format!(
            "masks have {} and {} cells, grid {spec} has {}",
            pred.len(),
            gt.len(),
            spec.cells()
        ));
    }
    let (a, b) = crop_window(spec, side_m)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for r in a..b {
        for c in a..b {
            let k = r * spec.cols + c;
            inter += usize::from(pred[k] && gt[k]);
            union += usize::from(pred[k] || gt[k]);
        }
    }
    let empty_union = union == 0;
    let iou = if empty_union { 1.0 } else { inter as f64 / union as f64 };
    Ok(RangeIou { iou, intersection: inter, union, empty_union })
}

/// IoU percent per million parameters.
pub fn efficiency_ratio(iou: f64, params: f64) -> Result<f64> {
    if !(params > 0.0) {
        return config_err(format!("parameter count must be positive, got {params}"));
    }
    Ok(100.0 * iou / (params / 1e6))
}

pub const DEFAULT_BENCH_ITERS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Throughput {
    pub latency_ms_mean: f64,
    pub latency_ms_stdev: f64,
    pub fps: f64,
}

/// Times `iters` calls of `f` after `warmup` untimed calls. Latency is floored
/// at one nanosecond so `fps` stays finite.
pub fn throughput_bench(mut f: impl FnMut(), warmup: usize, iters: usize) -> Result<Throughput> {
    if iters == 0 {
        return config_err("benchmark needs at least one timed iteration");
    }
    for _ in 0..warmup {
        f();
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        f();
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let n = iters as f64;
    let mean = (samples.iter().sum::<f64>() / n).max(1e-6);
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(Throughput { latency_ms_mean: mean, latency_ms_stdev: var.sqrt(), fps: 1000.0 / mean })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub iou100: f64,
    pub iou50: f64,
    pub iou20: f64,
    pub er: Option<f64>,
    pub fps: Option<f64>,
    pub latency_ms: Option<f64>,
    /// Crops whose union was empty.
    pub empty: Vec<&'static str>,
}

impl EvalReport {
    /// IoU at the three standard ranges; ER when `params` is given, computed
    /// from the 100 m IoU.
    pub fn evaluate(pred: &[bool], gt: &[bool], spec: &BevGridSpec, params: Option<f64>) -> Result<Self> {
        let names = ["iou100", "iou50", "iou20"];
        let mut vals = [0.0; 3];
        let mut empty = Vec::new();
        for (k, side) in EVAL_RANGES.iter().enumerate() {
            let side = side.min(spec.extent);
            let r = range_iou(pred, gt, spec, side)?;
            vals[k] = r.iou;
            if r.empty_union {
                empty.push(names[k]);
            }
        }
        let er = params.map(|p| efficiency_ratio(vals[0], p)).transpose()?;
        Ok(Self { iou100: vals[0], iou50: vals[1], iou20: vals[2], er, fps: None, latency_ms: None, empty })
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "iou100={:?}", self.iou100).unwrap();
        writeln!(s, "iou50={:?}", self.iou50).unwrap();
        writeln!(s, "iou20={:?}", self.iou20).unwrap();
        if let Some(v) = self.er {
            writeln!(s, "er={v:?}").unwrap();
        }
        if let Some(v) = self.fps {
            writeln!(s, "fps={v:?}").unwrap();
        }
        if let Some(v) = self.latency_ms {
            writeln!(s, "latency_ms={v:?}").unwrap();
        }
        if !self.empty.is_empty() {
            writeln!(s, "empty_union={}", self.empty.join(",")).unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> BevGridSpec {
        BevGridSpec::default()
    }

    #[test]
    fn crop_windows_nest() {
        let s = grid();
        assert_eq!(crop_window(&s, 100.0).unwrap(), (0, 200));
        assert_eq!(crop_window(&s, 50.0).unwrap(), (50, 150));
        assert_eq!(crop_window(&s, 20.0).unwrap(), (80, 120));
        assert!(crop_window(&s, 120.0).is_err());
    }

    #[test]
    fn unit_cases() {
        let s = grid();
        let mut a = vec![false; s.cells()];
        let mut b = vec![false; s.cells()];
        for k in 20_000..20_100 {
            a[k] = true;
        }
        assert_eq!(range_iou(&a, &a, &s, 100.0).unwrap().iou, 1.0);
        for k in 20_200..20_300 {
            b[k] = true;
        }
        assert_eq!(range_iou(&a, &b, &s, 100.0).unwrap().iou, 0.0);
        let union: Vec<bool> = a.iter().zip(&b).map(|(&x, &y)| x || y).collect();
        assert_eq!(range_iou(&union, &a, &s, 100.0).unwrap().iou, 0.5);
    }

    #[test]
    fn empty_union_is_flagged() {
        let s = grid();
        let z = vec![false; s.cells()];
        let r = range_iou(&z, &z, &s, 20.0).unwrap();
        assert!(r.empty_union && r.iou == 1.0);
    }

    #[test]
    fn efficiency_ratio_scale() {
        assert!((efficiency_ratio(0.322, 10.59e6).unwrap() - 3.04).abs() < 0.02);
        assert_eq!(efficiency_ratio(0.0, 5e6).unwrap(), 0.0);
        let a = efficiency_ratio(0.4, 2e6).unwrap();
        assert_eq!(efficiency_ratio(0.4, 4e6).unwrap(), a / 2.0);
        assert!(efficiency_ratio(0.4, 0.0).is_err());
    }

    #[test]
    fn bench_identity() {
        let t = throughput_bench(|| {}, 2, DEFAULT_BENCH_ITERS).unwrap();
        assert!(t.fps > 1e4);
        assert!((t.fps * t.latency_ms_mean - 1000.0).abs() < 1e-9);
        assert!(throughput_bench(|| {}, 0, 0).is_err());
    }

    #[test]
    fn report_kv() {
        let s = grid();
        let m = vec![true; s.cells()];
        let r = EvalReport::evaluate(&m, &m, &s, Some(1e6)).unwrap();
        let kv = r.to_kv();
        assert!(kv.starts_with("iou100=1.0\n"));
        assert!(kv.contains("er=100.0\n"));
    }
}
