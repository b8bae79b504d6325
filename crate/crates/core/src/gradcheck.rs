// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each check draws a random instance (at most 4 channels, at most 16×16
//! spatially), contracts the op's output with a random cotangent, and
//! compares the analytic gradient against central differences at `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distill::{affinity_distill, kl_backward, kl_channelwise};
use crate::error::Result;
use crate::fusion::{sgfm_backward, sgfm_forward, RefineInput, SgfmParams};
use crate::geometry::AngularGridSpec;
use crate::sampling::{bilinear_sample, bilinear_sample_backward};
use crate::task_losses::{balanced_mse, focal_loss, masked_l1, uncertainty_weighted_sum, LossWeights};
use crate::tensor::{FeatureMap, Shape};
use crate::view_transformer::{
    dense_grid_pull, dense_grid_pull_backward, vertical_compress, vertical_compress_backward, voxel_pull,
    voxel_pull_backward, CompressMode, SparseVoxelSet, VoxelFeatures, VoxelGridSpec,
};

/// Default pass threshold on the norm-wise relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

const STEP: f64 = 1e-5;

/// Outcome for one op; the worst argument is reported.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub op: &'static str,
    /// `‖g_analytic − g_fd‖ / max(‖g_analytic‖, ‖g_fd‖)`.
    pub rel_err: f64,
    pub max_abs_err: f64,
    /// Number of scalar inputs perturbed.
    pub inputs: usize,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.rel_err.is_finite() && self.rel_err < tol
    }

    fn merge(op: &'static str, parts: impl IntoIterator<Item = (f64, f64, usize)>) -> Self {
        let mut out = GradCheck { op, rel_err: 0.0, max_abs_err: 0.0, inputs: 0 };
        for (rel, abs, n) in parts {
            out.rel_err = out.rel_err.max(rel);
            out.max_abs_err = out.max_abs_err.max(abs);
            out.inputs += n;
        }
        out
    }
}

/// Compares `analytic` with the central difference of `f` at `x0`. Returns
/// `(relative error, max absolute error, inputs)`.
pub fn compare(x0: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> (f64, f64, usize) {
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    let mut num = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let h = STEP * x0[i].abs().max(1.0);
        x[i] = x0[i] + h;
        let fp = f(&x);
        x[i] = x0[i] - h;
        let fm = f(&x);
        x[i] = x0[i];
        num.push((fp - fm) / (2.0 * h));
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&num).map(|(a, b)| a - b).collect();
    let denom = norm(analytic).max(norm(&num));
    let rel = if denom == 0.0 { 0.0 } else { norm(&diff) / denom };
    let abs = diff.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    (rel, abs, x0.len())
}

fn rand_shape(rng: &mut ChaCha8Rng, min_hw: usize) -> Shape {
    Shape::new(rng.gen_range(1..=4), rng.gen_range(min_hw..=16), rng.gen_range(min_hw..=16))
}

fn rand_map(rng: &mut ChaCha8Rng, shape: Shape) -> FeatureMap<f64> {
    FeatureMap::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn with_data(shape: Shape, x: &[f64]) -> FeatureMap<f64> {
    FeatureMap::from_vec(shape, x.to_vec()).expect("length matches shape")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn check_bilinear(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let shape = rand_shape(rng, 2);
    let f = rand_map(rng, shape);
    let queries: Vec<(f64, f64, Vec<f64>)> = (0..8)
        .map(|_| {
            let u = rng.gen_range(-2.0..shape.width as f64 + 2.0);
            let v = rng.gen_range(-1.0..shape.height as f64 + 1.0);
            let w = (0..shape.channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (u, v, w)
        })
        .collect();
    let mut grad = FeatureMap::zeros(shape);
    for (u, v, w) in &queries {
        bilinear_sample_backward(shape, *u, *v, w).scatter_into(&mut grad);
    }
    let part = compare(f.data(), grad.data(), |x| {
        let m = with_data(shape, x);
        queries.iter().map(|(u, v, w)| dot(&bilinear_sample(&m, *u, *v), w)).sum()
    });
    Ok(GradCheck::merge("bilinear", [part]))
}

fn small_voxel_setup(rng: &mut ChaCha8Rng) -> Result<(VoxelGridSpec, AngularGridSpec, Shape)> {
    let spec = VoxelGridSpec::new([8.0, 4.0, 8.0], [1.0, 1.0, 1.0])?;
    let rows = rng.gen_range(4..=16);
    let cols = rng.gen_range(4..=16);
    let grid = AngularGridSpec::new(rows, cols, -0.6, 0.5)?;
    Ok((spec, grid, Shape::new(rng.gen_range(1..=4), rows, cols)))
}

fn random_voxels(rng: &mut ChaCha8Rng, spec: VoxelGridSpec, n: usize) -> Result<SparseVoxelSet<f64>> {
    let d = spec.dims()?;
    let idx: Vec<[usize; 3]> =
        (0..n).map(|_| [rng.gen_range(0..d[0]), rng.gen_range(0..d[1]), rng.gen_range(0..d[2])]).collect();
    SparseVoxelSet::from_indices(spec, idx)
}

pub fn check_voxel_pull(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let (spec, grid, shape) = small_voxel_setup(rng)?;
    let vox = random_voxels(rng, spec, 60)?;
    let img = rand_map(rng, shape);
    let w: Vec<f64> = (0..vox.len() * shape.channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grad = voxel_pull_backward(&w, &vox, &grid, shape)?;
    let part = compare(img.data(), grad.data(), |x| {
        dot(&voxel_pull(&with_data(shape, x), &vox, &grid).expect("valid setup").values, &w)
    });
    Ok(GradCheck::merge("voxel_pull", [part]))
}

pub fn check_vertical_compress(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let (spec, grid, shape) = small_voxel_setup(rng)?;
    let vox = random_voxels(rng, spec, 80)?;
    let vf = voxel_pull(&rand_map(rng, shape), &vox, &grid)?;
    let mut parts = Vec::new();
    for mode in [CompressMode::Mean, CompressMode::Sum] {
        let bev_shape = vertical_compress(&vf, mode)?.features.shape();
        let w = rand_map(rng, bev_shape);
        let grad = vertical_compress_backward(&w, &vf, mode)?;
        parts.push(compare(&vf.values, &grad, |x| {
            let v = VoxelFeatures { values: x.to_vec(), ..vf.clone() };
            vertical_compress(&v, mode).expect("valid setup").features.dot(&w)
        }));
    }
    Ok(GradCheck::merge("vertical_compress", parts))
}

pub fn check_dense_grid_pull(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let (spec, grid, shape) = small_voxel_setup(rng)?;
    let img = rand_map(rng, shape);
    let mut parts = Vec::new();
    for mode in [CompressMode::Mean, CompressMode::Sum] {
        let bev_shape = dense_grid_pull(&img, &spec, &grid, mode)?.features.shape();
        let w = rand_map(rng, bev_shape);
        let grad = dense_grid_pull_backward(&w, &spec, &grid, shape, mode)?;
        parts.push(compare(img.data(), grad.data(), |x| {
            dense_grid_pull(&with_data(shape, x), &spec, &grid, mode).expect("valid setup").features.dot(&w)
        }));
    }
    Ok(GradCheck::merge("dense_grid_pull", parts))
}

pub fn check_sgfm(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let shape = rand_shape(rng, 1);
    let c = shape.channels;
    let mode = if rng.gen_bool(0.5) { RefineInput::Duplicated } else { RefineInput::Single };
    let co = rng.gen_range(1..=4);
    let p = SgfmParams::<f64>::random(c, co, mode, 0.8, rng);
    let (fi, fl) = (rand_map(rng, shape), rand_map(rng, shape));
    let (out, cache) = sgfm_forward(&fi, &fl, &p)?;
    let w = rand_map(rng, out.shape());
    let g = sgfm_backward(&cache, &w)?;
    let loss = |fi: &FeatureMap<f64>, fl: &FeatureMap<f64>, p: &SgfmParams<f64>| {
        sgfm_forward(fi, fl, p).expect("valid setup").0.dot(&w)
    };
    let parts = vec![
        compare(fi.data(), g.f_img.data(), |x| loss(&with_data(shape, x), &fl, &p)),
        compare(fl.data(), g.f_lidar.data(), |x| loss(&fi, &with_data(shape, x), &p)),
        compare(&p.gate_weights, &g.params.gate_weights, |x| {
            loss(&fi, &fl, &SgfmParams { gate_weights: x.to_vec(), ..p.clone() })
        }),
        compare(&p.refine_weights, &g.params.refine_weights, |x| {
            loss(&fi, &fl, &SgfmParams { refine_weights: x.to_vec(), ..p.clone() })
        }),
        compare(&p.bn_scale, &g.params.bn_scale, |x| loss(&fi, &fl, &SgfmParams { bn_scale: x.to_vec(), ..p.clone() })),
        compare(&p.bn_shift, &g.params.bn_shift, |x| loss(&fi, &fl, &SgfmParams { bn_shift: x.to_vec(), ..p.clone() })),
    ];
    Ok(GradCheck::merge("sgfm", parts))
}

pub fn check_kl(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let shape = rand_shape(rng, 1);
    let (t, s) = (rand_map(rng, shape), rand_map(rng, shape));
    let temp = rng.gen_range(0.5..6.0);
    let grad = kl_backward(&t, &s, temp)?;
    let part = compare(s.data(), grad.data(), |x| kl_channelwise(&t, &with_data(shape, x), temp).expect("valid"));
    Ok(GradCheck::merge("kl", [part]))
}

pub fn check_affinity(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let shape = rand_shape(rng, 2);
    let (t, s) = (rand_map(rng, shape), rand_map(rng, shape));
    let stride = rng.gen_range(1..=3);
    let out = affinity_distill(&t, &s, stride)?;
    let part = compare(s.data(), out.grad_student.data(), |x| {
        affinity_distill(&t, &with_data(shape, x), stride).expect("valid").loss
    });
    Ok(GradCheck::merge("affinity", [part]))
}

fn rand_plane(rng: &mut ChaCha8Rng, channels: usize) -> (Shape, Vec<bool>) {
    let shape = Shape::new(channels, rng.gen_range(1..=16), rng.gen_range(1..=16));
    let mut mask: Vec<bool> = (0..shape.plane()).map(|_| rng.gen_bool(0.6)).collect();
    mask[0] = true;
    (shape, mask)
}

pub fn check_focal(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let (shape, target) = rand_plane(rng, 1);
    let z = FeatureMap::from_fn(shape, |_, _, _| rng.gen_range(-4.0..4.0));
    let (alpha, gamma) = (rng.gen_range(0.1..0.9), rng.gen_range(0.0..3.0));
    let out = focal_loss(&z, &target, alpha, gamma)?;
    let part = compare(z.data(), out.grad.data(), |x| {
        focal_loss(&with_data(shape, x), &target, alpha, gamma).expect("valid").loss
    });
    Ok(GradCheck::merge("focal", [part]))
}

pub fn check_balanced_mse(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let (shape, valid) = rand_plane(rng, 1);
    let (p, t) = (rand_map(rng, shape), rand_map(rng, shape).map(f64::abs));
    let sigma = rng.gen_range(0.2..2.0);
    let out = balanced_mse(&p, &t, &valid, sigma)?;
    let part = compare(p.data(), out.grad.data(), |x| {
        balanced_mse(&with_data(shape, x), &t, &valid, sigma).expect("valid").loss
    });
    Ok(GradCheck::merge("balanced_mse", [part]))
}

pub fn check_masked_l1(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let (shape, valid) = rand_plane(rng, 2);
    let (p, t) = (rand_map(rng, shape), rand_map(rng, shape));
    let out = masked_l1(&p, &t, &valid)?;
    let part = compare(p.data(), out.grad.data(), |x| masked_l1(&with_data(shape, x), &t, &valid).expect("valid").loss);
    Ok(GradCheck::merge("masked_l1", [part]))
}

pub fn check_uncertainty_sum(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let losses: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..3.0));
    let s: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
    let w = LossWeights { log_variances: s };
    let out = uncertainty_weighted_sum(losses, &w);
    let parts = [
        compare(&losses, &out.d_losses, |x| uncertainty_weighted_sum([x[0], x[1], x[2]], &w).loss),
        compare(&s, &out.d_log_variances, |x| {
            uncertainty_weighted_sum(losses, &LossWeights { log_variances: [x[0], x[1], x[2]] }).loss
        }),
    ];
    Ok(GradCheck::merge("uncertainty_sum", parts))
}

type Check = fn(&mut ChaCha8Rng) -> Result<GradCheck>;

/// Every backward op, in a fixed order.
pub const CHECKS: [(&str, Check); 11] = [
    ("bilinear", check_bilinear),
    ("voxel_pull", check_voxel_pull),
    ("vertical_compress", check_vertical_compress),
    ("dense_grid_pull", check_dense_grid_pull),
    ("sgfm", check_sgfm),
    ("kl", check_kl),
    ("affinity", check_affinity),
    ("focal", check_focal),
    ("balanced_mse", check_balanced_mse),
    ("masked_l1", check_masked_l1),
    ("uncertainty_sum", check_uncertainty_sum),
];

/// Runs every check once per trial with a seed-derived instance.
pub fn run_suite(seed: u64, trials: usize) -> Result<Vec<GradCheck>> {
    let mut out = Vec::with_capacity(CHECKS.len());
    for (k, (name, check)) in CHECKS.iter().enumerate() {
        let mut worst = GradCheck { op: name, rel_err: 0.0, max_abs_err: 0.0, inputs: 0 };
        for t in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64) << 32) ^ t as u64);
            let r = check(&mut rng)?;
            worst = GradCheck::merge(
                name,
                [(worst.rel_err, worst.max_abs_err, worst.inputs), (r.rel_err, r.max_abs_err, r.inputs)],
            );
        }
        out.push(worst);
    }
    Ok(out)
}
