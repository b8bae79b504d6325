// SPDX-License-Identifier: Apache-2.0

use panobev_core::distill::{affinity_distill, channel_softmax, kd_loss, kl_channelwise, DistillConfig};
use panobev_core::fusion::{sgfm_backward, sgfm_forward, sgfm_fuse, sgfm_gate, GateMap, RefineInput};
use panobev_core::geometry::{direction, AngularGridSpec, Point3};
use panobev_core::gt::{filter_static_boxes, BevGridSpec, Box3D, BoxKind};
use panobev_core::lidar_image::{decode_range_image, encode_pointcloud, LidarPoint};
use panobev_core::metrics::range_iou;
use panobev_core::task_losses::{focal_loss, uncertainty_weighted_sum, LossWeights};
use panobev_core::view_transformer::{
    dense_grid_pull, vertical_compress, vertical_compress_backward, voxel_pull, voxel_pull_backward, voxelize,
    CompressMode, SparseVoxelSet, VoxelGridSpec,
};
use panobev_core::{FeatureMap, FeatureMapF64, SgfmParams, Shape};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_map(shape: Shape, scale: f64, r: &mut ChaCha8Rng) -> FeatureMapF64 {
    FeatureMap::from_fn(shape, |_, _, _| r.gen_range(-scale..scale))
}

fn random_cloud(n: usize, r: &mut ChaCha8Rng) -> Vec<LidarPoint<f64>> {
    (0..n)
        .map(|_| {
            let d = direction(r.gen_range(-3.2..3.2), r.gen_range(-0.6..0.6));
            let range = r.gen_range(0.5..60.0);
            LidarPoint::new([range * d[0], range * d[1], range * d[2]], r.gen_range(0.0..255.0))
                .with_ambient(r.gen_range(0.0..100.0))
        })
        .collect()
}

fn small_voxel_spec() -> VoxelGridSpec {
    VoxelGridSpec::new([12.0, 4.0, 10.0], [1.0, 1.0, 1.0]).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn encode_is_order_free_and_bounded(seed in 0u64..10_000, n in 0usize..600) {
        let grid = AngularGridSpec::new(16, 64, -0.4, 0.4).unwrap();
        let mut r = rng(seed);
        let cloud = random_cloud(n, &mut r);
        let img = encode_pointcloud(&cloud, &grid).unwrap();
        let mut shuffled = cloud.clone();
        shuffled.shuffle(&mut r);
        prop_assert_eq!(&encode_pointcloud(&shuffled, &grid).unwrap(), &img);
        prop_assert!(img.valid_pixels() <= n - img.out_of_fov);
    }

    #[test]
    fn encode_decode_reaches_a_fixed_point(seed in 0u64..10_000) {
        let grid = AngularGridSpec::new(16, 64, -0.4, 0.4).unwrap();
        let cloud = random_cloud(300, &mut rng(seed));
        let once = encode_pointcloud(&decode_range_image(&encode_pointcloud(&cloud, &grid).unwrap()), &grid).unwrap();
        let twice = encode_pointcloud(&decode_range_image(&once), &grid).unwrap();
        prop_assert_eq!(&once.mask, &twice.mask);
        prop_assert_eq!(&once.intensity, &twice.intensity);
        prop_assert_eq!(&once.ambient, &twice.ambient);
        for (a, b) in once.range.iter().zip(&twice.range) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs());
        }
    }

    #[test]
    fn voxel_pull_is_linear(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let grid = AngularGridSpec::new(8, 24, -0.5, 0.5).unwrap();
        let shape = Shape::new(2, 8, 24);
        let (f, g) = (random_map(shape, 1.0, &mut r), random_map(shape, 1.0, &mut r));
        let mut h = f.map(|v| a * v);
        h.add_assign(&g.map(|v| b * v)).unwrap();
        let vox = SparseVoxelSet::<f64>::full(small_voxel_spec()).unwrap();
        let (pf, pg, ph) = (
            voxel_pull(&f, &vox, &grid).unwrap(),
            voxel_pull(&g, &vox, &grid).unwrap(),
            voxel_pull(&h, &vox, &grid).unwrap(),
        );
        for k in 0..ph.values.len() {
            let want = a * pf.values[k] + b * pg.values[k];
            prop_assert!((ph.values[k] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn pull_compress_vector_jacobian(seed in 0u64..10_000, sum in any::<bool>()) {
        let mut r = rng(seed);
        let grid = AngularGridSpec::new(8, 24, -0.5, 0.5).unwrap();
        let shape = Shape::new(3, 8, 24);
        let mode = if sum { CompressMode::Sum } else { CompressMode::Mean };
        let pts: Vec<Point3<f64>> =
            (0..80).map(|_| [r.gen_range(-6.0..6.0), r.gen_range(-5.0..5.0), r.gen_range(-2.0..2.0)]).collect();
        let vox = voxelize(&pts, &small_voxel_spec()).unwrap();
        let v = random_map(shape, 1.0, &mut r);
        let jv = vertical_compress(&voxel_pull(&v, &vox, &grid).unwrap(), mode).unwrap();
        let w = random_map(jv.features.shape(), 1.0, &mut r);
        let vf = voxel_pull(&FeatureMap::zeros(shape), &vox, &grid).unwrap();
        let g_vox = vertical_compress_backward(&w, &vf, mode).unwrap();
        let jtw = voxel_pull_backward(&g_vox, &vox, &grid, shape).unwrap();
        prop_assert!(rel(jv.features.dot(&w), v.dot(&jtw)) < 1e-6);
    }

    #[test]
    fn voxelize_is_order_free(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let mut pts: Vec<Point3<f64>> =
            (0..200).map(|_| [r.gen_range(-8.0..8.0), r.gen_range(-8.0..8.0), r.gen_range(-3.0..3.0)]).collect();
        let a = voxelize(&pts, &small_voxel_spec()).unwrap();
        pts.shuffle(&mut r);
        prop_assert_eq!(a, voxelize(&pts, &small_voxel_spec()).unwrap());
    }

    #[test]
    fn dense_equals_sparse_over_full_grid(seed in 0u64..10_000, sum in any::<bool>()) {
        let mut r = rng(seed);
        let grid = AngularGridSpec::new(8, 24, -0.3, 0.3).unwrap();
        let img = random_map(Shape::new(2, 8, 24), 1.0, &mut r);
        let mode = if sum { CompressMode::Sum } else { CompressMode::Mean };
        let spec = small_voxel_spec();
        let dense = dense_grid_pull(&img, &spec, &grid, mode).unwrap();
        let sparse = vertical_compress(&voxel_pull(&img, &SparseVoxelSet::full(spec).unwrap(), &grid).unwrap(), mode).unwrap();
        prop_assert_eq!(dense, sparse);
    }

    #[test]
    fn gate_is_strictly_inside_unit_interval(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let shape = Shape::new(3, 4, 5);
        let (fi, fl) = (random_map(shape, 4.0, &mut r), random_map(shape, 4.0, &mut r));
        let params = SgfmParams::<f64>::random(3, 3, RefineInput::Duplicated, 1.0, &mut r);
        let g = sgfm_gate(&fi, &fl, &params).unwrap();
        prop_assert!(g.map().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn fuse_is_symmetric_under_swap_and_complement(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let c = 3;
        let shape = Shape::new(c, 4, 5);
        let (fi, fl) = (random_map(shape, 2.0, &mut r), random_map(shape, 2.0, &mut r));
        let p = SgfmParams::<f64>::random(c, c, RefineInput::Duplicated, 1.0, &mut r);
        let mut q = p.clone();
        for k in 0..c {
            for j in 0..c {
                q.gate_weights[k * 2 * c + j] = -p.gate_weights[k * 2 * c + c + j];
                q.gate_weights[k * 2 * c + c + j] = -p.gate_weights[k * 2 * c + j];
            }
        }
        let a = sgfm_fuse(&fi, &fl, &sgfm_gate(&fi, &fl, &p).unwrap()).unwrap();
        let b = sgfm_fuse(&fl, &fi, &sgfm_gate(&fl, &fi, &q).unwrap()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let g = sgfm_gate(&fi, &fl, &p).unwrap();
        let comp = GateMap(g.map().map(|v| 1.0 - v));
        let d = sgfm_fuse(&fl, &fi, &comp).unwrap();
        for (x, y) in a.data().iter().zip(d.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn sgfm_vector_jacobian(seed in 0u64..10_000, single in any::<bool>()) {
        let mut r = rng(seed);
        let shape = Shape::new(2, 5, 6);
        let mode = if single { RefineInput::Single } else { RefineInput::Duplicated };
        let params = SgfmParams::<f64>::random(2, 3, mode, 0.5, &mut r);
        let (fi, fl) = (random_map(shape, 1.0, &mut r), random_map(shape, 1.0, &mut r));
        let (vi, vl) = (random_map(shape, 1.0, &mut r), random_map(shape, 1.0, &mut r));
        let (out, cache) = sgfm_forward(&fi, &fl, &params).unwrap();
        let w = random_map(out.shape(), 1.0, &mut r);
        let g = sgfm_backward(&cache, &w).unwrap();
        // Central-difference directional derivative. The error is scaled by
        // ‖v‖·‖Jᵀw‖, the natural size of the inner product, since ⟨Jv, w⟩ can
        // cancel to far below it.
        let eps = 1e-6;
        let shifted = |t: f64| {
            let mut a = fi.clone();
            a.add_assign(&vi.map(|v| t * v)).unwrap();
            let mut b = fl.clone();
            b.add_assign(&vl.map(|v| t * v)).unwrap();
            sgfm_forward(&a, &b, &params).unwrap().0.dot(&w)
        };
        let jv = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
        let jtw = vi.dot(&g.f_img) + vl.dot(&g.f_lidar);
        let scale = ((vi.dot(&vi) + vl.dot(&vl)) * (g.f_img.dot(&g.f_img) + g.f_lidar.dot(&g.f_lidar))).sqrt();
        prop_assert!((jv - jtw).abs() < 1e-6 * scale, "{} vs {}", jv, jtw);
    }

    #[test]
    fn softmax_is_positive_and_shift_invariant(seed in 0u64..10_000, t in 0.5f64..8.0) {
        let mut r = rng(seed);
        let shape = Shape::new(3, 4, 6);
        let f = random_map(shape, 10.0, &mut r);
        let shifts: Vec<f64> = (0..3).map(|_| r.gen_range(-50.0..50.0)).collect();
        let g = FeatureMap::from_fn(shape, |c, y, x| f.get(c, y, x) + shifts[c]);
        let (p, q) = (channel_softmax(&f, t).unwrap(), channel_softmax(&g, t).unwrap());
        prop_assert!(p.data().iter().all(|&v| v > 0.0));
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_is_zero_only_for_equal_distributions(seed in 0u64..10_000, t in 0.5f64..8.0) {
        let mut r = rng(seed);
        let shape = Shape::new(2, 3, 4);
        let f = random_map(shape, 3.0, &mut r);
        let mut g = f.clone();
        let k = r.gen_range(0..shape.len());
        g.data_mut()[k] += 0.5;
        prop_assert!(kl_channelwise(&f, &g, t).unwrap() > 0.0);
        prop_assert!(kl_channelwise(&f, &f.map(|v| v + 2.0), t).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kd_loss_is_linear_in_weights(seed in 0u64..10_000, a1 in 0.0f64..3.0, a2 in 0.0f64..3.0) {
        let mut r = rng(seed);
        let shape = Shape::new(2, 3, 3);
        let (ft, fs, fa) = (random_map(shape, 2.0, &mut r), random_map(shape, 2.0, &mut r), random_map(shape, 2.0, &mut r));
        let unit = kd_loss(&ft, &fs, Some(&fa), &DistillConfig::default()).unwrap();
        let cfg = DistillConfig { alpha1: a1, alpha2: a2, ..DistillConfig::default() };
        let out = kd_loss(&ft, &fs, Some(&fa), &cfg).unwrap();
        let want = a1 * unit.teacher_to_student + a2 * unit.teacher_to_aux.unwrap();
        prop_assert!((out.loss - want).abs() <= 1e-14 * (1.0 + want.abs()));
    }

    #[test]
    fn affinity_ignores_positive_position_scaling(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let shape = Shape::new(3, 5, 5);
        let (ft, fs) = (random_map(shape, 1.0, &mut r), random_map(shape, 1.0, &mut r));
        let scales: Vec<f64> = (0..shape.plane()).map(|_| r.gen_range(0.1..10.0)).collect();
        let scaled = FeatureMap::from_fn(shape, |c, y, x| fs.get(c, y, x) * scales[y * 5 + x]);
        let a = affinity_distill(&ft, &fs, 1).unwrap().loss;
        let b = affinity_distill(&ft, &scaled, 1).unwrap().loss;
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }

    #[test]
    fn focal_is_nonnegative(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let logits = random_map(Shape::new(1, 4, 4), 20.0, &mut r);
        let target: Vec<bool> = (0..16).map(|_| r.gen_bool(0.3)).collect();
        prop_assert!(focal_loss(&logits, &target, 0.25, 2.0).unwrap().loss >= 0.0);
    }

    #[test]
    fn uncertainty_sum_ignores_task_order(l in prop::array::uniform3(0.0f64..5.0), s in prop::array::uniform3(-2.0f64..2.0), perm in 0usize..6) {
        let orders = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let o = orders[perm];
        let a = uncertainty_weighted_sum(l, &LossWeights { log_variances: s });
        let b = uncertainty_weighted_sum(
            [l[o[0]], l[o[1]], l[o[2]]],
            &LossWeights { log_variances: [s[o[0]], s[o[1]], s[o[2]]] },
        );
        prop_assert!((a.loss - b.loss).abs() <= 1e-12 * (1.0 + a.loss.abs()));
    }

    #[test]
    fn filter_is_idempotent(seed in 0u64..10_000, frame in 0u64..3, min_points in 0usize..3) {
        let mut r = rng(seed);
        let boxes: Vec<Box3D> = (0..8)
            .map(|_| {
                let mut b = Box3D::new(
                    [r.gen_range(-10.0..10.0), r.gen_range(-10.0..10.0), 0.0],
                    [r.gen_range(1.0..5.0), r.gen_range(1.0..3.0), 2.0],
                    r.gen_range(-3.0..3.0),
                );
                if r.gen_bool(0.4) {
                    b.kind = BoxKind::Dynamic;
                    b.frame_id = Some(r.gen_range(0..3));
                }
                b
            })
            .collect();
        let cloud: Vec<Point3<f64>> =
            (0..150).map(|_| [r.gen_range(-12.0..12.0), r.gen_range(-12.0..12.0), r.gen_range(-1.0..1.0)]).collect();
        let once = filter_static_boxes(&boxes, &cloud, frame, min_points).unwrap();
        prop_assert_eq!(&filter_static_boxes(&once, &cloud, frame, min_points).unwrap(), &once);
    }

    #[test]
    fn iou_symmetric_and_monotone(seed in 0u64..10_000, side in prop::sample::select(vec![100.0, 50.0, 20.0])) {
        let mut r = rng(seed);
        let spec = BevGridSpec::new(40, 40, 100.0).unwrap();
        let p: Vec<bool> = (0..spec.cells()).map(|_| r.gen_bool(0.3)).collect();
        let g: Vec<bool> = (0..spec.cells()).map(|_| r.gen_bool(0.3)).collect();
        let a = range_iou(&p, &g, &spec, side).unwrap();
        prop_assert_eq!(a, range_iou(&g, &p, &spec, side).unwrap());
        let tp: Vec<usize> = (0..spec.cells()).filter(|&k| p[k] && g[k]).collect();
        if let Some(&k) = tp.first() {
            let mut q = p.clone();
            q[k] = false;
            prop_assert!(range_iou(&q, &g, &spec, side).unwrap().iou <= a.iou);
        }
    }
}

#[test]
fn single_precision_tracks_double() {
    let mut r = rng(99);
    let grid = AngularGridSpec::new(8, 24, -0.5, 0.5).unwrap();
    let img = random_map(Shape::new(2, 8, 24), 1.0, &mut r);
    let spec = small_voxel_spec();
    let d64 = dense_grid_pull(&img, &spec, &grid, CompressMode::Mean).unwrap();
    let d32 = dense_grid_pull(&img.cast::<f32>(), &spec, &grid, CompressMode::Mean).unwrap();
    assert_eq!(d64.occupancy, d32.occupancy);
    for (a, b) in d64.features.data().iter().zip(d32.features.data()) {
        assert!((a - f64::from(*b)).abs() < 1e-5);
    }
    let (ft, fs) = (random_map(Shape::new(3, 4, 4), 2.0, &mut r), random_map(Shape::new(3, 4, 4), 2.0, &mut r));
    let k64 = kl_channelwise(&ft, &fs, 4.0).unwrap();
    let k32 = kl_channelwise(&ft.cast::<f32>(), &fs.cast::<f32>(), 4.0).unwrap();
    assert!(rel(k64, f64::from(k32)) < 1e-4);
}
