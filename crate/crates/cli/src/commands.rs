// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use panobev_core::distill::kd_loss;
use panobev_core::fisheye::{fisheye_to_equirect, FisheyeRig, RgbImage};
use panobev_core::fusion::{sgfm_forward, RefineInput};
use panobev_core::geometry::{AngularGridSpec, Point3};
use panobev_core::gradcheck::{run_suite, GradCheck, CHECKS};
use panobev_core::gt::{
    build_targets, filter_static_boxes, filter_static_boxes_by_distance, format_boxes, parse_boxes,
};
use panobev_core::lidar_image::{encode_pointcloud, load_plx, normalize_lidar_image, LidarPoint, NormalizationStats};
use panobev_core::metrics::{throughput_bench, EvalReport};
use panobev_core::view_transformer::{
    dense_grid_pull, vertical_compress, voxel_pull, voxelize, CompressMode, VoxelGridSpec,
};
use panobev_core::{BevGridSpec, FeatureMap, FeatureMapF64, PipelineConfig, SgfmParams, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{
    Bench, BenchOp, Cli, Command, EncodeLidar, EvalIou, FilterBoxes, FisheyeConvert, Gradcheck, KdLoss, Mode,
    RasterizeGt, Render, Strategy, VoxelPull,
};

pub fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    match &cli.command {
        Command::EncodeLidar(a) => encode_lidar(a, &cfg)?,
        Command::VoxelPull(a) => voxel_pull_cmd(a, &cfg)?,
        Command::RasterizeGt(a) => rasterize_gt(a, &cfg)?,
        Command::FilterBoxes(a) => filter_boxes(a, &cfg)?,
        Command::FisheyeConvert(a) => fisheye_convert(a)?,
        Command::KdLoss(a) => kd_loss_cmd(a, &cfg)?,
        Command::EvalIou(a) => eval_iou(a)?,
        Command::Bench(a) => bench(a, &cfg)?,
        Command::Gradcheck(a) => return gradcheck(a),
        Command::Render(a) => render(a)?,
        Command::PrintConfig => print!("{}", cfg.to_toml()),
    }
    Ok(ExitCode::SUCCESS)
}

fn load_map(path: &Path) -> Result<FeatureMapF64> {
    FeatureMap::load(path).with_context(|| format!("reading {}", path.display()))
}

fn save_map(map: &FeatureMapF64, path: &Path) -> Result<()> {
    map.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Cloud in the panorama frame.
fn load_cloud(path: &Path, cfg: &PipelineConfig) -> Result<Vec<LidarPoint<f64>>> {
    let mut pts: Vec<LidarPoint<f64>> = load_plx(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(t) = &cfg.extrinsic {
        for p in &mut pts {
            p.position = t.apply(p.position);
        }
    }
    Ok(pts)
}

fn elevation(cfg: &PipelineConfig, lo: Option<f64>, hi: Option<f64>) -> (f64, f64) {
    (lo.unwrap_or(cfg.angular.elevation_min), hi.unwrap_or(cfg.angular.elevation_max))
}

fn encode_lidar(a: &EncodeLidar, cfg: &PipelineConfig) -> Result<()> {
    let (lo, hi) = elevation(cfg, a.grid.el_min, a.grid.el_max);
    let grid =
        AngularGridSpec::new(a.grid.rows.unwrap_or(cfg.angular.rows), a.grid.cols.unwrap_or(cfg.angular.cols), lo, hi)?;
    let pts = load_cloud(&a.cloud, cfg)?;
    let img = encode_pointcloud(&pts, &grid)?;
    let map = match a.max_range {
        Some(max_range) => normalize_lidar_image(
            &img,
            &NormalizationStats { max_range, intensity_scale: a.intensity_scale, ambient_scale: a.ambient_scale },
        )?,
        None => img.to_feature_map(),
    };
    save_map(&map, &a.out)?;
    if let Some(m) = &a.mask {
        save_map(&img.mask_map(), m)?;
    }
    eprintln!(
        "points={} valid_pixels={} out_of_fov={} missing_ambient={}",
        pts.len(),
        img.valid_pixels(),
        img.out_of_fov,
        img.missing_ambient
    );
    Ok(())
}

fn compress_mode(m: Option<Mode>, cfg: &PipelineConfig) -> CompressMode {
    match m {
        Some(Mode::Mean) => CompressMode::Mean,
        Some(Mode::Sum) => CompressMode::Sum,
        None => cfg.compress,
    }
}

fn voxel_pull_cmd(a: &VoxelPull, cfg: &PipelineConfig) -> Result<()> {
    let img = load_map(&a.image)?;
    let (lo, hi) = elevation(cfg, a.el_min, a.el_max);
    let grid = AngularGridSpec::new(img.height(), img.width(), lo, hi)?;
    let mode = compress_mode(a.mode, cfg);
    let spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let spec: VoxelGridSpec = toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            spec.dims()?;
            spec
        }
        None => cfg.voxel,
    };
    let bev = if a.dense {
        dense_grid_pull(&img, &spec, &grid, mode)?
    } else {
        let path = a.cloud.as_deref().context("--cloud is required without --dense")?;
        let pts: Vec<Point3<f64>> = load_cloud(path, cfg)?.into_iter().map(|p| p.position).collect();
        let vox = voxelize(&pts, &spec)?;
        let vf = voxel_pull(&img, &vox, &grid)?;
        eprintln!("voxels={} out_of_fov={}", vox.len(), vf.out_of_fov.iter().filter(|&&o| o).count());
        vertical_compress(&vf, mode)?
    };
    save_map(&bev.features, &a.out)?;
    if let Some(p) = &a.occupancy {
        let s = bev.features.shape();
        let occ =
            FeatureMap::from_vec(Shape::new(1, s.height, s.width), bev.occupancy.iter().map(|&n| n as f64).collect())?;
        save_map(&occ, p)?;
    }
    Ok(())
}

fn read_boxes(path: &Path) -> Result<Vec<panobev_core::Box3D>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_boxes(&text)?)
}

fn rasterize_gt(a: &RasterizeGt, cfg: &PipelineConfig) -> Result<()> {
    let spec: BevGridSpec = match &a.spec {
        Some(s) => s.parse()?,
        None => cfg.bev,
    };
    let boxes = read_boxes(&a.boxes)?;
    let sigma = a.sigma.unwrap_or(cfg.targets.centerness_sigma_cells);
    let (t, inst) = build_targets::<f64>(&boxes, &spec, sigma)?;
    let plane = spec.cells();
    let mut data = Vec::with_capacity(4 * plane);
    data.extend(t.seg.iter().map(|&s| if s { 1.0 } else { 0.0 }));
    data.extend_from_slice(t.centerness.data());
    data.extend_from_slice(t.offset.data());
    save_map(&FeatureMap::from_vec(Shape::new(4, spec.rows, spec.cols), data)?, &a.out)?;
    eprintln!("boxes={} positive_cells={}", boxes.len(), inst.positive_cells());
    Ok(())
}

fn filter_boxes(a: &FilterBoxes, cfg: &PipelineConfig) -> Result<()> {
    let boxes = read_boxes(&a.boxes)?;
    let kept = match a.strategy {
        Strategy::Points => {
            let path = a.cloud.as_deref().context("--cloud is required for the points strategy")?;
            let cloud: Vec<Point3<f64>> = load_cloud(path, cfg)?.into_iter().map(|p| p.position).collect();
            filter_static_boxes(&boxes, &cloud, a.frame, a.min_points.unwrap_or(cfg.targets.min_points))?
        }
        Strategy::Distance => filter_static_boxes_by_distance(&boxes, a.frame, a.max_range)?,
    };
    let text = format_boxes(&kept);
    match &a.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    eprintln!("kept={} dropped={}", kept.len(), boxes.len() - kept.len());
    Ok(())
}

fn fisheye_convert(a: &FisheyeConvert) -> Result<()> {
    let text = fs::read_to_string(&a.calib).with_context(|| format!("reading {}", a.calib.display()))?;
    let rig: FisheyeRig = toml::from_str(&text).with_context(|| format!("parsing {}", a.calib.display()))?;
    let left = RgbImage::load_ppm(&a.left).with_context(|| format!("reading {}", a.left.display()))?;
    let right = RgbImage::load_ppm(&a.right).with_context(|| format!("reading {}", a.right.display()))?;
    let grid = AngularGridSpec::full_sphere(a.rows, a.cols);
    let eq = fisheye_to_equirect(&left, &right, &rig.left, &rig.right, &grid, rig.blend_band)?;
    eq.image.save_ppm(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.mask {
        let m = RgbImage::from_fn(a.cols, a.rows, |x, y| if eq.valid[y * a.cols + x] { [255; 3] } else { [0; 3] });
        m.save_ppm(p).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn kd_loss_cmd(a: &KdLoss, cfg: &PipelineConfig) -> Result<()> {
    let mut d = cfg.distill;
    d.temperature = a.temp.unwrap_or(d.temperature);
    d.alpha1 = a.a1.unwrap_or(d.alpha1);
    d.alpha2 = a.a2.unwrap_or(d.alpha2);
    let t = load_map(&a.teacher)?;
    let s = load_map(&a.student)?;
    let aux = a.aux.as_deref().map(load_map).transpose()?;
    let out = kd_loss(&t, &s, aux.as_ref(), &d)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    save_map(&out.grad_student, &a.out_dir.join("grad_student.fmap"))?;
    if let Some(g) = &out.grad_aux {
        save_map(g, &a.out_dir.join("grad_aux.fmap"))?;
    }
    println!("loss={:?}", out.loss);
    println!("kl_teacher_student={:?}", out.teacher_to_student);
    if let Some(v) = out.teacher_to_aux {
        println!("kl_teacher_aux={v:?}");
    }
    Ok(())
}

fn mask_of(map: &FeatureMapF64, threshold: f64) -> Vec<bool> {
    map.channel(0).iter().map(|&v| v > threshold).collect()
}

fn eval_iou(a: &EvalIou) -> Result<()> {
    let pred = load_map(&a.pred)?;
    let gt = load_map(&a.gt)?;
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        bail!("prediction is {}x{} but ground truth is {}x{}", pred.height(), pred.width(), gt.height(), gt.width());
    }
    let spec = BevGridSpec::new(gt.height(), gt.width(), a.extent)?;
    let r = EvalReport::evaluate(&mask_of(&pred, a.threshold), &mask_of(&gt, a.threshold), &spec, a.params)?;
    print!("{}", r.to_kv());
    Ok(())
}

fn random_map(shape: Shape, rng: &mut ChaCha8Rng) -> FeatureMapF64 {
    FeatureMap::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn random_cloud(n: usize, cfg: &PipelineConfig, rng: &mut ChaCha8Rng) -> Vec<LidarPoint<f64>> {
    let [ex, ey, ez] = cfg.voxel.extent;
    (0..n)
        .map(|_| {
            let p = [
                rng.gen_range(-0.5 * ex..0.5 * ex),
                rng.gen_range(-0.5 * ez..0.5 * ez),
                rng.gen_range(-0.5 * ey..0.5 * ey),
            ];
            LidarPoint::new(p, rng.gen_range(0.0..255.0))
        })
        .collect()
}

fn bench(a: &Bench, cfg: &PipelineConfig) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let grid = cfg.angular;
    let bev = cfg.bev;
    let c = a.channels;
    let img = random_map(Shape::new(c, grid.rows, grid.cols), &mut rng);
    let t = match a.op {
        BenchOp::EncodeLidar => {
            let pts = random_cloud(131_072, cfg, &mut rng);
            throughput_bench(|| drop(encode_pointcloud(&pts, &grid).unwrap()), a.warmup, a.iters)?
        }
        BenchOp::VoxelPull => {
            let pts: Vec<Point3<f64>> = random_cloud(131_072, cfg, &mut rng).into_iter().map(|p| p.position).collect();
            let vox = voxelize(&pts, &cfg.voxel)?;
            eprintln!("voxels={}", vox.len());
            throughput_bench(
                || drop(vertical_compress(&voxel_pull(&img, &vox, &grid).unwrap(), cfg.compress).unwrap()),
                a.warmup,
                a.iters,
            )?
        }
        BenchOp::DenseGridPull => throughput_bench(
            || drop(dense_grid_pull(&img, &cfg.voxel, &grid, cfg.compress).unwrap()),
            a.warmup,
            a.iters,
        )?,
        BenchOp::Sgfm => {
            let shape = Shape::new(c, bev.rows, bev.cols);
            let fi = random_map(shape, &mut rng);
            let fl = random_map(shape, &mut rng);
            let params = SgfmParams::<f64>::random(c, c, RefineInput::Duplicated, 0.3, &mut rng);
            throughput_bench(|| drop(sgfm_forward(&fi, &fl, &params).unwrap()), a.warmup, a.iters)?
        }
        BenchOp::KdLoss => {
            let shape = Shape::new(c, bev.rows, bev.cols);
            let ft = random_map(shape, &mut rng);
            let fs = random_map(shape, &mut rng);
            let fa = random_map(shape, &mut rng);
            throughput_bench(|| drop(kd_loss(&ft, &fs, Some(&fa), &cfg.distill).unwrap()), a.warmup, a.iters)?
        }
    };
    println!("op={}", a.op.to_possible_value().expect("no skipped variants").get_name());
    println!("threads={}", rayon::current_num_threads());
    println!("latency_ms={:?}", t.latency_ms_mean);
    println!("latency_ms_stdev={:?}", t.latency_ms_stdev);
    println!("fps={:?}", t.fps);
    Ok(())
}

fn gradcheck(a: &Gradcheck) -> Result<ExitCode> {
    let Some(name) = &a.op else {
        if !a.all {
            bail!("pass --all or --op NAME");
        }
        return report_all(&run_suite(a.seed, a.trials)?, a.tol);
    };
    let Some((_, check)) = CHECKS.iter().find(|(n, _)| n == name) else {
        let names: Vec<&str> = CHECKS.iter().map(|(n, _)| *n).collect();
        bail!("unknown op {name:?}; expected one of {}", names.join(", "));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut runs = Vec::with_capacity(a.trials);
    for _ in 0..a.trials.max(1) {
        runs.push(check(&mut rng)?);
    }
    let worst = runs.into_iter().max_by(|x, y| x.rel_err.total_cmp(&y.rel_err)).expect("at least one trial");
    report_all(&[worst], a.tol)
}

fn report_all(results: &[GradCheck], tol: f64) -> Result<ExitCode> {
    let mut ok = true;
    for r in results {
        let pass = r.passed(tol);
        ok &= pass;
        println!(
            "{} {:<18} rel_err={:.3e} max_abs_err={:.3e} inputs={}",
            if pass { "PASS" } else { "FAIL" },
            r.op,
            r.rel_err,
            r.max_abs_err,
            r.inputs
        );
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn render(a: &Render) -> Result<()> {
    let map = load_map(&a.input)?;
    if a.channel >= map.channels() {
        bail!("channel {} out of range; map has {}", a.channel, map.channels());
    }
    let (h, w) = (map.height(), map.width());
    let plane = map.channel(a.channel);
    let img = if let Some(p) = &a.compare {
        let reference = load_map(p)?;
        if (reference.height(), reference.width()) != (h, w) {
            bail!("reference is {}x{} but input is {h}x{w}", reference.height(), reference.width());
        }
        let thr = a.threshold.unwrap_or(0.5);
        let r = reference.channel(0);
        RgbImage::from_fn(w, h, |x, y| match (plane[y * w + x] > thr, r[y * w + x] > thr) {
            (true, true) => [255, 255, 255],
            (true, false) => [220, 40, 40],
            (false, true) => [40, 80, 220],
            (false, false) => [0, 0, 0],
        })
    } else if let Some(thr) = a.threshold {
        RgbImage::from_fn(w, h, |x, y| if plane[y * w + x] > thr { [255; 3] } else { [0; 3] })
    } else {
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        RgbImage::from_fn(w, h, |x, y| {
            let v = ((plane[y * w + x] - lo) / span * 255.0).round() as u8;
            [v; 3]
        })
    };
    img.save_ppm(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}
