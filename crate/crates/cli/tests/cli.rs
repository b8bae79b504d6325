// SPDX-License-Identifier: Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

use panobev_core::fisheye::{equirect_to_fisheye, FisheyeCalib, RgbImage};
use panobev_core::geometry::AngularGridSpec;
use panobev_core::lidar_image::{save_plx, LidarPoint};
use panobev_core::{FeatureMap, FeatureMapF64, Shape};

fn panobev(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panobev")).args(args).env_remove("PANOBEV_THREADS").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn bev_mask(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> FeatureMapF64 {
    FeatureMap::from_fn(Shape::new(1, rows, cols), |_, r, c| if f(r, c) { 1.0 } else { 0.0 })
}

fn ring_cloud() -> Vec<LidarPoint<f64>> {
    (0..720)
        .map(|k| {
            let a = k as f64 * std::f64::consts::TAU / 720.0;
            LidarPoint::new([10.0 * a.cos(), 10.0 * a.sin(), -1.0 + 0.001 * k as f64], 50.0).with_ambient(7.0)
        })
        .collect()
}

#[test]
fn no_args_prints_usage_and_exits_2() {
    let o = panobev(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_exits_2() {
    let o = panobev(&["eval-iou", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.fmap");
    let o = panobev(&["eval-iou", "--pred", p(&missing), "--gt", p(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn gradcheck_all_passes() {
    let o = panobev(&["--threads", "1", "gradcheck", "--all", "--trials", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 11);
}

#[test]
fn gradcheck_single_op_and_unknown_op() {
    assert_eq!(panobev(&["gradcheck", "--op", "focal"]).status.code(), Some(0));
    assert_eq!(panobev(&["gradcheck", "--op", "nonsense"]).status.code(), Some(1));
}

#[test]
fn eval_iou_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fmap");
    bev_mask(200, 200, |r, c| (90..110).contains(&r) && (60..140).contains(&c)).save(&path).unwrap();
    let o = panobev(&["eval-iou", "--pred", p(&path), "--gt", p(&path), "--extent", "100"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.lines().any(|l| l == "iou100=1.0"), "{out}");
    assert!(out.lines().any(|l| l == "iou20=1.0"), "{out}");
}

#[test]
fn eval_iou_half_overlap_with_params() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.fmap"), dir.path().join("b.fmap"));
    bev_mask(200, 200, |r, _| r < 100).save(&a).unwrap();
    bev_mask(200, 200, |_, _| true).save(&b).unwrap();
    let o = panobev(&["eval-iou", "--pred", p(&a), "--gt", p(&b), "--params", "1e6"]);
    let out = stdout(&o);
    assert!(out.contains("iou100=0.5\n") && out.contains("er=50.0\n"), "{out}");
}

#[test]
fn kd_loss_writes_gradients() {
    let dir = tempfile::tempdir().unwrap();
    let shape = Shape::new(2, 4, 4);
    let t: FeatureMapF64 = FeatureMap::from_fn(shape, |c, y, x| (c + y * x) as f64 * 0.1);
    let s: FeatureMapF64 = FeatureMap::from_fn(shape, |c, y, x| (c * y + x) as f64 * 0.2);
    let (tp, sp) = (dir.path().join("t.fmap"), dir.path().join("s.fmap"));
    t.save(&tp).unwrap();
    s.save(&sp).unwrap();
    let out_dir = dir.path().join("grads");
    let o = panobev(&[
        "kd-loss",
        "--teacher",
        p(&tp),
        "--student",
        p(&sp),
        "--aux",
        p(&sp),
        "--temp",
        "4",
        "--a1",
        "1",
        "--a2",
        "0.5",
        "--out-dir",
        p(&out_dir),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let field = |k: &str| -> f64 { out.lines().find_map(|l| l.strip_prefix(k)).unwrap().parse().unwrap() };
    let loss = field("loss=");
    let kl = field("kl_teacher_student=");
    assert!(kl > 0.0);
    assert!((loss - 1.5 * kl).abs() <= 1e-12 * loss.abs());
    let gs = FeatureMapF64::load(out_dir.join("grad_student.fmap")).unwrap();
    let ga = FeatureMapF64::load(out_dir.join("grad_aux.fmap")).unwrap();
    assert_eq!(gs.shape(), shape);
    for (a, b) in gs.data().iter().zip(ga.data()) {
        assert!((0.5 * a - b).abs() <= 1e-15);
    }
}

#[test]
fn kd_loss_identical_maps_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let f: FeatureMapF64 = FeatureMap::from_fn(Shape::new(3, 5, 5), |c, y, x| ((c + 2 * y + 3 * x) % 7) as f64);
    let fp = dir.path().join("f.fmap");
    f.save(&fp).unwrap();
    let o = panobev(&["kd-loss", "--teacher", p(&fp), "--student", p(&fp), "--out-dir", p(dir.path())]);
    let loss: f64 = stdout(&o).lines().next().unwrap().strip_prefix("loss=").unwrap().parse().unwrap();
    assert!(loss.abs() < 1e-12);
}

#[test]
fn encode_then_voxel_pull_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("c.plx");
    save_plx(&ring_cloud(), &cloud).unwrap();
    let (img, mask, bev) = (dir.path().join("img.fmap"), dir.path().join("mask.fmap"), dir.path().join("bev.fmap"));
    let o = panobev(&[
        "encode-lidar",
        "--in",
        p(&cloud),
        "--rows",
        "32",
        "--cols",
        "256",
        "--elev-min",
        "-0.4",
        "--elev-max",
        "0.4",
        "--out",
        p(&img),
        "--mask",
        p(&mask),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = FeatureMapF64::load(&img).unwrap();
    assert_eq!(m.shape(), Shape::new(3, 32, 256));
    let valid = FeatureMapF64::load(&mask).unwrap().data().iter().filter(|&&v| v > 0.0).count();
    assert!(valid > 200, "{valid}");
    let ranges: Vec<f64> = m.channel(0).iter().copied().filter(|&r| r > 0.0).collect();
    assert!(ranges.iter().all(|r| (r - 10.0).abs() < 0.1));

    let o = panobev(&[
        "voxel-pull",
        "--features",
        p(&img),
        "--cloud",
        p(&cloud),
        "--elev-min",
        "-0.4",
        "--elev-max",
        "0.4",
        "--out",
        p(&bev),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(FeatureMapF64::load(&bev).unwrap().shape(), Shape::new(3, 200, 200));
}

#[test]
fn voxel_pull_with_spec_file_and_dense() {
    let dir = tempfile::tempdir().unwrap();
    let img: FeatureMapF64 = FeatureMap::from_fn(Shape::new(2, 8, 32), |c, y, x| (c * 100 + y * 32 + x) as f64);
    let ip = dir.path().join("img.fmap");
    img.save(&ip).unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, "extent = [20.0, 4.0, 20.0]\nvoxel_size = [1.0, 1.0, 1.0]\n").unwrap();
    let out = dir.path().join("bev.fmap");
    let o = panobev(&[
        "voxel-pull",
        "--features",
        p(&ip),
        "--spec",
        p(&spec),
        "--dense",
        "--mode",
        "sum",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(FeatureMapF64::load(&out).unwrap().shape(), Shape::new(2, 20, 20));
}

#[test]
fn rasterize_filter_render() {
    let dir = tempfile::tempdir().unwrap();
    let boxes = dir.path().join("boxes.txt");
    std::fs::write(
        &boxes,
        "# kind category cx cy cz l w h yaw [frame]\n\
         static car 10.0 0.0 0.0 4.0 2.0 1.5 0.0\n\
         static car -30.0 5.0 0.0 4.0 2.0 1.5 0.3\n\
         dynamic ped 3.0 3.0 0.0 1.0 1.0 1.8 0.0 7\n\
         dynamic ped 3.0 -3.0 0.0 1.0 1.0 1.8 0.0 8\n",
    )
    .unwrap();
    let gt = dir.path().join("gt.fmap");
    let o = panobev(&["rasterize-gt", "--boxes", p(&boxes), "--spec", "200x200@100m", "--out", p(&gt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = FeatureMapF64::load(&gt).unwrap();
    assert_eq!(m.shape(), Shape::new(4, 200, 200));
    assert!(m.channel(0).iter().all(|&v| v == 0.0 || v == 1.0));

    // Only the first static box has points.
    let cloud = dir.path().join("f.plx");
    let pts: Vec<LidarPoint<f64>> = (0..5).map(|k| LidarPoint::new([9.5 + 0.2 * k as f64, 0.1, 0.2], 1.0)).collect();
    save_plx(&pts, &cloud).unwrap();
    let o = panobev(&["filter-boxes", "--boxes", p(&boxes), "--cloud", p(&cloud), "--frame", "7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let kept = stdout(&o);
    let lines: Vec<&str> = kept.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')).collect();
    assert_eq!(lines.len(), 2, "{kept}");
    assert!(lines[0].starts_with("static car 10"));
    assert!(lines[1].starts_with("dynamic ped"));

    let ppm = dir.path().join("gt.ppm");
    let o = panobev(&["render", "--input", p(&gt), "--compare", p(&gt), "--out", p(&ppm)]);
    assert!(o.status.success());
    let img = RgbImage::load_ppm(&ppm).unwrap();
    assert_eq!((img.width, img.height), (200, 200));
    assert!(img.data.chunks(3).all(|px| px == [255, 255, 255] || px == [0, 0, 0]));
}

#[test]
fn fisheye_convert_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let grid = AngularGridSpec::full_sphere(32, 64);
    let eq = RgbImage::from_fn(64, 32, |_, _| [120, 60, 200]);
    let fov = 200f64.to_radians();
    let cl = FisheyeCalib::equidistant([47.5, 47.5], 27.0, fov, std::f64::consts::FRAC_PI_2);
    let cr = FisheyeCalib::equidistant([47.5, 47.5], 27.0, fov, -std::f64::consts::FRAC_PI_2);
    let (lp, rp) = (dir.path().join("l.ppm"), dir.path().join("r.ppm"));
    equirect_to_fisheye(&eq, &grid, &cl, 96, 96).unwrap().save_ppm(&lp).unwrap();
    equirect_to_fisheye(&eq, &grid, &cr, 96, 96).unwrap().save_ppm(&rp).unwrap();
    let calib = dir.path().join("calib.toml");
    std::fs::write(
        &calib,
        format!(
            "[left]\ncenter = [47.5, 47.5]\nfocal = 27.0\nfov = {fov}\nyaw = {}\ndistortion = []\n\n\
             [right]\ncenter = [47.5, 47.5]\nfocal = 27.0\nfov = {fov}\nyaw = {}\ndistortion = []\n",
            std::f64::consts::FRAC_PI_2,
            -std::f64::consts::FRAC_PI_2
        ),
    )
    .unwrap();
    let (out, mask) = (dir.path().join("eq.ppm"), dir.path().join("mask.ppm"));
    let o = panobev(&[
        "fisheye-convert",
        "--left",
        p(&lp),
        "--right",
        p(&rp),
        "--calib",
        p(&calib),
        "--rows",
        "32",
        "--cols",
        "64",
        "--out",
        p(&out),
        "--mask",
        p(&mask),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let back = RgbImage::load_ppm(&out).unwrap();
    let valid = RgbImage::load_ppm(&mask).unwrap();
    let mut n = 0;
    for (px, v) in back.data.chunks(3).zip(valid.data.chunks(3)) {
        if v[0] == 255 {
            n += 1;
            assert_eq!(px, [120, 60, 200]);
        }
    }
    assert!(n > 64 * 32 * 9 / 10, "{n}");
}

#[test]
fn bench_reports_fps() {
    let o =
        panobev(&["--threads", "2", "bench", "--op", "kd-loss", "--iters", "2", "--warmup", "0", "--channels", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("threads=2\n"), "{out}");
    let fps: f64 = out.lines().find_map(|l| l.strip_prefix("fps=")).unwrap().parse().unwrap();
    assert!(fps > 0.0);
}

#[test]
fn config_is_applied_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "[distill]\ntemperature = 2.5\n").unwrap();
    let o = panobev(&["--config", p(&cfg), "print-config"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("temperature = 2.5"));
    std::fs::write(&cfg, "[bev]\nrows = 100\ncols = 100\nextent = 100.0\n").unwrap();
    let o = panobev(&["--config", p(&cfg), "print-config"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn deterministic_output() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("c.plx");
    save_plx(&ring_cloud(), &cloud).unwrap();
    let run = |threads: &str, name: &str| {
        let out = dir.path().join(name);
        let o = panobev(&[
            "--threads",
            threads,
            "encode-lidar",
            "--in",
            p(&cloud),
            "--rows",
            "16",
            "--cols",
            "128",
            "--out",
            p(&out),
        ]);
        assert!(o.status.success());
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("1", "a.fmap"), run("4", "b.fmap"));
}
