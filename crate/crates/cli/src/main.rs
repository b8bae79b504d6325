// SPDX-License-Identifier: Apache-2.0

//! `panobev`: file-in/file-out pipelines over the panobev kernels.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "panobev", version, about = "Panoramic BEV geometry, fusion and distillation kernels")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true, env = "PANOBEV_THREADS")]
    threads: Option<usize>,

    /// Pipeline configuration (TOML); built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Project a PLX point cloud onto the equirectangular grid.
    EncodeLidar(EncodeLidar),
    /// Pull image features into voxels and compress them to a BEV map.
    VoxelPull(VoxelPull),
    /// Rasterize boxes into segmentation, centerness and offset targets.
    RasterizeGt(RasterizeGt),
    /// Keep the boxes visible in one frame.
    FilterBoxes(FilterBoxes),
    /// Convert a fisheye pair to one equirectangular image.
    FisheyeConvert(FisheyeConvert),
    /// Channel-wise distillation loss and gradients.
    KdLoss(KdLoss),
    /// Range-cropped IoU between two BEV masks.
    EvalIou(EvalIou),
    /// Time a kernel on synthetic inputs.
    Bench(Bench),
    /// Finite-difference check of every backward pass.
    Gradcheck(Gradcheck),
    /// Write a BEV map channel as a PPM image.
    Render(Render),
    /// Print the effective configuration as TOML.
    PrintConfig,
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Overrides the configured angular grid rows.
    #[arg(long)]
    rows: Option<usize>,
    /// Overrides the configured angular grid columns.
    #[arg(long)]
    cols: Option<usize>,
    /// Lower elevation bound, radians.
    #[arg(long = "elev-min", allow_hyphen_values = true)]
    el_min: Option<f64>,
    /// Upper elevation bound, radians.
    #[arg(long = "elev-max", allow_hyphen_values = true)]
    el_max: Option<f64>,
}

#[derive(Args, Debug)]
struct EncodeLidar {
    /// PLX point cloud.
    #[arg(long = "in", visible_alias = "cloud")]
    cloud: PathBuf,
    /// Output `3×H×W` map: range, intensity, ambient.
    #[arg(long)]
    out: PathBuf,
    /// Optional `1×H×W` validity map.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[command(flatten)]
    grid: GridArgs,
    /// Normalise: divide range by this detection range.
    #[arg(long)]
    max_range: Option<f64>,
    #[arg(long, default_value_t = 255.0, requires = "max_range")]
    intensity_scale: f64,
    #[arg(long, default_value_t = 65535.0, requires = "max_range")]
    ambient_scale: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Mean,
    Sum,
}

#[derive(Args, Debug)]
struct VoxelPull {
    /// Equirectangular feature map `C×H×W`.
    #[arg(long = "features", visible_alias = "image")]
    image: PathBuf,
    /// Voxel grid TOML (`extent`, `voxel_size`); the configured grid otherwise.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Point cloud selecting the occupied voxels; not needed with `--dense`.
    #[arg(long, required_unless_present = "dense")]
    cloud: Option<PathBuf>,
    /// Sample every voxel centre instead of the occupied ones.
    #[arg(long)]
    dense: bool,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Output BEV map `C×Z×X`.
    #[arg(long)]
    out: PathBuf,
    /// Optional `1×Z×X` per-column voxel counts.
    #[arg(long)]
    occupancy: Option<PathBuf>,
    #[arg(long = "elev-min", allow_hyphen_values = true)]
    el_min: Option<f64>,
    #[arg(long = "elev-max", allow_hyphen_values = true)]
    el_max: Option<f64>,
}

#[derive(Args, Debug)]
struct RasterizeGt {
    #[arg(long)]
    boxes: PathBuf,
    /// `ROWSxCOLS@EXTENTm`; the configured BEV grid otherwise.
    #[arg(long)]
    spec: Option<String>,
    /// Output `4×H×W`: segmentation, centerness, offset x, offset y.
    #[arg(long)]
    out: PathBuf,
    /// Centerness Gaussian sigma in cells.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Strategy {
    /// Static boxes need interior points in this frame.
    Points,
    /// Static boxes need their centre within `--max-range`.
    Distance,
}

#[derive(Args, Debug)]
struct FilterBoxes {
    #[arg(long)]
    boxes: PathBuf,
    #[arg(long, required_if_eq("strategy", "points"))]
    cloud: Option<PathBuf>,
    #[arg(long)]
    frame: u64,
    #[arg(long)]
    min_points: Option<usize>,
    #[arg(long, value_enum, default_value_t = Strategy::Points)]
    strategy: Strategy,
    #[arg(long, default_value_t = 50.0)]
    max_range: f64,
    /// Output box file; stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FisheyeConvert {
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    /// TOML with `[left]` and `[right]` calibrations and optional `blend_band`.
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    #[arg(long)]
    out: PathBuf,
    /// Optional validity mask as a black/white PPM.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct KdLoss {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    aux: Option<PathBuf>,
    #[arg(long)]
    temp: Option<f64>,
    #[arg(long)]
    a1: Option<f64>,
    #[arg(long)]
    a2: Option<f64>,
    /// Directory for `grad_student.fmap` and `grad_aux.fmap`.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct EvalIou {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Side length of the full map, meters.
    #[arg(long, default_value_t = 100.0)]
    extent: f64,
    /// Cells above this value in channel 0 are positive.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Model parameter count, for the efficiency ratio.
    #[arg(long)]
    params: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum BenchOp {
    EncodeLidar,
    VoxelPull,
    DenseGridPull,
    Sgfm,
    KdLoss,
}

#[derive(Args, Debug)]
struct Bench {
    #[arg(long, value_enum)]
    op: BenchOp,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct Gradcheck {
    /// Check every backward op.
    #[arg(long, conflicts_with = "op")]
    all: bool,
    /// Check one op by name.
    #[arg(long)]
    op: Option<String>,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = panobev_core::gradcheck::DEFAULT_TOLERANCE)]
    tol: f64,
}

#[derive(Args, Debug)]
struct Render {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    channel: usize,
    /// Binarise at this value instead of min-max greyscale.
    #[arg(long)]
    threshold: Option<f64>,
    /// Colour against a reference mask: white hit, red false positive,
    /// blue miss.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
