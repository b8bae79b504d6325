// SPDX-License-Identifier: Apache-2.0

//! Soft-gated fusion of image and LiDAR BEV features.
//!
//! ```text
//! G     = sigmoid(W · [F_img; F_lidar])          per pixel, W is C × 2C
//! F_fus = G ⊙ F_img + (1 − G) ⊙ F_lidar
//! F_out = relu(bn(conv3x3(refine_input(F_fus))))
//! ```
//!
//! The refine convolution pads with zeros vertically and wraps horizontally.
//! Batch norm runs in inference mode with the statistics held in
//! [`SgfmParams`].

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{config_err, shape_err, Error, Result};
use crate::scalar::{sigmoid, Real};
use crate::tensor::{FeatureMap, Shape};

/// What the 3×3 refine convolution sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RefineInput {
    /// `[F_fus; F_fus]`, `2C` input channels.
    #[default]
    Duplicated,
    /// `F_fus`, `C` input channels.
    Single,
}

impl RefineInput {
    pub fn as_str(&self) -> &'static str {
        match self {
            RefineInput::Duplicated => "duplicated",
            RefineInput::Single => "single",
        }
    }
}

impl std::str::FromStr for RefineInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "duplicated" => Ok(RefineInput::Duplicated),
            "single" => Ok(RefineInput::Single),
            other => config_err(format!("unknown refine input mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgfmParams<T> {
    pub channels: usize,
    pub out_channels: usize,
    pub refine_input: RefineInput,
    /// `C × 2C`, row-major; columns `0..C` act on the image branch.
    pub gate_weights: Vec<T>,
    /// `C_out × C_in × 3 × 3`.
    pub refine_weights: Vec<T>,
    pub bn_mean: Vec<T>,
    pub bn_var: Vec<T>,
    pub bn_scale: Vec<T>,
    pub bn_shift: Vec<T>,
    pub bn_eps: T,
}

impl<T: Real> SgfmParams<T> {
    /// All-zero weights with identity batch norm.
    pub fn zeros(channels: usize, out_channels: usize, refine_input: RefineInput) -> Self {
        let c_in = refine_in_channels(channels, refine_input);
        Self {
            channels,
            out_channels,
            refine_input,
            gate_weights: vec![T::zero(); channels * 2 * channels],
            refine_weights: vec![T::zero(); out_channels * c_in * 9],
            bn_mean: vec![T::zero(); out_channels],
            bn_var: vec![T::one(); out_channels],
            bn_scale: vec![T::one(); out_channels],
            bn_shift: vec![T::zero(); out_channels],
            bn_eps: T::lit(1e-5),
        }
    }

    /// Uniform random weights in `[-scale, scale]` and randomised batch-norm
    /// statistics, for tests and benchmarks.
    pub fn random<R: Rng>(
        channels: usize,
        out_channels: usize,
        refine_input: RefineInput,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(channels, out_channels, refine_input);
        let mut u = |lo: f64, hi: f64| T::lit(rng.gen_range(lo..hi));
        p.gate_weights.iter_mut().for_each(|w| *w = u(-scale, scale));
        p.refine_weights.iter_mut().for_each(|w| *w = u(-scale, scale));
        p.bn_mean.iter_mut().for_each(|w| *w = u(-0.2, 0.2));
        p.bn_var.iter_mut().for_each(|w| *w = u(0.5, 1.5));
        p.bn_scale.iter_mut().for_each(|w| *w = u(0.5, 1.5));
        p.bn_shift.iter_mut().for_each(|w| *w = u(-0.2, 0.2));
        p
    }

    pub fn refine_in_channels(&self) -> usize {
        refine_in_channels(self.channels, self.refine_input)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        let co = self.out_channels;
        let checks = [
            ("gate_weights", self.gate_weights.len(), c * 2 * c),
            ("refine_weights", self.refine_weights.len(), co * self.refine_in_channels() * 9),
            ("bn_mean", self.bn_mean.len(), co),
            ("bn_var", self.bn_var.len(), co),
            ("bn_scale", self.bn_scale.len(), co),
            ("bn_shift", self.bn_shift.len(), co),
        ];
        for (name, got, want) in checks {
            if got != want {
                return shape_err(format!("{name} has {got} values, expected {want}"));
            }
        }
        if !(self.bn_eps > T::zero()) {
            return config_err("bn_eps must be positive");
        }
        if self.bn_var.iter().any(|&v| v < T::zero()) {
            return config_err("bn_var must be nonnegative");
        }
        Ok(())
    }

    #[inline]
    fn conv_w(&self, o: usize, i: usize, ky: usize, kx: usize) -> T {
        self.refine_weights[((o * self.refine_in_channels() + i) * 3 + ky) * 3 + kx]
    }

    fn bn_factor(&self, o: usize) -> T {
        self.bn_scale[o] / (self.bn_var[o] + self.bn_eps).sqrt()
    }
}

fn refine_in_channels(c: usize, mode: RefineInput) -> usize {
    match mode {
        RefineInput::Duplicated => 2 * c,
        RefineInput::Single => c,
    }
}

/// Per-pixel, per-channel gate in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMap<T>(pub FeatureMap<T>);

impl<T: Real> GateMap<T> {
    pub fn filled(shape: Shape, value: T) -> Self {
        GateMap(FeatureMap::filled(shape, value))
    }

    pub fn map(&self) -> &FeatureMap<T> {
        &self.0
    }
}

fn check_pair<T: Real>(f_img: &FeatureMap<T>, f_lidar: &FeatureMap<T>, p: &SgfmParams<T>) -> Result<()> {
    f_img.ensure_same_shape(f_lidar, "image vs LiDAR features")?;
    p.validate()?;
    if f_img.channels() != p.channels {
        return shape_err(format!("features have {} channels, fusion params expect {}", f_img.channels(), p.channels));
    }
    Ok(())
}

fn gate_preactivation<T: Real>(f_img: &FeatureMap<T>, f_lidar: &FeatureMap<T>, p: &SgfmParams<T>) -> FeatureMap<T> {
    let shape = f_img.shape();
    let c = shape.channels;
    let plane = shape.plane();
    let mut out = FeatureMap::zeros(shape);
    if plane == 0 {
        return out;
    }
    out.data_mut().par_chunks_mut(plane).enumerate().for_each(|(k, dst)| {
        let row = &p.gate_weights[k * 2 * c..(k + 1) * 2 * c];
        for (px, d) in dst.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (kk, &w) in row.iter().enumerate() {
                let v = if kk < c { f_img.data()[kk * plane + px] } else { f_lidar.data()[(kk - c) * plane + px] };
                acc = acc + w * v;
            }
            *d = acc;
        }
    });
    out
}

/// `G = sigmoid(W · [F_img; F_lidar])`, applied pixelwise.
pub fn sgfm_gate<T: Real>(
    f_img: &FeatureMap<T>,
    f_lidar: &FeatureMap<T>,
    params: &SgfmParams<T>,
) -> Result<GateMap<T>> {
    check_pair(f_img, f_lidar, params)?;
    Ok(GateMap(gate_preactivation(f_img, f_lidar, params).map(sigmoid)))
}

/// `G ⊙ F_img + (1 − G) ⊙ F_lidar`.
pub fn sgfm_fuse<T: Real>(f_img: &FeatureMap<T>, f_lidar: &FeatureMap<T>, gate: &GateMap<T>) -> Result<FeatureMap<T>> {
    f_img.ensure_same_shape(f_lidar, "image vs LiDAR features")?;
    f_img.ensure_same_shape(&gate.0, "features vs gate")?;
    let data = f_img
        .data()
        .iter()
        .zip(f_lidar.data())
        .zip(gate.0.data())
        .map(|((&i, &l), &g)| g * i + (T::one() - g) * l)
        .collect();
    FeatureMap::from_vec(f_img.shape(), data)
}

/// 3×3 convolution, zero padding on rows, wrap-around on columns. Input
/// channel `i` reads `input` channel `i % input.channels()`, which realises
/// the duplicated refine input without copying.
fn conv3x3<T: Real>(input: &FeatureMap<T>, p: &SgfmParams<T>) -> FeatureMap<T> {
    let Shape { channels: c, height: h, width: w } = input.shape();
    let c_in = p.refine_in_channels();
    let shape = Shape::new(p.out_channels, h, w);
    let mut out = FeatureMap::zeros(shape);
    let plane = shape.plane();
    if plane == 0 {
        return out;
    }
    out.data_mut().par_chunks_mut(plane).enumerate().for_each(|(o, dst)| {
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for i in 0..c_in {
                    let src = input.channel(i % c);
                    for ky in 0..3 {
                        let Some(yy) = (y + ky).checked_sub(1).filter(|&yy| yy < h) else {
                            continue;
                        };
                        for kx in 0..3 {
                            let xx = (x + w + kx - 1) % w;
                            acc = acc + p.conv_w(o, i, ky, kx) * src[yy * w + xx];
                        }
                    }
                }
                dst[y * w + x] = acc;
            }
        }
    });
    out
}

struct RefineTrace<T> {
    conv: FeatureMap<T>,
    bn: FeatureMap<T>,
    out: FeatureMap<T>,
}

fn refine_trace<T: Real>(f_fuse: &FeatureMap<T>, p: &SgfmParams<T>) -> Result<RefineTrace<T>> {
    p.validate()?;
    if f_fuse.channels() != p.channels {
        return shape_err(format!("fused map has {} channels, refine expects {}", f_fuse.channels(), p.channels));
    }
    let conv = conv3x3(f_fuse, p);
    let plane = conv.shape().plane();
    let mut bn = conv.clone();
    for o in 0..p.out_channels {
        let (m, k, b) = (p.bn_mean[o], p.bn_factor(o), p.bn_shift[o]);
        for v in &mut bn.data_mut()[o * plane..(o + 1) * plane] {
            *v = (*v - m) * k + b;
        }
    }
    let out = bn.map(|v| v.max(T::zero()));
    Ok(RefineTrace { conv, bn, out })
}

/// Refinement: 3×3 convolution, inference batch norm, ReLU.
pub fn sgfm_refine<T: Real>(f_fuse: &FeatureMap<T>, params: &SgfmParams<T>) -> Result<FeatureMap<T>> {
    Ok(refine_trace(f_fuse, params)?.out)
}

/// Intermediates retained by [`sgfm_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct SgfmCache<T> {
    pub params: SgfmParams<T>,
    pub f_img: FeatureMap<T>,
    pub f_lidar: FeatureMap<T>,
    pub gate: GateMap<T>,
    pub fused: FeatureMap<T>,
    pub conv: FeatureMap<T>,
    pub bn: FeatureMap<T>,
}

pub fn sgfm_forward<T: Real>(
    f_img: &FeatureMap<T>,
    f_lidar: &FeatureMap<T>,
    params: &SgfmParams<T>,
) -> Result<(FeatureMap<T>, SgfmCache<T>)> {
    let gate = sgfm_gate(f_img, f_lidar, params)?;
    let fused = sgfm_fuse(f_img, f_lidar, &gate)?;
    let RefineTrace { conv, bn, out } = refine_trace(&fused, params)?;
    let cache =
        SgfmCache { params: params.clone(), f_img: f_img.clone(), f_lidar: f_lidar.clone(), gate, fused, conv, bn };
    Ok((out, cache))
}

/// Gradients of the trainable fusion parameters. Batch-norm statistics are
/// not trained here.
#[derive(Debug, Clone, PartialEq)]
pub struct SgfmParamGrads<T> {
    pub gate_weights: Vec<T>,
    pub refine_weights: Vec<T>,
    pub bn_scale: Vec<T>,
    pub bn_shift: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgfmGrads<T> {
    pub f_img: FeatureMap<T>,
    pub f_lidar: FeatureMap<T>,
    pub params: SgfmParamGrads<T>,
}

pub fn sgfm_backward<T: Real>(cache: &SgfmCache<T>, grad_out: &FeatureMap<T>) -> Result<SgfmGrads<T>> {
    let p = &cache.params;
    if grad_out.shape() != cache.bn.shape() {
        return shape_err(format!("grad_out {} vs output {}", grad_out.shape(), cache.bn.shape()));
    }
    let Shape { channels: c, height: h, width: w } = cache.fused.shape();
    let plane = h * w;
    let c_in = p.refine_in_channels();
    let co = p.out_channels;

    // ReLU then batch norm.
    let mut g_conv = FeatureMap::zeros(grad_out.shape());
    let mut d_scale = vec![T::zero(); co];
    let mut d_shift = vec![T::zero(); co];
    for o in 0..co {
        let inv_std = T::one() / (p.bn_var[o] + p.bn_eps).sqrt();
        let k = p.bn_scale[o] * inv_std;
        for px in 0..plane {
            let i = o * plane + px;
            let g = if cache.bn.data()[i] > T::zero() { grad_out.data()[i] } else { T::zero() };
            d_shift[o] = d_shift[o] + g;
            d_scale[o] = d_scale[o] + g * (cache.conv.data()[i] - p.bn_mean[o]) * inv_std;
            g_conv.data_mut()[i] = g * k;
        }
    }

    // Convolution: weight gradient per output channel.
    let mut d_conv_w = vec![T::zero(); p.refine_weights.len()];
    if plane > 0 {
        d_conv_w.par_chunks_mut(c_in * 9).enumerate().for_each(|(o, dw)| {
            let go = g_conv.channel(o);
            for i in 0..c_in {
                let src = cache.fused.channel(i % c);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let mut acc = T::zero();
                        for y in 0..h {
                            let Some(yy) = (y + ky).checked_sub(1).filter(|&yy| yy < h) else {
                                continue;
                            };
                            for x in 0..w {
                                let xx = (x + w + kx - 1) % w;
                                acc = acc + go[y * w + x] * src[yy * w + xx];
                            }
                        }
                        dw[(i * 3 + ky) * 3 + kx] = acc;
                    }
                }
            }
        });
    }

    // Convolution: input gradient, folded back onto the C fused channels.
    let mut g_fused = FeatureMap::<T>::zeros(cache.fused.shape());
    if plane > 0 {
        g_fused.data_mut().par_chunks_mut(plane).enumerate().for_each(|(ci, dst)| {
            for i in (ci..c_in).step_by(c.max(1)) {
                for o in 0..co {
                    let go = g_conv.channel(o);
                    for y in 0..h {
                        for ky in 0..3 {
                            let Some(yy) = (y + ky).checked_sub(1).filter(|&yy| yy < h) else {
                                continue;
                            };
                            for kx in 0..3 {
                                let wgt = p.conv_w(o, i, ky, kx);
                                for x in 0..w {
                                    let xx = (x + w + kx - 1) % w;
                                    dst[yy * w + xx] = dst[yy * w + xx] + wgt * go[y * w + x];
                                }
                            }
                        }
                    }
                }
            }
        });
    }

    // Convex gate.
    let gate = cache.gate.0.data();
    let (fi, fl) = (cache.f_img.data(), cache.f_lidar.data());
    let gf = g_fused.data();
    let n = gf.len();
    let mut g_img = vec![T::zero(); n];
    let mut g_lidar = vec![T::zero(); n];
    let mut g_pre = vec![T::zero(); n];
    for j in 0..n {
        let g = gate[j];
        g_img[j] = gf[j] * g;
        g_lidar[j] = gf[j] * (T::one() - g);
        g_pre[j] = gf[j] * (fi[j] - fl[j]) * g * (T::one() - g);
    }

    // 1×1 gate convolution.
    let mut d_gate_w = vec![T::zero(); c * 2 * c];
    for k in 0..c {
        for kk in 0..2 * c {
            let src =
                if kk < c { &fi[kk * plane..(kk + 1) * plane] } else { &fl[(kk - c) * plane..(kk - c + 1) * plane] };
            let gp = &g_pre[k * plane..(k + 1) * plane];
            d_gate_w[k * 2 * c + kk] = gp.iter().zip(src).map(|(&a, &b)| a * b).sum();
        }
    }
    for kk in 0..2 * c {
        for k in 0..c {
            let wgt = p.gate_weights[k * 2 * c + kk];
            let gp = &g_pre[k * plane..(k + 1) * plane];
            let dst = if kk < c {
                &mut g_img[kk * plane..(kk + 1) * plane]
            } else {
                &mut g_lidar[(kk - c) * plane..(kk - c + 1) * plane]
            };
            for (d, &g) in dst.iter_mut().zip(gp) {
                *d = *d + wgt * g;
            }
        }
    }

    let shape = cache.fused.shape();
    Ok(SgfmGrads {
        f_img: FeatureMap::from_vec(shape, g_img)?,
        f_lidar: FeatureMap::from_vec(shape, g_lidar)?,
        params: SgfmParamGrads {
            gate_weights: d_gate_w,
            refine_weights: d_conv_w,
            bn_scale: d_scale,
            bn_shift: d_shift,
        },
    })
}

/// Auxiliary branch: the same fusion with the student's camera features in the
/// image slot and the frozen teacher LiDAR features in the LiDAR slot.
#[derive(Debug, Clone)]
pub struct AuxCache<T>(pub SgfmCache<T>);

#[derive(Debug, Clone, PartialEq)]
pub struct AuxGrads<T> {
    pub student: FeatureMap<T>,
    /// Always zero: the teacher is frozen.
    pub teacher: FeatureMap<T>,
    pub params: SgfmParamGrads<T>,
}

pub fn auxiliary_forward<T: Real>(
    f_student_cam: &FeatureMap<T>,
    f_teacher_lidar: &FeatureMap<T>,
    params: &SgfmParams<T>,
) -> Result<(FeatureMap<T>, AuxCache<T>)> {
    let (out, cache) = sgfm_forward(f_student_cam, f_teacher_lidar, params)?;
    Ok((out, AuxCache(cache)))
}

pub fn auxiliary_backward<T: Real>(cache: &AuxCache<T>, grad_out: &FeatureMap<T>) -> Result<AuxGrads<T>> {
    let g = sgfm_backward(&cache.0, grad_out)?;
    Ok(AuxGrads { teacher: FeatureMap::zeros(g.f_lidar.shape()), student: g.f_img, params: g.params })
}

const MANIFEST: &str = "manifest.txt";

/// Writes a parameter bundle: `manifest.txt` plus one FMAP blob per tensor.
pub fn save_params<T: Real>(params: &SgfmParams<T>, dir: impl AsRef<Path>) -> Result<()> {
    params.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let c = params.channels;
    let co = params.out_channels;
    let tensors: [(&str, &Vec<T>, Shape); 6] = [
        ("gate_weights", &params.gate_weights, Shape::new(1, c, 2 * c)),
        ("refine_weights", &params.refine_weights, Shape::new(co * params.refine_in_channels(), 3, 3)),
        ("bn_mean", &params.bn_mean, Shape::new(1, 1, co)),
        ("bn_var", &params.bn_var, Shape::new(1, 1, co)),
        ("bn_scale", &params.bn_scale, Shape::new(1, 1, co)),
        ("bn_shift", &params.bn_shift, Shape::new(1, 1, co)),
    ];
    let mut manifest = String::new();
    writeln!(manifest, "format sgfm-params 1").unwrap();
    writeln!(manifest, "channels {c}").unwrap();
    writeln!(manifest, "out_channels {co}").unwrap();
    writeln!(manifest, "refine_input {}", params.refine_input.as_str()).unwrap();
    writeln!(manifest, "bn_eps {:e}", params.bn_eps.to_f64_lossy()).unwrap();
    for (name, data, shape) in tensors {
        let file = format!("{name}.fmap");
        FeatureMap::from_vec(shape, data.clone())?.save(dir.join(&file))?;
        writeln!(manifest, "tensor {name} {file} {} {} {}", shape.channels, shape.height, shape.width).unwrap();
    }
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn load_params<T: Real>(dir: impl AsRef<Path>) -> Result<SgfmParams<T>> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    let bad = |m: String| Error::Format(format!("{MANIFEST}: {m}"));
    let mut channels = None;
    let mut out_channels = None;
    let mut mode = RefineInput::default();
    let mut eps = 1e-5;
    let mut tensors = std::collections::BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{line:?}: {e}")));
        match f.as_slice() {
            ["format", "sgfm-params", "1"] => {}
            ["channels", v] => channels = Some(num(v)?),
            ["out_channels", v] => out_channels = Some(num(v)?),
            ["refine_input", v] => mode = v.parse()?,
            ["bn_eps", v] => eps = v.parse::<f64>().map_err(|e| bad(format!("bn_eps: {e}")))?,
            ["tensor", name, file, c, h, w] => {
                let m = FeatureMap::<T>::load(dir.join(file))?;
                let want = Shape::new(num(c)?, num(h)?, num(w)?);
                if m.shape() != want {
                    return Err(bad(format!("{name}: blob is {} but manifest says {want}", m.shape())));
                }
                tensors.insert(name.to_string(), m.into_vec());
            }
            _ => return Err(bad(format!("unrecognised line {line:?}"))),
        }
    }
    let c = channels.ok_or_else(|| bad("missing channels".into()))?;
    let co = out_channels.ok_or_else(|| bad("missing out_channels".into()))?;
    let mut take = |n: &str| tensors.remove(n).ok_or_else(|| bad(format!("missing tensor {n}")));
    let p = SgfmParams {
        channels: c,
        out_channels: co,
        refine_input: mode,
        gate_weights: take("gate_weights")?,
        refine_weights: take("refine_weights")?,
        bn_mean: take("bn_mean")?,
        bn_var: take("bn_var")?,
        bn_scale: take("bn_scale")?,
        bn_shift: take("bn_shift")?,
        bn_eps: T::lit(eps),
    };
    p.validate()?;
    Ok(p)
}
