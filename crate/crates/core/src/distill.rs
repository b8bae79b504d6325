// SPDX-License-Identifier: Apache-2.0

//! Channel-wise feature distillation and the affinity alternative.
//!
//! Each channel is turned into a spatial distribution with a temperature
//! softmax; teacher and student distributions are compared with KL divergence
//! scaled by `T²/C`.

use rayon::prelude::*;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::fusion::{auxiliary_backward, AuxCache, SgfmParamGrads};
use crate::scalar::Real;
use crate::tensor::FeatureMap;

/// Where in the network the distillation loss is attached. Informational;
/// the loss itself is the same at every stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttachStage {
    /// After BEV fusion.
    Stage1,
    /// Encoder output.
    Stage2,
    /// Decoder output.
    #[default]
    Stage3,
}

impl std::str::FromStr for AttachStage {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(Self::Stage1),
            "stage2" => Ok(Self::Stage2),
            "stage3" => Ok(Self::Stage3),
            other => config_err(format!("unknown distillation stage {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub attach_stage: AttachStage,
    /// Whether the teacher→auxiliary gradient continues into the student
    /// operand of the auxiliary fusion.
    pub aux_grad_to_student: bool,
    /// Spatial subsampling of the affinity loss.
    pub affinity_stride: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 4.0,
            alpha1: 1.0,
            alpha2: 1.0,
            attach_stage: AttachStage::Stage3,
            aux_grad_to_student: true,
            affinity_stride: 4,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) || !self.alpha1.is_finite() || !self.alpha2.is_finite() {
            return config_err(format!("alphas must be nonnegative, got {} and {}", self.alpha1, self.alpha2));
        }
        if self.affinity_stride == 0 {
            return config_err("affinity stride must be at least 1");
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return config_err(format!("temperature must be positive, got {t}"));
    }
    Ok(())
}

/// Log-softmax of one channel plane at temperature `t`.
fn log_softmax_plane<T: Real>(plane: &[T], t: T) -> Vec<T> {
    let m = plane.iter().fold(T::neg_infinity(), |a, &b| a.max(b)) / t;
    let lse = plane.iter().map(|&v| (v / t - m).exp()).sum::<T>().ln() + m;
    plane.iter().map(|&v| v / t - lse).collect()
}

/// Per-channel spatial softmax at temperature `temperature`.
pub fn channel_softmax<T: Real>(f: &FeatureMap<T>, temperature: f64) -> Result<FeatureMap<T>> {
    check_temperature(temperature)?;
    let t = T::lit(temperature);
    let data: Vec<T> = (0..f.channels())
        .into_par_iter()
        .flat_map_iter(|c| log_softmax_plane(f.channel(c), t).into_iter().map(|l| l.exp()))
        .collect();
    FeatureMap::from_vec(f.shape(), data)
}

fn kl_parts<T: Real>(f_t: &FeatureMap<T>, f_s: &FeatureMap<T>, t: T) -> Vec<(T, Vec<T>, Vec<T>)> {
    (0..f_t.channels())
        .into_par_iter()
        .map(|c| {
            let lt = log_softmax_plane(f_t.channel(c), t);
            let ls = log_softmax_plane(f_s.channel(c), t);
            let pt: Vec<T> = lt.iter().map(|&l| l.exp()).collect();
            let ps: Vec<T> = ls.iter().map(|&l| l.exp()).collect();
            let kl = pt.iter().zip(lt.iter().zip(&ls)).map(|(&p, (&a, &b))| p * (a - b)).sum();
            (kl, pt, ps)
        })
        .collect()
}

/// `(T²/C) Σ_c KL(softmax(F_t,c / T) ‖ softmax(F_s,c / T))`.
pub fn kl_channelwise<T: Real>(f_teacher: &FeatureMap<T>, f_student: &FeatureMap<T>, temperature: f64) -> Result<T> {
    check_temperature(temperature)?;
    f_teacher.ensure_same_shape(f_student, "teacher vs student")?;
    let t = T::lit(temperature);
    let c = f_teacher.channels();
    if c == 0 {
        return Ok(T::zero());
    }
    let sum: T = kl_parts(f_teacher, f_student, t).iter().map(|p| p.0).sum();
    Ok(t * t / T::from_usize_lossy(c) * sum)
}

/// Gradient of [`kl_channelwise`] with respect to the student:
/// `(T / C) (p_s − p_t)` per channel.
pub fn kl_backward<T: Real>(
    f_teacher: &FeatureMap<T>,
    f_student: &FeatureMap<T>,
    temperature: f64,
) -> Result<FeatureMap<T>> {
    Ok(kl_with_grad(f_teacher, f_student, temperature)?.1)
}

fn kl_with_grad<T: Real>(f_t: &FeatureMap<T>, f_s: &FeatureMap<T>, temperature: f64) -> Result<(T, FeatureMap<T>)> {
    check_temperature(temperature)?;
    f_t.ensure_same_shape(f_s, "teacher vs student")?;
    let t = T::lit(temperature);
    let c = f_t.channels();
    if c == 0 {
        return Ok((T::zero(), FeatureMap::zeros(f_s.shape())));
    }
    let parts = kl_parts(f_t, f_s, t);
    let k = t / T::from_usize_lossy(c);
    let mut grad = Vec::with_capacity(f_s.shape().len());
    let mut sum = T::zero();
    for (kl, pt, ps) in parts {
        sum = sum + kl;
        grad.extend(ps.iter().zip(&pt).map(|(&s, &p)| k * (s - p)));
    }
    Ok((t * t / T::from_usize_lossy(c) * sum, FeatureMap::from_vec(f_s.shape(), grad)?))
}

/// Weighted distillation loss and its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct KdOutput<T> {
    pub loss: T,
    pub teacher_to_student: T,
    pub teacher_to_aux: Option<T>,
    pub grad_student: FeatureMap<T>,
    pub grad_aux: Option<FeatureMap<T>>,
}

/// `α₁ KL(T→S) + α₂ KL(T→A)`; the second term is dropped when no auxiliary
/// features are supplied.
pub fn kd_loss<T: Real>(
    f_t: &FeatureMap<T>,
    f_s: &FeatureMap<T>,
    f_a: Option<&FeatureMap<T>>,
    cfg: &DistillConfig,
) -> Result<KdOutput<T>> {
    cfg.validate()?;
    let (a1, a2) = (T::lit(cfg.alpha1), T::lit(cfg.alpha2));
    let (ts, mut grad_student) = kl_with_grad(f_t, f_s, cfg.temperature)?;
    grad_student.scale(a1);
    let mut loss = a1 * ts;
    let (teacher_to_aux, grad_aux) = match f_a {
        Some(fa) => {
            let (ta, mut g) = kl_with_grad(f_t, fa, cfg.temperature)?;
            g.scale(a2);
            loss = loss + a2 * ta;
            (Some(ta), Some(g))
        }
        None => (None, None),
    };
    Ok(KdOutput { loss, teacher_to_student: ts, teacher_to_aux, grad_student, grad_aux })
}

/// Routes the auxiliary-branch distillation gradient through the auxiliary
/// fusion. Returns the contribution to the student's camera features (zero
/// when `aux_grad_to_student` is off) and the fusion parameter gradients.
pub fn route_aux_gradient<T: Real>(
    grad_aux: &FeatureMap<T>,
    aux_cache: &AuxCache<T>,
    cfg: &DistillConfig,
) -> Result<(FeatureMap<T>, SgfmParamGrads<T>)> {
    let g = auxiliary_backward(aux_cache, grad_aux)?;
    let student = if cfg.aux_grad_to_student { g.student } else { FeatureMap::zeros(g.student.shape()) };
    Ok((student, g.params))
}

/// Affinity-matrix distillation loss with its student gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityOutput<T> {
    pub loss: T,
    pub grad_student: FeatureMap<T>,
    /// Sampled positions whose feature vector had zero norm (teacher or
    /// student); their affinity rows are zero.
    pub zero_norm_positions: usize,
}

/// Positions visited by the affinity loss: every `stride`-th row and column.
pub fn affinity_positions(height: usize, width: usize, stride: usize) -> Vec<usize> {
    let s = stride.max(1);
    let mut out = Vec::new();
    for y in (0..height).step_by(s) {
        for x in (0..width).step_by(s) {
            out.push(y * width + x);
        }
    }
    out
}

fn normalized_vectors<T: Real>(f: &FeatureMap<T>, pos: &[usize]) -> (Vec<Vec<T>>, Vec<T>) {
    let plane = f.shape().plane();
    let c = f.channels();
    let mut vecs = Vec::with_capacity(pos.len());
    let mut norms = Vec::with_capacity(pos.len());
    for &p in pos {
        let v: Vec<T> = (0..c).map(|ch| f.data()[ch * plane + p]).collect();
        let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        norms.push(n);
        vecs.push(if n > T::zero() { v.iter().map(|&x| x / n).collect() } else { vec![T::zero(); c] });
    }
    (vecs, norms)
}

fn affinity<T: Real>(vecs: &[Vec<T>]) -> Vec<T> {
    let n = vecs.len();
    let mut a = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = vecs[i].iter().zip(&vecs[j]).map(|(&x, &y)| x * y).sum();
        }
    }
    a
}

/// Mean squared difference between teacher and student cosine-affinity
/// matrices over positions sampled every `stride` cells.
pub fn affinity_distill<T: Real>(f_t: &FeatureMap<T>, f_s: &FeatureMap<T>, stride: usize) -> Result<AffinityOutput<T>> {
    f_t.ensure_same_shape(f_s, "teacher vs student")?;
    if stride == 0 {
        return config_err("affinity stride must be at least 1");
    }
    let shape = f_s.shape();
    let pos = affinity_positions(shape.height, shape.width, stride);
    let n = pos.len();
    let mut grad = FeatureMap::zeros(shape);
    if n == 0 {
        return Ok(AffinityOutput { loss: T::zero(), grad_student: grad, zero_norm_positions: 0 });
    }
    let (vt, nt) = normalized_vectors(f_t, &pos);
    let (vs, ns) = normalized_vectors(f_s, &pos);
    let zero_norm_positions = nt.iter().zip(&ns).filter(|(&a, &b)| a == T::zero() || b == T::zero()).count();
    let at = affinity(&vt);
    let as_ = affinity(&vs);
    let nn = T::from_usize_lossy(n * n);
    let mut loss = T::zero();
    for i in 0..n {
        for j in 0..n {
            let d = as_[i * n + j] - at[i * n + j];
            loss = loss + d * d;
        }
    }
    loss = loss / nn;

    // dL/dn_i = (4/N²) Σ_j D_ij n_j with D symmetric; project onto the
    // tangent space of the unit sphere and divide by the norm.
    let c = shape.channels;
    let plane = shape.plane();
    let four = T::lit(4.0);
    for i in 0..n {
        if ns[i] == T::zero() {
            continue;
        }
        let mut g = vec![T::zero(); c];
        for j in 0..n {
            let d = as_[i * n + j] - at[i * n + j];
            for ch in 0..c {
                g[ch] = g[ch] + d * vs[j][ch];
            }
        }
        for v in &mut g {
            *v = *v * four / nn;
        }
        let radial: T = g.iter().zip(&vs[i]).map(|(&a, &b)| a * b).sum();
        for ch in 0..c {
            grad.data_mut()[ch * plane + pos[i]] = (g[ch] - vs[i][ch] * radial) / ns[i];
        }
    }
    Ok(AffinityOutput { loss, grad_student: grad, zero_norm_positions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, shape: Shape) -> FeatureMap<f64> {
        FeatureMap::from_fn(shape, |_, _, _| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn constant_channel_is_uniform() {
        let f = FeatureMap::filled(Shape::new(2, 3, 5), 7.0f64);
        let p = channel_softmax(&f, 4.0).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 15.0).abs() < 1e-15));
    }

    #[test]
    fn closed_form_two_cell_softmax() {
        let f = FeatureMap::from_vec(Shape::new(1, 1, 2), vec![0.0f64, 3f64.ln()]).unwrap();
        let p = channel_softmax(&f, 1.0).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn high_temperature_flattens() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = rand_map(&mut rng, Shape::new(2, 4, 4));
        let dev = |t| {
            let p = channel_softmax(&f, t).unwrap();
            p.data().iter().map(|&v| (v - 1.0 / 16.0).abs()).fold(0.0, f64::max)
        };
        assert!(dev(100.0) < dev(1.0));
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        let f = FeatureMap::<f64>::zeros(Shape::new(1, 2, 2));
        assert!(channel_softmax(&f, 0.0).is_err());
        assert!(kl_channelwise(&f, &f, -1.0).is_err());
    }

    #[test]
    fn hand_computed_kl() {
        let t = FeatureMap::from_vec(Shape::new(1, 1, 2), vec![0.0f64, 3f64.ln()]).unwrap();
        let s = FeatureMap::from_vec(Shape::new(1, 1, 2), vec![0.5f64, 0.5]).unwrap();
        let kl = kl_channelwise(&t, &s, 1.0).unwrap();
        let expected = 0.25 * (0.5f64).ln() + 0.75 * (1.5f64).ln();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.130812).abs() < 1e-6);
    }

    #[test]
    fn identical_maps_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = rand_map(&mut rng, Shape::new(3, 4, 5));
        assert!(kl_channelwise(&f, &f, 4.0).unwrap().abs() < 1e-12);
        assert!(kl_backward(&f, &f, 4.0).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn kl_gradient_channels_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Shape::new(3, 4, 5);
        let g = kl_backward(&rand_map(&mut rng, s), &rand_map(&mut rng, s), 2.0).unwrap();
        for c in 0..3 {
            assert!(g.channel(c).iter().sum::<f64>().abs() < 1e-10);
        }
    }

    #[test]
    fn kd_without_aux_is_plain_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = Shape::new(2, 3, 3);
        let (t, st) = (rand_map(&mut rng, s), rand_map(&mut rng, s));
        let cfg = DistillConfig { alpha1: 1.0, ..Default::default() };
        let out = kd_loss(&t, &st, None, &cfg).unwrap();
        assert_eq!(out.loss, kl_channelwise(&t, &st, cfg.temperature).unwrap());
        assert!(out.grad_aux.is_none());
    }

    #[test]
    fn kd_all_equal_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = rand_map(&mut rng, Shape::new(2, 3, 3));
        let out = kd_loss(&f, &f, Some(&f), &DistillConfig::default()).unwrap();
        assert!(out.loss.abs() < 1e-12);
    }

    #[test]
    fn kd_is_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = Shape::new(2, 4, 3);
        let (t, st, a) = (rand_map(&mut rng, s), rand_map(&mut rng, s), rand_map(&mut rng, s));
        let cfg = DistillConfig::default();
        let out = kd_loss(&t, &st, Some(&a), &cfg).unwrap();
        let want = kl_channelwise(&t, &st, 4.0).unwrap() + kl_channelwise(&t, &a, 4.0).unwrap();
        assert!((out.loss - want).abs() < 1e-14);
    }

    #[test]
    fn negative_alpha_rejected() {
        let f = FeatureMap::<f64>::zeros(Shape::new(1, 2, 2));
        let cfg = DistillConfig { alpha2: -0.1, ..Default::default() };
        assert!(matches!(kd_loss(&f, &f, None, &cfg), Err(crate::Error::InvalidConfig(_))));
    }

    #[test]
    fn affinity_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = rand_map(&mut rng, Shape::new(3, 6, 6));
        assert_eq!(affinity_distill(&f, &f, 2).unwrap().loss, 0.0);
        let scaled = f.map(|v| v * 3.5);
        assert!(affinity_distill(&f, &scaled, 1).unwrap().loss < 1e-28);
    }

    #[test]
    fn affinity_zero_vectors_flagged() {
        let mut f = FeatureMap::filled(Shape::new(2, 2, 2), 1.0f64);
        f.set(0, 0, 0, 0.0);
        f.set(1, 0, 0, 0.0);
        let out = affinity_distill(&FeatureMap::filled(f.shape(), 1.0), &f, 1).unwrap();
        assert_eq!(out.zero_norm_positions, 1);
        assert_eq!(out.grad_student.get(0, 0, 0), 0.0);
        assert!(out.loss > 0.0);
    }

    #[test]
    fn stride_subsamples_positions() {
        assert_eq!(affinity_positions(5, 5, 4), vec![0, 4, 20, 24]);
        assert_eq!(affinity_positions(2, 3, 1).len(), 6);
    }
}
