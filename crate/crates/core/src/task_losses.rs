// SPDX-License-Identifier: Apache-2.0

//! Student objectives: focal segmentation loss, balanced MSE for centerness,
//! masked L1 for offsets, and learned uncertainty weighting.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::scalar::{sigmoid, softplus, Real};
use crate::tensor::{FeatureMap, Shape};

/// Log-variances `s` of the three student tasks; task weight is `exp(−s)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub log_variances: [f64; 3],
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.log_variances.iter().all(|s| s.is_finite()) {
            Ok(())
        } else {
            config_err("log variances must be finite")
        }
    }
}

/// Supervision for the three BEV heads on an `H × W` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BevTargets<T> {
    pub seg: Vec<bool>,
    /// `1 × H × W`, values in `[0, 1]`.
    pub centerness: FeatureMap<T>,
    /// `2 × H × W` meters.
    pub offset: FeatureMap<T>,
    /// Cells supervising centerness and offset.
    pub valid: Vec<bool>,
}

impl<T: Real> BevTargets<T> {
    pub fn height(&self) -> usize {
        self.centerness.height()
    }

    pub fn width(&self) -> usize {
        self.centerness.width()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if self.centerness.channels() != 1 || self.offset.shape() != Shape::new(2, h, w) {
            return shape_err(format!(
                "targets: centerness {} and offset {} disagree",
                self.centerness.shape(),
                self.offset.shape()
            ));
        }
        if self.seg.len() != h * w || self.valid.len() != h * w {
            return shape_err(format!("targets: masks must have {} cells", h * w));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to one prediction map.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T> {
    pub loss: T,
    pub grad: FeatureMap<T>,
}

fn check_mask(name: &str, mask: &[bool], shape: Shape) -> Result<()> {
    if mask.len() != shape.plane() {
        return shape_err(format!("{name} has {} cells, map {shape} has {}", mask.len(), shape.plane()));
    }
    Ok(())
}

fn check_plane<T: Real>(name: &str, f: &FeatureMap<T>, channels: usize) -> Result<()> {
    if f.channels() != channels {
        return shape_err(format!("{name} must have {channels} channel(s), got {}", f.shape()));
    }
    Ok(())
}

/// Mean binary focal loss over all cells of a `1 × H × W` logit map.
pub fn focal_loss<T: Real>(logits: &FeatureMap<T>, target: &[bool], alpha: f64, gamma: f64) -> Result<LossGrad<T>> {
    check_plane("logits", logits, 1)?;
    check_mask("target", target, logits.shape())?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return config_err(format!("focal alpha must lie in (0, 1), got {alpha}"));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return config_err(format!("focal gamma must be nonnegative, got {gamma}"));
    }
    let n = logits.data().len();
    if n == 0 {
        return Ok(LossGrad { loss: T::zero(), grad: FeatureMap::zeros(logits.shape()) });
    }
    let (a, g) = (T::lit(alpha), T::lit(gamma));
    let inv_n = T::one() / T::from_usize_lossy(n);
    // z' is the logit of the true class; q = 1 − p_t; −log p_t = softplus(−z').
    let terms: Vec<(T, T)> = logits
        .data()
        .par_iter()
        .zip(target.par_iter())
        .map(|(&z, &t)| {
            let (zt, at, sign) = if t { (z, a, T::one()) } else { (-z, T::one() - a, -T::one()) };
            let q = sigmoid(-zt);
            let sp = softplus(-zt);
            let qg = if g == T::zero() { T::one() } else { q.powf(g) };
            let loss = at * qg * sp;
            let d = -at * qg * (g * (T::one() - q) * sp + q);
            (loss, sign * d * inv_n)
        })
        .collect();
    let loss = terms.iter().map(|t| t.0).sum::<T>() * inv_n;
    let grad = FeatureMap::from_vec(logits.shape(), terms.into_iter().map(|t| t.1).collect())?;
    Ok(LossGrad { loss, grad })
}

/// Batch balanced MSE over the valid cells of `1 × H × W` maps: each cell is
/// classified against every valid target with logits `−(p_i − t_j)²/(2σ²)`.
pub fn balanced_mse<T: Real>(
    pred: &FeatureMap<T>,
    target: &FeatureMap<T>,
    valid: &[bool],
    sigma: f64,
) -> Result<LossGrad<T>> {
    check_plane("prediction", pred, 1)?;
    pred.ensure_same_shape(target, "prediction vs target")?;
    check_mask("valid", valid, pred.shape())?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return config_err(format!("noise sigma must be positive, got {sigma}"));
    }
    let idx: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
    if idx.is_empty() {
        return Err(Error::EmptySupervision);
    }
    let var = T::lit(sigma * sigma);
    let two_var = var + var;
    let p = pred.data();
    let t: Vec<T> = idx.iter().map(|&i| target.data()[i]).collect();
    let inv_n = T::one() / T::from_usize_lossy(idx.len());

    let per: Vec<(T, T)> = idx
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let pi = p[i];
            let logits: Vec<T> = t.iter().map(|&tj| -(pi - tj) * (pi - tj) / two_var).collect();
            let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let exps: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
            let z: T = exps.iter().copied().sum();
            let loss = m + z.ln() - logits[k];
            let expected: T = exps.iter().zip(&t).map(|(&e, &tj)| e / z * (pi - tj)).sum();
            (loss, ((pi - t[k]) - expected) / var * inv_n)
        })
        .collect();

    let mut grad = FeatureMap::zeros(pred.shape());
    let mut loss = T::zero();
    for (&i, (l, g)) in idx.iter().zip(per) {
        loss = loss + l;
        grad.data_mut()[i] = g;
    }
    Ok(LossGrad { loss: loss * inv_n, grad })
}

/// Mean absolute error over valid cells and every channel.
pub fn masked_l1<T: Real>(pred: &FeatureMap<T>, target: &FeatureMap<T>, valid: &[bool]) -> Result<LossGrad<T>> {
    pred.ensure_same_shape(target, "prediction vs target")?;
    check_mask("valid", valid, pred.shape())?;
    let cells = valid.iter().filter(|&&v| v).count();
    if cells == 0 || pred.channels() == 0 {
        return Err(Error::EmptySupervision);
    }
    let plane = pred.shape().plane();
    let inv = T::one() / T::from_usize_lossy(cells * pred.channels());
    let mut grad = FeatureMap::zeros(pred.shape());
    let mut loss = T::zero();
    for (j, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        if !valid[j % plane] {
            continue;
        }
        let d = p - t;
        loss = loss + d.abs();
        grad.data_mut()[j] = if d > T::zero() {
            inv
        } else if d < T::zero() {
            -inv
        } else {
            T::zero()
        };
    }
    Ok(LossGrad { loss: loss * inv, grad })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedSum<T> {
    pub loss: T,
    /// `∂/∂L_i = exp(−s_i)`.
    pub d_losses: [T; 3],
    /// `∂/∂s_i = 1 − exp(−s_i) L_i`.
    pub d_log_variances: [T; 3],
}

/// `Σ exp(−s_i) L_i + s_i`.
pub fn uncertainty_weighted_sum<T: Real>(losses: [T; 3], w: &LossWeights) -> WeightedSum<T> {
    let mut out = WeightedSum { loss: T::zero(), d_losses: [T::zero(); 3], d_log_variances: [T::zero(); 3] };
    for i in 0..3 {
        let s = T::lit(w.log_variances[i]);
        let lambda = (-s).exp();
        out.loss = out.loss + lambda * losses[i] + s;
        out.d_losses[i] = lambda;
        out.d_log_variances[i] = T::one() - lambda * losses[i];
    }
    out
}

/// A scalar objective with gradients keyed by the tensor they address.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective<T> {
    pub loss: T,
    pub grads: BTreeMap<String, FeatureMap<T>>,
}

impl<T: Real> Objective<T> {
    pub fn new(loss: T) -> Self {
        Self { loss, grads: BTreeMap::new() }
    }

    pub fn with_grad(mut self, name: impl Into<String>, grad: FeatureMap<T>) -> Self {
        self.grads.insert(name.into(), grad);
        self
    }
}

/// `L_KD + L_stu`; gradients addressing the same tensor are summed.
pub fn total_loss<T: Real>(kd: &Objective<T>, stu: &Objective<T>) -> Result<Objective<T>> {
    let mut out = kd.clone();
    out.loss = kd.loss + stu.loss;
    for (name, g) in &stu.grads {
        match out.grads.get_mut(name) {
            Some(acc) => acc.add_assign(g)?,
            None => {
                out.grads.insert(name.clone(), g.clone());
            }
        }
    }
    Ok(out)
}

/// Student head outputs on an `H × W` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentPrediction<T> {
    pub seg_logits: FeatureMap<T>,
    pub centerness: FeatureMap<T>,
    pub offset: FeatureMap<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentLossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub bmse_sigma: f64,
    pub weights: LossWeights,
}

impl Default for StudentLossConfig {
    fn default() -> Self {
        Self { focal_alpha: 0.25, focal_gamma: 2.0, bmse_sigma: 1.0, weights: LossWeights::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentLoss<T> {
    /// Gradients are keyed `seg_logits`, `centerness` and `offset`.
    pub objective: Objective<T>,
    /// Unweighted `[L_seg, L_cen, L_off]`.
    pub task_losses: [T; 3],
    pub d_log_variances: [T; 3],
}

/// Uncertainty-weighted sum of the three student head losses.
pub fn student_loss<T: Real>(
    pred: &StudentPrediction<T>,
    targets: &BevTargets<T>,
    cfg: &StudentLossConfig,
) -> Result<StudentLoss<T>> {
    targets.validate()?;
    cfg.weights.validate()?;
    let seg = focal_loss(&pred.seg_logits, &targets.seg, cfg.focal_alpha, cfg.focal_gamma)?;
    let cen = balanced_mse(&pred.centerness, &targets.centerness, &targets.valid, cfg.bmse_sigma)?;
    let off = masked_l1(&pred.offset, &targets.offset, &targets.valid)?;
    let task_losses = [seg.loss, cen.loss, off.loss];
    let ws = uncertainty_weighted_sum(task_losses, &cfg.weights);
    let scaled = |mut g: FeatureMap<T>, k: T| {
        g.scale(k);
        g
    };
    let objective = Objective::new(ws.loss)
        .with_grad("seg_logits", scaled(seg.grad, ws.d_losses[0]))
        .with_grad("centerness", scaled(cen.grad, ws.d_losses[1]))
        .with_grad("offset", scaled(off.grad, ws.d_losses[2]));
    Ok(StudentLoss { objective, task_losses, d_log_variances: ws.d_log_variances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane(v: Vec<f64>) -> FeatureMap<f64> {
        let n = v.len();
        FeatureMap::from_vec(Shape::new(1, 1, n), v).unwrap()
    }

    #[test]
    fn focal_closed_form() {
        let out = focal_loss(&plane(vec![0.0]), &[true], 0.25, 2.0).unwrap();
        assert!((out.loss - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((out.loss - 0.043322).abs() < 1e-6);
    }

    #[test]
    fn focal_gamma_zero_is_half_bce() {
        let z = vec![-2.0, 0.3, 1.7, -0.1];
        let t = [false, true, true, true];
        let out = focal_loss(&plane(z.clone()), &t, 0.5, 0.0).unwrap();
        let bce: f64 = z
            .iter()
            .zip(&t)
            .map(|(&z, &t)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(if t { p.ln() } else { (1.0 - p).ln() })
            })
            .sum::<f64>()
            / 4.0;
        assert!((out.loss - 0.5 * bce).abs() < 1e-14);
    }

    #[test]
    fn focal_decreases_with_margin_and_is_stable() {
        let l = |z: f64| focal_loss(&plane(vec![z]), &[true], 0.25, 2.0).unwrap().loss;
        assert!(l(1.0) < l(0.0) && l(5.0) < l(1.0) && l(50.0) < l(5.0));
        assert!(l(800.0) >= 0.0 && l(-800.0).is_finite());
    }

    #[test]
    fn focal_rejects_bad_hyperparameters() {
        assert!(focal_loss(&plane(vec![0.0]), &[true], 1.0, 2.0).is_err());
        assert!(focal_loss(&plane(vec![0.0]), &[true], 0.5, -1.0).is_err());
    }

    #[test]
    fn balanced_mse_single_cell_is_zero() {
        let out = balanced_mse(&plane(vec![0.3, 9.0]), &plane(vec![0.9, 1.0]), &[true, false], 1.0).unwrap();
        assert!(out.loss.abs() < 1e-15);
        assert_eq!(out.grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn balanced_mse_identical_pairs_is_ln2() {
        let out = balanced_mse(&plane(vec![0.4, 0.4]), &plane(vec![0.7, 0.7]), &[true, true], 0.5).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn balanced_mse_empty_valid() {
        let r = balanced_mse(&plane(vec![0.1]), &plane(vec![0.2]), &[false], 1.0);
        assert!(matches!(r, Err(Error::EmptySupervision)));
    }

    #[test]
    fn l1_cases() {
        let p = FeatureMap::from_fn(Shape::new(2, 2, 2), |c, y, x| (c + y + x) as f64);
        let valid = [true, false, true, true];
        assert_eq!(masked_l1(&p, &p, &valid).unwrap().loss, 0.0);
        let q = p.map(|v| v + 0.5);
        assert_eq!(masked_l1(&q, &p, &valid).unwrap().loss, 0.5);
        assert!(matches!(masked_l1(&q, &p, &[false; 4]), Err(Error::EmptySupervision)));
    }

    #[test]
    fn uncertainty_zero_is_plain_sum() {
        let out = uncertainty_weighted_sum([1.5f64, 0.25, 2.0], &LossWeights::default());
        assert_eq!(out.loss, 3.75);
        assert_eq!(out.d_log_variances, [1.0 - 1.5, 1.0 - 0.25, 1.0 - 2.0]);
    }

    #[test]
    fn uncertainty_stationary_point() {
        let l = 2.5f64;
        let w = LossWeights { log_variances: [l.ln(), 0.0, 0.0] };
        let out = uncertainty_weighted_sum([l, 1.0, 1.0], &w);
        assert!(out.d_log_variances[0].abs() < 1e-15);
    }

    #[test]
    fn total_merges_shared_gradients() {
        let s = Shape::new(1, 2, 2);
        let kd = Objective::new(1.0f64).with_grad("student", FeatureMap::filled(s, 1.0));
        let stu = Objective::new(2.0f64)
            .with_grad("student", FeatureMap::filled(s, 0.5))
            .with_grad("seg_logits", FeatureMap::filled(s, 3.0));
        let t = total_loss(&kd, &stu).unwrap();
        assert_eq!(t.loss, 3.0);
        assert!(t.grads["student"].data().iter().all(|&v| v == 1.5));
        assert!(t.grads["seg_logits"].data().iter().all(|&v| v == 3.0));
        let zero = Objective::new(0.0f64);
        assert_eq!(total_loss(&zero, &stu).unwrap(), stu);
    }

    #[test]
    fn student_loss_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s1 = Shape::new(1, 3, 4);
        let mut r = |s: Shape| FeatureMap::from_fn(s, |_, _, _| rng.gen_range(-1.0f64..1.0));
        let pred = StudentPrediction { seg_logits: r(s1), centerness: r(s1), offset: r(Shape::new(2, 3, 4)) };
        let seg: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
        let targets = BevTargets {
            seg: seg.clone(),
            centerness: r(s1).map(f64::abs),
            offset: r(Shape::new(2, 3, 4)),
            valid: seg,
        };
        let cfg = StudentLossConfig { weights: LossWeights { log_variances: [0.1, -0.2, 0.3] }, ..Default::default() };
        let out = student_loss(&pred, &targets, &cfg).unwrap();
        let ws = uncertainty_weighted_sum(out.task_losses, &cfg.weights);
        assert_eq!(out.objective.loss, ws.loss);
        assert_eq!(out.objective.grads.len(), 3);
    }
}
