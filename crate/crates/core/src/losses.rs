//! Segmentation and detection losses, each returning its value together with
//! the analytic gradient with respect to the predicted probabilities (or
//! regression outputs).
//!
//! Probability maps are `[C × N]` tensors: class along the first axis, voxels
//! (flattened, batch included) along the second. Labels use the same layout
//! in one-hot form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-7;

/// Exponent of the focal modulating factor `(1 - p)^2`.
pub const FOCAL_GAMMA: i32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Tensor,
}

/// Soft confusion counts per class, computed from probabilities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassStats {
    pub tp: Vec<f64>,
    pub fn_: Vec<f64>,
    pub fp: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiceConfig {
    /// False-negative penalty.
    pub alpha: f64,
    /// False-positive penalty.
    pub beta: f64,
    /// Smoothing added to numerator and denominator. With `eps == 0` a class
    /// absent from both prediction and ground truth scores a perfect term.
    pub eps: f64,
}

impl Default for DiceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            eps: 1e-5,
        }
    }
}

impl DiceConfig {
    pub fn unsmoothed() -> Self {
        Self {
            eps: 0.0,
            ..Self::default()
        }
    }
}

/// Per-case annotation indicator. Class 0 is background and counts as
/// annotated only when every anatomy class is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationMask {
    m: Vec<bool>,
}

impl AnnotationMask {
    /// Builds the mask from the annotation flags of anatomy classes `1..C`.
    pub fn from_anatomy(annotated: &[bool]) -> Self {
        let mut m = Vec::with_capacity(annotated.len() + 1);
        m.push(annotated.iter().all(|&a| a));
        m.extend_from_slice(annotated);
        Self { m }
    }

    /// Full mask for `classes` classes (background included).
    pub fn full(classes: usize) -> Self {
        Self { m: vec![true; classes] }
    }

    pub fn from_indicators(m: Vec<bool>) -> Result<Self> {
        if m.is_empty() {
            return Err(Error::InvalidArgument("empty annotation mask".into()));
        }
        let all_anatomy = m[1..].iter().all(|&a| a);
        if m[0] != all_anatomy {
            return Err(Error::InvalidArgument(
                "background flag must be set iff every anatomy is annotated".into(),
            ));
        }
        Ok(Self { m })
    }

    pub fn classes(&self) -> usize {
        self.m.len()
    }

    pub fn get(&self, class: usize) -> f64 {
        if self.m[class] {
            1.0
        } else {
            0.0
        }
    }
}

fn class_voxel_dims(probs: &Tensor, labels: &Tensor) -> Result<(usize, usize)> {
    if probs.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "expected a [C x N] probability map, got shape {:?}",
            probs.shape()
        )));
    }
    labels.expect_shape(probs.shape())?;
    let (c, n) = (probs.shape()[0], probs.shape()[1]);
    for col in 0..n {
        let mut total = 0.0;
        for class in 0..c {
            let g = labels.data()[class * n + col];
            if g != 0.0 && g != 1.0 {
                return Err(Error::InvalidArgument(format!("label {g} is not 0/1")));
            }
            total += g;
        }
        if total != 1.0 {
            return Err(Error::InvalidArgument(format!("label column {col} is not one-hot")));
        }
    }
    Ok((c, n))
}

pub fn class_stats(probs: &Tensor, labels: &Tensor) -> Result<ClassStats> {
    let (c, n) = class_voxel_dims(probs, labels)?;
    let mut stats = ClassStats {
        tp: vec![0.0; c],
        fn_: vec![0.0; c],
        fp: vec![0.0; c],
    };
    for class in 0..c {
        let row = class * n..(class + 1) * n;
        for (&p, &g) in probs.data()[row.clone()].iter().zip(&labels.data()[row]) {
            stats.tp[class] += p * g;
            stats.fn_[class] += (1.0 - p) * g;
            stats.fp[class] += p * (1.0 - g);
        }
    }
    Ok(stats)
}

fn validate_dice(cfg: &DiceConfig) -> Result<()> {
    if !(cfg.alpha > 0.0 && cfg.beta > 0.0 && cfg.eps >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dice needs alpha, beta > 0 and eps >= 0, got {cfg:?}"
        )));
    }
    Ok(())
}

/// Shared Dice kernel. `class_weight(c)` multiplies the per-class term; the
/// plain loss passes 1 for every class.
fn dice_core(
    probs: &Tensor,
    labels: &Tensor,
    cfg: &DiceConfig,
    class_weight: impl Fn(usize) -> f64,
) -> Result<LossOutput> {
    validate_dice(cfg)?;
    let (c, n) = class_voxel_dims(probs, labels)?;
    let stats = class_stats(probs, labels)?;
    let mut value = c as f64;
    let mut grad = vec![0.0; c * n];
    let slope = 1.0 - cfg.alpha - cfg.beta;
    for class in 0..c {
        let weight = class_weight(class);
        let num = stats.tp[class] + cfg.eps;
        let den = stats.tp[class] + cfg.alpha * stats.fn_[class] + cfg.beta * stats.fp[class] + cfg.eps;
        if den == 0.0 {
            // 0/0 with eps = 0: the class is absent everywhere, term := 1.
            value -= weight;
            continue;
        }
        value -= weight * (num / den);
        if weight == 0.0 {
            continue;
        }
        // d den / d p_n = slope * g_n + beta, d num / d p_n = g_n
        let den2 = den * den;
        for v in 0..n {
            let g = labels.data()[class * n + v];
            let d_den = slope * g + cfg.beta;
            grad[class * n + v] = -weight * ((g * den - num * d_den) / den2);
        }
    }
    Ok(LossOutput {
        value,
        grad: Tensor::new(probs.shape().to_vec(), grad)?,
    })
}

/// `C - Σ_c (TP + eps) / (TP + α FN + β FP + eps)`.
pub fn dice_loss(probs: &Tensor, labels: &Tensor, cfg: &DiceConfig) -> Result<LossOutput> {
    dice_core(probs, labels, cfg, |_| 1.0)
}

fn focal_core(probs: &Tensor, labels: &Tensor, class_weight: impl Fn(usize) -> f64) -> Result<LossOutput> {
    let (c, n) = class_voxel_dims(probs, labels)?;
    let mut value = 0.0;
    let mut grad = vec![0.0; c * n];
    let inv_n = 1.0 / n as f64;
    for class in 0..c {
        let weight = class_weight(class);
        if weight == 0.0 {
            continue;
        }
        for v in 0..n {
            let i = class * n + v;
            let g = labels.data()[i];
            if g == 0.0 {
                continue;
            }
            let raw = probs.data()[i];
            let p = raw.clamp(PROB_FLOOR, 1.0);
            let q = 1.0 - p;
            let log_p = p.ln();
            value -= weight * inv_n * g * q.powi(FOCAL_GAMMA) * log_p;
            if raw > PROB_FLOOR && raw < 1.0 {
                // d/dp [(1-p)^2 ln p] = -2 (1-p) ln p + (1-p)^2 / p
                let d = -2.0 * q * log_p + q * q / p;
                grad[i] = -weight * inv_n * g * d;
            }
        }
    }
    Ok(LossOutput {
        value,
        grad: Tensor::new(probs.shape().to_vec(), grad)?,
    })
}

/// `-(1/N) Σ_c Σ_n g_n(c) (1 - p_n(c))^2 log p_n(c)`.
pub fn focal_loss(probs: &Tensor, labels: &Tensor) -> Result<LossOutput> {
    focal_core(probs, labels, |_| 1.0)
}

fn combine(a: LossOutput, b: LossOutput, lambda: f64) -> Result<LossOutput> {
    Ok(LossOutput {
        value: a.value + lambda * b.value,
        grad: a.grad.zip_with(&b.grad, |x, y| x + lambda * y)?,
    })
}

/// Dice loss plus `lambda` times the focal loss.
pub fn hybrid_loss(probs: &Tensor, labels: &Tensor, lambda: f64, cfg: &DiceConfig) -> Result<LossOutput> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    combine(dice_loss(probs, labels, cfg)?, focal_loss(probs, labels)?, lambda)
}

/// Per-class weights `1 / Σ_i m_i(c)` over a training set.
pub fn annotation_weights(masks: &[AnnotationMask]) -> Result<Vec<f64>> {
    let classes = masks
        .first()
        .map(AnnotationMask::classes)
        .ok_or_else(|| Error::InvalidArgument("no annotation masks".into()))?;
    if masks.iter().any(|m| m.classes() != classes) {
        return Err(Error::InvalidArgument("masks disagree on class count".into()));
    }
    (0..classes)
        .map(|c| {
            let count: f64 = masks.iter().map(|m| m.get(c)).sum();
            if count == 0.0 {
                Err(Error::ClassNeverAnnotated { class: c })
            } else {
                Ok(1.0 / count)
            }
        })
        .collect()
}

fn check_mask_weights(probs: &Tensor, mask: &AnnotationMask, weights: &[f64]) -> Result<()> {
    let c = probs.shape().first().copied().unwrap_or(0);
    if mask.classes() != c || weights.len() != c {
        return Err(Error::InvalidArgument(format!(
            "mask has {} classes and weights {}, probabilities {c}",
            mask.classes(),
            weights.len()
        )));
    }
    Ok(())
}

/// Dice loss with per-class terms scaled by `m(c) w(c)`; the constant `C`
/// is kept.
pub fn masked_weighted_dice(
    probs: &Tensor,
    labels: &Tensor,
    mask: &AnnotationMask,
    weights: &[f64],
    cfg: &DiceConfig,
) -> Result<LossOutput> {
    check_mask_weights(probs, mask, weights)?;
    dice_core(probs, labels, cfg, |c| mask.get(c) * weights[c])
}

pub fn masked_weighted_focal(
    probs: &Tensor,
    labels: &Tensor,
    mask: &AnnotationMask,
    weights: &[f64],
) -> Result<LossOutput> {
    check_mask_weights(probs, mask, weights)?;
    focal_core(probs, labels, |c| mask.get(c) * weights[c])
}

/// Masked Dice plus `lambda` times masked focal.
pub fn masked_hybrid_loss(
    probs: &Tensor,
    labels: &Tensor,
    mask: &AnnotationMask,
    weights: &[f64],
    lambda: f64,
    cfg: &DiceConfig,
) -> Result<LossOutput> {
    combine(
        masked_weighted_dice(probs, labels, mask, weights, cfg)?,
        masked_weighted_focal(probs, labels, mask, weights)?,
        lambda,
    )
}

/// Pixel-wise negative log-likelihood averaged over every pixel of every image.
pub fn fcn_nll(probs: &Tensor, labels: &Tensor) -> Result<LossOutput> {
    let (c, n) = class_voxel_dims(probs, labels)?;
    let mut value = 0.0;
    let mut grad = vec![0.0; c * n];
    let inv_n = 1.0 / n as f64;
    for (i, (&raw, &g)) in probs.data().iter().zip(labels.data()).enumerate() {
        if g == 0.0 {
            continue;
        }
        let p = raw.max(PROB_FLOOR);
        value -= inv_n * p.ln();
        if raw > PROB_FLOOR {
            grad[i] = -inv_n / p;
        }
    }
    Ok(LossOutput {
        value,
        grad: Tensor::new(probs.shape().to_vec(), grad)?,
    })
}

/// Mean binary cross-entropy with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(p: &Tensor, y: &Tensor) -> Result<LossOutput> {
    y.expect_shape(p.shape())?;
    if let Some(bad) = y.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(format!("binary target {bad} is not 0/1")));
    }
    let inv_n = 1.0 / p.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; p.len()];
    for (i, (&raw, &t)) in p.data().iter().zip(y.data()).enumerate() {
        let q = raw.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        // Exact targets incur no loss even at the clamp boundary.
        if raw == t {
            continue;
        }
        value -= inv_n * (t * q.ln() + (1.0 - t) * (1.0 - q).ln());
        if raw > PROB_FLOOR && raw < 1.0 - PROB_FLOOR {
            grad[i] = inv_n * (-(t / q) + (1.0 - t) / (1.0 - q));
        }
    }
    Ok(LossOutput {
        value,
        grad: Tensor::new(p.shape().to_vec(), grad)?,
    })
}

pub fn smooth_l1_scalar(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Mean elementwise smooth-L1 of `pred - target`.
pub fn smooth_l1(pred: &Tensor, target: &Tensor) -> Result<LossOutput> {
    target.expect_shape(pred.shape())?;
    let inv_n = 1.0 / pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&a, &b) in pred.data().iter().zip(target.data()) {
        let (v, d) = smooth_l1_scalar(a - b);
        value += inv_n * v;
        grad.push(inv_n * d);
    }
    Ok(LossOutput {
        value,
        grad: Tensor::new(pred.shape().to_vec(), grad)?,
    })
}

/// `(λ/2) ‖θ‖²` and its gradient `λ θ`.
pub fn l2_regularizer(params: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let value = 0.5 * lambda * params.iter().map(|v| v * v).sum::<f64>();
    (value, params.iter().map(|v| lambda * v).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use approx::assert_abs_diff_eq;

    fn one_hot(classes: &[usize], c: usize) -> Tensor {
        let n = classes.len();
        let mut data = vec![0.0; c * n];
        for (v, &k) in classes.iter().enumerate() {
            data[k * n + v] = 1.0;
        }
        Tensor::new(vec![c, n], data).unwrap()
    }

    fn probs(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn class_stats_examples() {
        let g = one_hot(&[0, 1, 1, 0, 2], 3);
        let s = class_stats(&g, &g).unwrap();
        assert_eq!(s.tp, vec![2.0, 2.0, 1.0]);
        assert_eq!(s.fn_, vec![0.0; 3]);
        assert_eq!(s.fp, vec![0.0; 3]);

        let s = class_stats(&Tensor::filled(&[2, 4], 0.5), &one_hot(&[0, 0, 0, 0], 2)).unwrap();
        assert_eq!((s.tp[0], s.fn_[0], s.fp[0]), (2.0, 2.0, 0.0));

        let s = class_stats(&probs(&[&[0.7], &[0.3]]), &one_hot(&[1], 2)).unwrap();
        assert_abs_diff_eq!(s.tp[1], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(s.fn_[1], 0.7, epsilon = 1e-15);
        assert_eq!(s.fp[1], 0.0);
    }

    #[test]
    fn class_stats_rejects_mismatch_and_soft_labels() {
        let p = Tensor::filled(&[2, 3], 0.5);
        assert!(class_stats(&p, &Tensor::filled(&[2, 2], 0.5)).is_err());
        assert!(class_stats(&p, &Tensor::filled(&[2, 3], 0.5)).is_err());
    }

    #[test]
    fn dice_examples() {
        let g = one_hot(&[0, 1, 2, 1], 3);
        assert_eq!(dice_loss(&g, &g, &DiceConfig::unsmoothed()).unwrap().value, 0.0);

        let p = probs(&[&[0.8, 0.4], &[0.2, 0.6]]);
        let g = one_hot(&[0, 1], 2);
        // Frozen from a standalone scalar evaluation of the formula.
        assert_abs_diff_eq!(
            dice_loss(&p, &g, &DiceConfig::unsmoothed()).unwrap().value,
            0.606_060_606_060_606_1,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            dice_loss(&p, &g, &DiceConfig::default()).unwrap().value,
            0.606_054_423_081_750_6,
            epsilon = 1e-15
        );
    }

    #[test]
    fn dice_absent_class_conventions() {
        // Class 2 appears in neither prediction nor labels.
        let p = probs(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]);
        let g = one_hot(&[0, 1], 3);
        let out = dice_loss(&p, &g, &DiceConfig::unsmoothed()).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.data().iter().all(|v| v.is_finite()));
        let smoothed = dice_loss(&p, &g, &DiceConfig::default()).unwrap();
        assert_abs_diff_eq!(smoothed.value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn dice_rejects_bad_config() {
        let g = one_hot(&[0], 2);
        let cfg = DiceConfig {
            alpha: 0.0,
            ..DiceConfig::default()
        };
        assert!(dice_loss(&g, &g, &cfg).is_err());
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let p = probs(&[&[0.8, 0.4], &[0.2, 0.6]]);
        let g = one_hot(&[0, 1], 2);
        let cfg = DiceConfig::default();
        let out = dice_loss(&p, &g, &cfg).unwrap();
        let report = grad_check(|x| dice_loss(x, &g, &cfg).unwrap().value, &out.grad, &p, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn focal_examples() {
        let g = one_hot(&[0, 1], 2);
        assert_eq!(focal_loss(&g, &g).unwrap().value, 0.0);
        let out = focal_loss(&probs(&[&[0.5], &[0.5]]), &one_hot(&[0], 2)).unwrap();
        assert_abs_diff_eq!(out.value, 0.173_286_795_139_986_32, epsilon = 1e-15);
    }

    #[test]
    fn focal_clamps_zero_probability() {
        let out = focal_loss(&probs(&[&[0.0], &[1.0]]), &one_hot(&[0], 2)).unwrap();
        assert_abs_diff_eq!(out.value, -(1e-7f64).ln() * (1.0 - 1e-7f64).powi(2), epsilon = 1e-9);
        assert_eq!(out.grad.data()[0], 0.0);
    }

    #[test]
    fn hybrid_degenerate_and_compositional() {
        let p = probs(&[&[0.7, 0.1, 0.35], &[0.3, 0.9, 0.65]]);
        let g = one_hot(&[0, 1, 0], 2);
        let cfg = DiceConfig::default();
        let dice = dice_loss(&p, &g, &cfg).unwrap();
        let focal = focal_loss(&p, &g).unwrap();
        assert_eq!(hybrid_loss(&p, &g, 0.0, &cfg).unwrap(), dice);
        let h = hybrid_loss(&p, &g, 0.5, &cfg).unwrap();
        assert_abs_diff_eq!(h.value, dice.value + 0.5 * focal.value, epsilon = 1e-15);
        assert_abs_diff_eq!(
            hybrid_loss(&g, &g, 1.0, &DiceConfig::unsmoothed()).unwrap().value,
            0.0,
            epsilon = 1e-12
        );
        assert!(hybrid_loss(&p, &g, -1.0, &cfg).is_err());
    }

    #[test]
    fn annotation_weight_examples() {
        let full = AnnotationMask::full(3);
        assert_eq!(
            annotation_weights(&[full.clone(), full.clone(), full]).unwrap()[1],
            1.0 / 3.0
        );

        let brain_stem: Vec<AnnotationMask> = (0..261).map(|i| AnnotationMask::from_anatomy(&[i < 196])).collect();
        assert_eq!(annotation_weights(&brain_stem).unwrap()[1], 1.0 / 196.0);

        let masks = [
            AnnotationMask::from_anatomy(&[true, true]),
            AnnotationMask::from_anatomy(&[true, true]),
            AnnotationMask::from_anatomy(&[false, true]),
            AnnotationMask::from_anatomy(&[false, true]),
        ];
        let w = annotation_weights(&masks).unwrap();
        assert_eq!(&w[1..], &[0.5, 0.25]);
        assert_eq!(w[0], 0.5);

        let never = [AnnotationMask::from_anatomy(&[true, false])];
        assert_eq!(annotation_weights(&never), Err(Error::ClassNeverAnnotated { class: 0 }));
        assert!(AnnotationMask::from_indicators(vec![true, false]).is_err());
    }

    #[test]
    fn masked_dice_degenerations() {
        let p = probs(&[&[0.6, 0.2, 0.3], &[0.3, 0.7, 0.1], &[0.1, 0.1, 0.6]]);
        let g = one_hot(&[0, 1, 2], 3);
        let cfg = DiceConfig::default();
        let plain = dice_loss(&p, &g, &cfg).unwrap();
        let full = masked_weighted_dice(&p, &g, &AnnotationMask::full(3), &[1.0; 3], &cfg).unwrap();
        assert_eq!(plain, full);

        let mask = AnnotationMask::from_anatomy(&[true, false]);
        let out = masked_weighted_dice(&p, &g, &mask, &[1.0; 3], &cfg).unwrap();
        assert!(out.grad.data()[6..9].iter().all(|&v| v == 0.0));
        assert!(out.grad.data()[0..3].iter().all(|&v| v == 0.0));
        let report = grad_check(
            |x| masked_weighted_dice(x, &g, &mask, &[1.0; 3], &cfg).unwrap().value,
            &out.grad,
            &p,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4);

        let half = masked_weighted_dice(&p, &g, &AnnotationMask::full(3), &[0.5; 3], &cfg).unwrap();
        let c = 3.0;
        assert_abs_diff_eq!(c - half.value, 0.5 * (c - plain.value), epsilon = 1e-14);
    }

    #[test]
    fn masked_focal_degenerations() {
        let p = probs(&[&[0.6, 0.2], &[0.4, 0.8]]);
        let g = one_hot(&[0, 1], 2);
        assert_eq!(
            focal_loss(&p, &g).unwrap(),
            masked_weighted_focal(&p, &g, &AnnotationMask::full(2), &[1.0, 1.0]).unwrap()
        );
        assert_eq!(
            masked_weighted_focal(&g, &g, &AnnotationMask::full(2), &[0.3, 0.7])
                .unwrap()
                .value,
            0.0
        );
    }

    #[test]
    fn fcn_nll_examples() {
        let g = one_hot(&[1, 0], 2);
        assert_eq!(fcn_nll(&g, &g).unwrap().value, 0.0);
        let e = (-1.0f64).exp();
        let p = probs(&[&[1.0 - e, e], &[e, 1.0 - e]]);
        assert_abs_diff_eq!(fcn_nll(&p, &g).unwrap().value, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn bce_examples() {
        let y = Tensor::vector(vec![0.0, 1.0]).unwrap();
        assert_eq!(bce(&y, &y).unwrap().value, 0.0);
        let half = Tensor::vector(vec![0.5]).unwrap();
        let one = Tensor::vector(vec![1.0]).unwrap();
        assert_abs_diff_eq!(bce(&half, &one).unwrap().value, std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(bce(&half, &Tensor::vector(vec![0.5]).unwrap()).is_err());
    }

    #[test]
    fn smooth_l1_examples() {
        let zero = Tensor::vector(vec![0.0, 0.0]).unwrap();
        assert_eq!(smooth_l1(&zero, &zero).unwrap().value, 0.0);
        let x = Tensor::vector(vec![0.5]).unwrap();
        assert_eq!(smooth_l1(&x, &Tensor::vector(vec![0.0]).unwrap()).unwrap().value, 0.125);
        let x = Tensor::vector(vec![2.0]).unwrap();
        assert_eq!(smooth_l1(&x, &Tensor::vector(vec![0.0]).unwrap()).unwrap().value, 1.5);
        assert!(smooth_l1(&x, &zero).is_err());
    }

    #[test]
    fn smooth_l1_gradient_continuous_at_one() {
        let f = |x: f64| smooth_l1_scalar(x).0;
        let h = 1e-6;
        let left = (f(1.0) - f(1.0 - h)) / h;
        let right = (f(1.0 + h) - f(1.0)) / h;
        assert!((left - right).abs() < 1e-6);
    }

    #[test]
    fn regularizer() {
        let (v, g) = l2_regularizer(&[3.0, 4.0], 0.5);
        assert_eq!(v, 6.25);
        assert_eq!(g, vec![1.5, 2.0]);
    }
}
