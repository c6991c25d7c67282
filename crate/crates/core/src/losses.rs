//! The three-term detection/segmentation objective and its analytic
//! gradients.
//!
//! `total = conf + alpha * loc + beta * seg`, where
//! - `seg` is the mean absolute error between the predicted and ground-truth
//!   foreground maps,
//! - `conf` is a focal loss whose weight `eta` is derived from how much of
//!   the predicted map belongs to each class,
//! - `loc` is the smooth-L1 regression loss over positive anchors.
//!
//! Everything here works in `f64`; the network casts its outputs before
//! handing them in.

use ndarray::{Array, ArrayView, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::OffsetVector;

/// Probabilities are kept this far from 0 and 1 before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Nucleus = 1,
}

impl Class {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_positive(self) -> bool {
        self == Class::Nucleus
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Focusing exponent.
    pub gamma: f64,
    pub eta_cap: f64,
    /// Floor on the predicted pixel count in the `eta` denominator.
    pub eta_epsilon: f64,
    /// Level at which the continuous segmentation output is binarized.
    pub seg_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 0.1,
            gamma: 2.0,
            eta_cap: 100.0,
            eta_epsilon: 1.0,
            seg_threshold: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && self.beta >= 0.0
            && self.gamma >= 0.0
            && self.eta_cap >= 1.0
            && self.eta_epsilon >= 1.0
            && (0.0..=1.0).contains(&self.seg_threshold);
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid loss config {self:?}")))
        }
    }
}

/// Per-step loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub conf: f64,
    pub loc: f64,
    pub seg: f64,
    /// Weight applied to nucleus anchors.
    pub eta: f64,
    /// Weight applied to background anchors.
    pub eta_background: f64,
    pub total: f64,
    pub n_positive: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.conf, self.loc, self.seg, self.eta, self.eta_background, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_shapes(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: a.to_vec(),
            actual: b.to_vec(),
        });
    }
    Ok(())
}

/// Mean absolute error over all pixels, with its (sub)gradient
/// `sign(pred - gt) / M`.
pub fn seg_loss<D: Dimension>(pred: ArrayView<f64, D>, gt: ArrayView<f64, D>) -> Result<(f64, Array<f64, D>)> {
    check_shapes(gt.shape(), pred.shape())?;
    let m = pred.len();
    if m == 0 {
        return Err(Error::input("empty segmentation map"));
    }
    let inv_m = 1.0 / m as f64;
    let mut sum = 0.0;
    let mut grad = Array::zeros(pred.raw_dim());
    Zip::from(&mut grad).and(&pred).and(&gt).for_each(|g, &p, &t| {
        let d = p - t;
        sum += d.abs();
        *g = if d > 0.0 {
            inv_m
        } else if d < 0.0 {
            -inv_m
        } else {
            0.0
        };
    });
    Ok((sum * inv_m, grad))
}

/// `sqrt(S_all / max(S_c, eps))`, capped, where `S_all` counts every pixel
/// of the ground truth and `S_c` counts predicted pixels of class `c`
/// after binarization.
pub fn imbalance_weight<D: Dimension>(
    gt: ArrayView<f64, D>,
    pred: ArrayView<f64, D>,
    c: Class,
    cfg: &LossConfig,
) -> Result<f64> {
    check_shapes(gt.shape(), pred.shape())?;
    let s_all = gt.len() as f64;
    let s_c = pred
        .iter()
        .filter(|&&p| (p >= cfg.seg_threshold) == c.is_positive())
        .count() as f64;
    Ok((s_all / s_c.max(cfg.eta_epsilon)).sqrt().min(cfg.eta_cap))
}

/// Class-dependent `eta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassWeights {
    pub background: f64,
    pub nucleus: f64,
}

impl ClassWeights {
    pub fn uniform(w: f64) -> Self {
        ClassWeights {
            background: w,
            nucleus: w,
        }
    }

    pub fn from_segmentation<D: Dimension>(
        gt: ArrayView<f64, D>,
        pred: ArrayView<f64, D>,
        cfg: &LossConfig,
    ) -> Result<Self> {
        Ok(ClassWeights {
            background: imbalance_weight(gt.view(), pred.view(), Class::Background, cfg)?,
            nucleus: imbalance_weight(gt, pred, Class::Nucleus, cfg)?,
        })
    }

    pub fn get(&self, c: Class) -> f64 {
        match c {
            Class::Background => self.background,
            Class::Nucleus => self.nucleus,
        }
    }
}

/// Focal term `(1 - p)^gamma * (-ln p)` and its derivative in `p`, with
/// `p` clamped away from 0 and 1 (zero derivative where clamped).
fn focal(p: f64, gamma: f64) -> (f64, f64) {
    let clamped = !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p);
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = 1.0 - p;
    let ln_p = p.ln();
    let value = q.powf(gamma) * -ln_p;
    if clamped {
        return (value, 0.0);
    }
    let d_weight = if gamma == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * ln_p
    };
    (value, d_weight - q.powf(gamma) / p)
}

/// Mean focal loss over all anchors with a single `eta`.
///
/// `pred_conf[i]` is the predicted probability of anchor `i`'s target class.
pub fn conf_loss(pred_conf: &[f64], targets: &[Class], eta: f64, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    conf_loss_weighted(pred_conf, targets, ClassWeights::uniform(eta), cfg)
}

/// Mean focal loss where each anchor is weighted by the `eta` of its target
/// class.
pub fn conf_loss_weighted(
    pred_conf: &[f64],
    targets: &[Class],
    eta: ClassWeights,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    if pred_conf.is_empty() {
        return Err(Error::input("conf_loss over an empty anchor set"));
    }
    check_shapes(&[targets.len()], &[pred_conf.len()])?;
    let inv_n = 1.0 / pred_conf.len() as f64;
    let mut sum = 0.0;
    let grad = pred_conf
        .iter()
        .zip(targets)
        .map(|(&p, &c)| {
            let w = eta.get(c);
            let (v, d) = focal(p, cfg.gamma);
            sum += w * v;
            w * d * inv_n
        })
        .collect();
    Ok((sum * inv_n, grad))
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Mean over positive anchors of the summed smooth-L1 residuals; gradient
/// is with respect to `pred_offsets` and is zero off the positive set.
pub fn loc_loss(
    pred_offsets: &[OffsetVector],
    target_offsets: &[OffsetVector],
    positives: &[usize],
) -> Result<(f64, Vec<OffsetVector>)> {
    check_shapes(&[target_offsets.len()], &[pred_offsets.len()])?;
    let mut grad = vec![OffsetVector::ZERO; pred_offsets.len()];
    if positives.is_empty() {
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / positives.len() as f64;
    let mut sum = 0.0;
    for &i in positives {
        if i >= pred_offsets.len() {
            return Err(Error::input(format!(
                "positive anchor index {i} out of range for {} anchors",
                pred_offsets.len()
            )));
        }
        let p = pred_offsets[i].to_array();
        let t = target_offsets[i].to_array();
        let mut g = grad[i].to_array();
        for k in 0..4 {
            let r = t[k] - p[k];
            sum += smooth_l1(r);
            g[k] -= smooth_l1_grad(r) * inv_n;
        }
        grad[i] = OffsetVector::from_array(g);
    }
    Ok((sum * inv_n, grad))
}

pub fn total_loss(conf: f64, loc: f64, seg: f64, cfg: &LossConfig) -> f64 {
    conf + cfg.alpha * loc + cfg.beta * seg
}

/// Compares an analytic gradient with central differences.
///
/// `f` returns the loss value and its analytic gradient at a point. The
/// result is the largest `|analytic - numeric| / max(1, |analytic|)` over all
/// coordinates of `point`.
pub fn finite_diff_check<F>(f: F, point: &[f64], epsilon: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = f(point)?;
    if analytic.len() != point.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![point.len()],
            actual: vec![analytic.len()],
        });
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let (plus, _) = f(&x)?;
        x[i] = orig - epsilon;
        let (minus, _) = f(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluation at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max((analytic[i] - numeric).abs() / analytic[i].abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array2};
    use proptest::prelude::*;

    #[test]
    fn seg_loss_examples() {
        let gt = arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        let (v, g) = seg_loss(gt.view(), gt.view()).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));

        let ones = Array2::<f64>::ones((3, 3));
        let zeros = Array2::<f64>::zeros((3, 3));
        assert_eq!(seg_loss(ones.view(), zeros.view()).unwrap().0, 1.0);

        let pred = arr2(&[[0.5, 1.0], [0.5, 0.0]]);
        let gt = arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        let (v, g) = seg_loss(pred.view(), gt.view()).unwrap();
        assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        assert_eq!(g, arr2(&[[0.25, 0.0], [-0.25, 0.0]]));
    }

    #[test]
    fn seg_loss_shape_mismatch() {
        let a = Array2::<f64>::zeros((2, 3));
        let b = Array2::<f64>::zeros((3, 2));
        assert!(matches!(seg_loss(a.view(), b.view()), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn eta_examples() {
        let cfg = LossConfig::default();
        let gt = Array2::<f64>::zeros((100, 100));
        let all_on = Array2::<f64>::ones((100, 100));
        assert_eq!(
            imbalance_weight(gt.view(), all_on.view(), Class::Nucleus, &cfg).unwrap(),
            1.0
        );

        let mut hundred = Array2::<f64>::zeros((100, 100));
        hundred.row_mut(0).fill(0.9);
        assert_abs_diff_eq!(
            imbalance_weight(gt.view(), hundred.view(), Class::Nucleus, &cfg).unwrap(),
            10.0,
            epsilon = 1e-12
        );

        // no predicted foreground: sqrt(10000 / 1) = 100, at the cap
        let none = Array2::<f64>::zeros((100, 100));
        assert_eq!(
            imbalance_weight(gt.view(), none.view(), Class::Nucleus, &cfg).unwrap(),
            100.0
        );
        let tight = LossConfig { eta_cap: 50.0, ..cfg };
        assert_eq!(
            imbalance_weight(gt.view(), none.view(), Class::Nucleus, &tight).unwrap(),
            50.0
        );
    }

    #[test]
    fn conf_loss_examples() {
        let cfg = LossConfig::default();
        let (v, _) = conf_loss(&[1.0 - 1e-7; 5], &[Class::Nucleus; 5], 1.0, &cfg).unwrap();
        assert!(v < 1e-20);

        let (v, _) = conf_loss(&[0.5], &[Class::Nucleus], 1.0, &cfg).unwrap();
        assert_abs_diff_eq!(v, 0.25 * 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.17329, epsilon = 1e-5);

        let ce = LossConfig { gamma: 0.0, ..cfg };
        let p = [0.2, 0.7, 0.9];
        let (v, _) = conf_loss(&p, &[Class::Background; 3], 1.0, &ce).unwrap();
        let expected = p.iter().map(|x: &f64| -x.ln()).sum::<f64>() / 3.0;
        assert_abs_diff_eq!(v, expected, epsilon = 1e-15);

        assert!(conf_loss(&[], &[], 1.0, &cfg).is_err());
    }

    #[test]
    fn conf_loss_class_weights() {
        let cfg = LossConfig::default();
        let p = [0.3, 0.6];
        let t = [Class::Background, Class::Nucleus];
        let w = ClassWeights {
            background: 2.0,
            nucleus: 5.0,
        };
        let (v, _) = conf_loss_weighted(&p, &t, w, &cfg).unwrap();
        let f = |p: f64| (1.0 - p).powi(2) * -p.ln();
        assert_abs_diff_eq!(v, (2.0 * f(0.3) + 5.0 * f(0.6)) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_abs_diff_eq!(smooth_l1(1.0 - 1e-12), 0.5, epsilon = 1e-11);
    }

    #[test]
    fn loc_loss_examples() {
        let o = OffsetVector {
            dx: 0.1,
            dy: -0.2,
            dw: 0.3,
            dh: 0.0,
        };
        let (v, _) = loc_loss(&[o, o], &[o, o], &[0, 1]).unwrap();
        assert_eq!(v, 0.0);

        let shifted = OffsetVector { dw: o.dw + 2.0, ..o };
        let (v, g) = loc_loss(&[o], &[shifted], &[0]).unwrap();
        assert_abs_diff_eq!(v, 1.5, epsilon = 1e-12);
        assert_eq!(g[0].dw, -1.0);

        let (v, g) = loc_loss(&[o], &[shifted], &[]).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g[0], OffsetVector::ZERO);

        assert!(loc_loss(&[o], &[o], &[3]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig::default();
        assert_abs_diff_eq!(total_loss(1.0, 2.0, 3.0, &cfg), 3.3, epsilon = 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &cfg), 0.0);
        let no_seg = LossConfig { beta: 0.0, ..cfg };
        assert_eq!(total_loss(1.0, 2.0, 3.0, &no_seg), total_loss(1.0, 2.0, 99.0, &no_seg));
    }

    #[test]
    fn finite_diff_quadratic_is_exact() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let v = x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum();
            let g = x.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
            Ok((v, g))
        };
        let err = finite_diff_check(f, &[0.3, -1.7, 2.5, 10.0], 1e-3).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn finite_diff_reports_non_finite() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((x[0].ln(), vec![1.0 / x[0]])) };
        assert!(finite_diff_check(f, &[0.0], 1e-3).is_err());
    }

    proptest! {
        #[test]
        fn conf_loss_decreasing_in_target_prob(a in 0.01..0.98f64, d in 0.001..0.01f64, gamma in 0.0..4.0f64) {
            let cfg = LossConfig { gamma, ..LossConfig::default() };
            let lo = conf_loss(&[a], &[Class::Nucleus], 1.0, &cfg).unwrap().0;
            let hi = conf_loss(&[a + d], &[Class::Nucleus], 1.0, &cfg).unwrap().0;
            prop_assert!(hi < lo);
        }

        #[test]
        fn conf_loss_linear_in_eta(p in proptest::collection::vec(0.01..0.99f64, 1..20), k in 0.1..50.0f64) {
            let cfg = LossConfig::default();
            let t = vec![Class::Nucleus; p.len()];
            let base = conf_loss(&p, &t, 1.0, &cfg).unwrap().0;
            let scaled = conf_loss(&p, &t, k, &cfg).unwrap().0;
            prop_assert!((scaled - k * base).abs() <= 1e-12 * scaled.abs().max(1.0));
            prop_assert!(base >= 0.0);
        }

        #[test]
        fn total_loss_linear(c in 0.0..10.0f64, l in 0.0..10.0f64, s in 0.0..10.0f64,
                             alpha in 0.0..3.0f64, beta in 0.0..3.0f64) {
            let cfg = LossConfig { alpha, beta, ..LossConfig::default() };
            let t = total_loss(c, l, s, &cfg);
            prop_assert!((t - (c + alpha * l + beta * s)).abs() < 1e-12);
            prop_assert!((total_loss(c, l, s + 1.0, &cfg) - t - beta).abs() < 1e-9);
        }

        #[test]
        fn smooth_l1_continuous(x in -3.0..3.0f64) {
            let h = 1e-9;
            prop_assert!((smooth_l1(x + h) - smooth_l1(x)).abs() < 1e-8);
            prop_assert!(smooth_l1(x) >= 0.0);
        }
    }
}
