//! Focal classification loss, smooth-L1 box regression, and their gated sum
//! over a population of labeled anchors.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{AnchorLabel, Deltas};
use crate::error::{Error, Result};
use crate::tensor::tape::sigmoid;
use crate::tensor::{Tape, Tensor, Var};

/// Probabilities are clamped to `[EPS, 1 − EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Values per anchor in the head output: probability then `(dx, dy, dz, dr)`.
pub const VALUES_PER_ANCHOR: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 0.5, gamma: 2.0 }
    }
}

impl FocalParams {
    /// Plain binary cross-entropy.
    pub fn cross_entropy() -> Self {
        FocalParams { alpha: 1.0, gamma: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0 && self.gamma >= 0.0) {
            return Err(Error::Config(format!("focal alpha must be in (0, 1] and gamma >= 0, got {self:?}")));
        }
        Ok(())
    }
}

fn check_label(y: u8) -> Result<()> {
    if y > 1 {
        return Err(Error::Invalid(format!("label must be 0 or 1, got {y}")));
    }
    Ok(())
}

/// `−α (1 − p_t)^γ ln p_t` with `p_t = p` for `y = 1` and `1 − p` otherwise.
pub fn focal_loss(p: f64, y: u8, params: &FocalParams) -> Result<f64> {
    check_label(y)?;
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pt = if y == 1 { p } else { 1.0 - p };
    Ok(-params.alpha * (1.0 - pt).powf(params.gamma) * pt.ln())
}

/// Focal loss of `sigmoid(logit)` and its derivative with respect to the logit.
///
/// The derivative is the analytic one evaluated at the clamped probability.
pub fn focal_loss_logit(logit: f64, y: u8, params: &FocalParams) -> Result<(f64, f64)> {
    check_label(y)?;
    // q from the mirrored logit avoids cancellation in 1 − p
    let p = sigmoid(logit).clamp(PROB_EPS, 1.0 - PROB_EPS);
    let q = sigmoid(-logit).clamp(PROB_EPS, 1.0 - PROB_EPS);
    let (a, g) = (params.alpha, params.gamma);
    if y == 1 {
        let value = -a * q.powf(g) * p.ln();
        let grad = a * q.powf(g) * (g * p * p.ln() - q);
        Ok((value, grad))
    } else {
        let value = -a * p.powf(g) * q.ln();
        let grad = a * p.powf(g) * (p - g * q * q.ln());
        Ok((value, grad))
    }
}

/// `0.5x²` for `|x| < 1`, `|x| − 0.5` otherwise.
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

/// Smooth-L1 summed over the four components of `pred − target`.
pub fn regression_loss(pred: &Deltas, target: &Deltas) -> f64 {
    pred.iter().zip(target).map(|(p, t)| smooth_l1(p - t)).sum()
}

/// Per-step loss summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_reg: f64,
    pub total: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_ignored: usize,
}

/// Combines per-anchor terms: classification averaged over positives and
/// negatives, regression averaged over positives (zero without positives),
/// ignored anchors contributing to neither.
pub fn total_loss(cls_terms: &[f64], reg_terms: &[f64], labels: &[AnchorLabel]) -> Result<LossBreakdown> {
    if labels.is_empty() {
        return Err(Error::Invalid("loss over an empty anchor set".into()));
    }
    assert_eq!(cls_terms.len(), labels.len());
    assert_eq!(reg_terms.len(), labels.len());
    let (mut cls, mut reg) = (0.0, 0.0);
    let (mut n_pos, mut n_neg, mut n_ignored) = (0, 0, 0);
    for ((c, r), l) in cls_terms.iter().zip(reg_terms).zip(labels) {
        match l {
            AnchorLabel::Positive(_) => {
                n_pos += 1;
                cls += c;
                reg += r;
            }
            AnchorLabel::Negative => {
                n_neg += 1;
                cls += c;
            }
            AnchorLabel::Ignored => n_ignored += 1,
        }
    }
    let l_cls = if n_pos + n_neg > 0 { cls / (n_pos + n_neg) as f64 } else { 0.0 };
    let l_reg = if n_pos > 0 { reg / n_pos as f64 } else { 0.0 };
    Ok(LossBreakdown { l_cls, l_reg, total: l_cls + l_reg, n_pos, n_neg, n_ignored })
}

/// Label and regression target for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTarget {
    pub label: AnchorLabel,
    pub deltas: Deltas,
}

/// How the classification term is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClsNormalization {
    /// Mean over all contributing (positive + negative) anchors.
    #[default]
    MeanAnchors,
    /// Sum divided by the number of positives (at least one).
    PerPositive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossConfig {
    pub focal: FocalParams,
    /// Caps negatives at `ratio × max(n_pos, 1)` by random sampling.
    pub neg_pos_ratio: Option<usize>,
    pub cls_normalization: ClsNormalization,
}

/// Detection loss over a head output `[N, A·5, gz, gy, gx]` of raw values
/// (classification logits and regression deltas). `targets` lists every
/// anchor of every sample in the order sample, z, y, x, slot.
///
/// Returns the scalar loss on the tape and its breakdown.
pub fn detection_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    head: Var,
    targets: &[AnchorTarget],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<(Var, LossBreakdown)> {
    cfg.focal.validate()?;
    let out = tape.value(head);
    let shape = out.shape().to_vec();
    if shape.len() != 5 || !shape[1].is_multiple_of(VALUES_PER_ANCHOR) {
        return Err(Error::shape(format!("head output {shape:?} is not [N, A*5, D, H, W]")));
    }
    let (n, a) = (shape[0], shape[1] / VALUES_PER_ANCHOR);
    let cells: usize = shape[2..].iter().product();
    if targets.len() != n * cells * a {
        return Err(Error::shape(format!(
            "{} anchor targets for a head with {} anchors",
            targets.len(),
            n * cells * a
        )));
    }
    let data = out.data();
    let index = |anchor: usize, k: usize| {
        let (s, rest) = (anchor / (cells * a), anchor % (cells * a));
        let (cell, slot) = (rest / a, rest % a);
        (s * a * VALUES_PER_ANCHOR + slot * VALUES_PER_ANCHOR + k) * cells + cell
    };

    let mut labels: Vec<AnchorLabel> = targets.iter().map(|t| t.label).collect();
    if let Some(ratio) = cfg.neg_pos_ratio {
        let n_pos = labels.iter().filter(|l| matches!(l, AnchorLabel::Positive(_))).count();
        let negs: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
        let cap = ratio * n_pos.max(1);
        if negs.len() > cap {
            let mut keep = vec![false; negs.len()];
            for i in sample(rng, negs.len(), cap) {
                keep[i] = true;
            }
            for (i, &k) in negs.iter().zip(&keep) {
                if !k {
                    labels[*i] = AnchorLabel::Ignored;
                }
            }
        }
    }

    let mut cls_terms = vec![0.0; labels.len()];
    let mut reg_terms = vec![0.0; labels.len()];
    let mut cls_grads = vec![0.0; labels.len()];
    let mut reg_grads = vec![[0.0; 4]; labels.len()];
    for (i, (label, t)) in labels.iter().zip(targets).enumerate() {
        let y = match label {
            AnchorLabel::Positive(_) => 1,
            AnchorLabel::Negative => 0,
            AnchorLabel::Ignored => continue,
        };
        let (v, g) = focal_loss_logit(data[index(i, 0)], y, &cfg.focal)?;
        cls_terms[i] = v;
        cls_grads[i] = g;
        if y == 1 {
            for k in 0..4 {
                let diff = data[index(i, k + 1)] - t.deltas[k];
                reg_terms[i] += smooth_l1(diff);
                reg_grads[i][k] = smooth_l1_grad(diff);
            }
        }
    }
    let mut bd = total_loss(&cls_terms, &reg_terms, &labels)?;
    let cls_div = match cfg.cls_normalization {
        ClsNormalization::MeanAnchors => (bd.n_pos + bd.n_neg).max(1) as f64,
        ClsNormalization::PerPositive => bd.n_pos.max(1) as f64,
    };
    if cfg.cls_normalization == ClsNormalization::PerPositive {
        bd.l_cls = cls_terms.iter().sum::<f64>() / cls_div;
        bd.total = bd.l_cls + bd.l_reg;
    }
    let reg_div = bd.n_pos.max(1) as f64;
    let mut grad = Tensor::zeros(&shape);
    let gd = grad.data_mut();
    for i in 0..labels.len() {
        if labels[i] == AnchorLabel::Ignored {
            continue;
        }
        gd[index(i, 0)] = cls_grads[i] / cls_div;
        if matches!(labels[i], AnchorLabel::Positive(_)) {
            for k in 0..4 {
                gd[index(i, k + 1)] = reg_grads[i][k] / reg_div;
            }
        }
    }
    if !bd.total.is_finite() {
        return Err(Error::NonFinite { op: "detection_loss" });
    }
    let v = tape.scalar_fn(head, bd.total, grad)?;
    Ok((v, bd))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce(p: f64, y: u8) -> f64 {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        if y == 1 {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        }
    }

    #[test]
    fn focal_examples() {
        let f = focal_loss(0.9, 1, &FocalParams::default()).unwrap();
        assert!((f - 0.5 * 0.01 * -(0.9f64.ln())).abs() < 1e-18);
        assert!((f - 5.268e-4).abs() < 1e-7);
        assert!(focal_loss(1.0 - 1e-12, 1, &FocalParams::default()).unwrap() < 1e-15);
        let ce = focal_loss(0.5, 1, &FocalParams::cross_entropy()).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(focal_loss(0.5, 2, &FocalParams::default()).is_err());
    }

    #[test]
    fn focal_bounded_by_scaled_cross_entropy() {
        let fp = FocalParams::default();
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            for y in 0..2 {
                assert!(focal_loss(p, y, &fp).unwrap() <= fp.alpha * ce(p, y) + 1e-15);
            }
        }
    }

    #[test]
    fn focal_downweighting_ratio() {
        let fp = FocalParams::default();
        let ratio = focal_loss(0.9, 1, &fp).unwrap() / focal_loss(0.5, 1, &fp).unwrap();
        let want = (0.1f64 / 0.5).powi(2) * (0.9f64.ln() / 0.5f64.ln());
        assert!((ratio - want).abs() < 1e-12 * want);
    }

    #[test]
    fn logit_form_agrees_with_probability_form() {
        let fp = FocalParams { alpha: 0.25, gamma: 1.5 };
        for i in -40..=40 {
            let z = i as f64 * 0.3;
            for y in 0..2 {
                let (v, g) = focal_loss_logit(z, y, &fp).unwrap();
                assert!((v - focal_loss(sigmoid(z), y, &fp).unwrap()).abs() < 1e-12 * v.max(1e-3));
                let h = 1e-5;
                let fd = (focal_loss_logit(z + h, y, &fp).unwrap().0 - focal_loss_logit(z - h, y, &fp).unwrap().0) / (2.0 * h);
                assert!((g - fd).abs() <= 1e-8 * g.abs().max(1e-3), "z={z} y={y}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        // continuous with matching slope at |x| = 1
        assert!((smooth_l1(1.0 - 1e-12) - smooth_l1(1.0)).abs() < 1e-11);
        assert_eq!(smooth_l1_grad(1.0), 1.0);
    }

    #[test]
    fn regression_examples() {
        let t = [0.3, -0.2, 0.1, 0.7];
        assert_eq!(regression_loss(&t, &t), 0.0);
        assert_eq!(regression_loss(&[0.5, 0.0, 0.0, 0.0], &[0.0; 4]), 0.125);
        assert_eq!(regression_loss(&[2.0, 0.0, 0.0, 2.0], &[0.0; 4]), 3.0);
    }

    #[test]
    fn total_loss_examples() {
        let neg = [AnchorLabel::Negative; 3];
        let b = total_loss(&[0.1, 0.2, 0.3], &[5.0, 5.0, 5.0], &neg).unwrap();
        assert_eq!(b.l_reg, 0.0);
        assert_eq!(b.total, b.l_cls);

        let b = total_loss(&[0.01], &[0.0], &[AnchorLabel::Positive(0)]).unwrap();
        assert_eq!(b.total, b.l_cls);

        let b = total_loss(&[0.01], &[0.125], &[AnchorLabel::Positive(0)]).unwrap();
        assert!((b.total - 0.135).abs() < 1e-15);

        let labels = [AnchorLabel::Positive(0), AnchorLabel::Ignored, AnchorLabel::Negative];
        let b = total_loss(&[1.0, 100.0, 3.0], &[0.5, 100.0, 100.0], &labels).unwrap();
        assert_eq!((b.n_pos, b.n_neg, b.n_ignored), (1, 1, 1));
        assert_eq!((b.l_cls, b.l_reg), (2.0, 0.5));

        assert!(total_loss(&[], &[], &[]).is_err());
    }
}
