//! Training losses over a decoder trace and its label assignment.
//!
//! Classification uses a quality focal term against soft targets `d * liou+`;
//! regression combines a LIOU term with smooth-L1 penalties on the anchor
//! parameters. Totals are a weighted sum of classification, regression and an
//! externally supplied segmentation auxiliary.

use serde::{Deserialize, Serialize};

use crate::assignment::LayerAssignment;
use crate::decoder::LayerTrace;
use crate::error::{Error, Result};
use crate::geometry::GroundTruthLane;

/// Loss weights and focal/smooth-L1 shape parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    pub lambda_seg: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 2.0,
            lambda_iou: 2.0,
            lambda_l1: 0.3,
            lambda_seg: 1.0,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0,
        }
    }
}

/// Quality focal term `-|q - p|^gamma (q ln p + (1-q) ln(1-p))`.
///
/// `q` is a soft target in [0, 1]. When `p == q` the term is exactly zero
/// (its limit), which also extends the domain to the boundary targets 0 and 1;
/// otherwise `p` must lie strictly inside (0, 1).
pub fn focal_term(p: f64, q: f64, gamma: f64) -> Result<f64> {
    if !q.is_finite() || !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("focal target must be in [0, 1], got {q}")));
    }
    if !p.is_finite() {
        return Err(Error::Domain(format!("focal probability must be finite, got {p}")));
    }
    if p == q {
        return Ok(0.0);
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "focal probability must be in (0, 1) unless it equals the target, got {p}"
        )));
    }
    let scale = (q - p).abs().powf(gamma);
    Ok(-scale * (q * p.ln() + (1.0 - q) * (1.0 - p).ln()))
}

/// Analytic d/dp of [`focal_term`] at fixed target `q`.
pub fn focal_term_derivative(p: f64, q: f64, gamma: f64) -> Result<f64> {
    if !q.is_finite() || !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("focal target must be in [0, 1], got {q}")));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "focal derivative needs probability in (0, 1), got {p}"
        )));
    }
    if p == q {
        // |q-p|^(gamma-1) and |q-p|^gamma both vanish for gamma > 1.
        return Ok(0.0);
    }
    let a = (q - p).abs();
    let ce = q * p.ln() + (1.0 - q) * (1.0 - p).ln();
    let sign = (p - q).signum();
    Ok(-(gamma * sign * a.powf(gamma - 1.0) * ce + a.powf(gamma) * (q / p - (1.0 - q) / (1.0 - p))))
}

/// Smooth L1: quadratic `d^2 / (2 beta)` inside `|d| < beta`, linear
/// `|d| - beta/2` outside.
pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    assert!(beta > 0.0, "smooth_l1 beta must be positive");
    let a = d.abs();
    if a < beta {
        d * d / (2.0 * beta)
    } else {
        a - beta / 2.0
    }
}

/// Per-layer loss entries of a full loss evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLossEntry {
    pub layer: usize,
    pub cls: f64,
    pub reg: f64,
}

/// Full loss breakdown: per-layer sums plus the weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub seg: f64,
    pub total: f64,
    pub per_layer: Vec<LayerLossEntry>,
}

/// Classification loss per layer and in total.
///
/// Positives contribute `FL(p, d * clamp(liou, 0, 1))`, negatives `FL(p, 0)`,
/// using each layer's own scores.
pub fn classification_loss(
    assignments: &[LayerAssignment],
    traces: &[LayerTrace],
    w: &LossWeights,
) -> Result<(f64, Vec<f64>)> {
    if assignments.len() != traces.len() {
        return Err(Error::shape("assignment layers", traces.len(), assignments.len()));
    }
    let mut per_layer = Vec::with_capacity(traces.len());
    let mut total = 0.0;
    for (assign, trace) in assignments.iter().zip(traces) {
        let preds = &trace.predictions;
        let mut layer_sum = 0.0;
        for rec in &assign.positives {
            let p = preds
                .get(rec.anchor)
                .ok_or_else(|| Error::Domain(format!("positive anchor {} out of range", rec.anchor)))?;
            let target = rec.d * rec.liou.clamp(0.0, 1.0);
            layer_sum += focal_term(p.score, target, w.focal_gamma)?;
        }
        for &a in &assign.negatives {
            let p = preds
                .get(a)
                .ok_or_else(|| Error::Domain(format!("negative anchor {a} out of range")))?;
            layer_sum += focal_term(p.score, 0.0, w.focal_gamma)?;
        }
        per_layer.push(layer_sum);
        total += layer_sum;
    }
    Ok((total, per_layer))
}

/// Regression loss per layer and in total, over positive records only.
///
/// Each positive contributes `lambda_iou * (1 - liou)` plus `lambda_l1` times
/// smooth-L1 penalties on the start point, angle and length differences in
/// their stored units (normalized coordinates and radians).
pub fn regression_loss(
    assignments: &[LayerAssignment],
    traces: &[LayerTrace],
    gts: &[GroundTruthLane],
    w: &LossWeights,
) -> Result<(f64, Vec<f64>)> {
    if assignments.len() != traces.len() {
        return Err(Error::shape("assignment layers", traces.len(), assignments.len()));
    }
    let mut per_layer = Vec::with_capacity(traces.len());
    let mut total = 0.0;
    for (assign, trace) in assignments.iter().zip(traces) {
        let preds = &trace.predictions;
        let mut layer_sum = 0.0;
        for rec in &assign.positives {
            let p = preds
                .get(rec.anchor)
                .ok_or_else(|| Error::Domain(format!("positive anchor {} out of range", rec.anchor)))?;
            let gt = gts
                .get(rec.gt)
                .ok_or_else(|| Error::Domain(format!("ground truth {} out of range", rec.gt)))?;
            let b = w.smooth_l1_beta;
            let l1 = smooth_l1(p.start_x - gt.start_x, b)
                + smooth_l1(p.start_y - gt.start_y, b)
                + smooth_l1(p.theta - gt.theta, b)
                + smooth_l1(p.length - gt.length, b);
            layer_sum += w.lambda_iou * (1.0 - rec.liou) + w.lambda_l1 * l1;
        }
        per_layer.push(layer_sum);
        total += layer_sum;
    }
    Ok((total, per_layer))
}

/// Weighted total `lambda_cls * cls + reg + lambda_seg * seg`. The components
/// must be finite and non-negative.
pub fn total_loss(cls: f64, reg: f64, seg: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("classification", cls), ("regression", reg), ("segmentation", seg)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Domain(format!(
                "{name} loss must be finite and non-negative, got {v}"
            )));
        }
    }
    Ok(w.lambda_cls * cls + reg + w.lambda_seg * seg)
}

/// Classification + regression over all layers, combined with the given
/// segmentation auxiliary into a weighted total.
pub fn compute_losses(
    assignments: &[LayerAssignment],
    traces: &[LayerTrace],
    gts: &[GroundTruthLane],
    w: &LossWeights,
    seg: f64,
) -> Result<LossBreakdown> {
    let (cls, cls_layers) = classification_loss(assignments, traces, w)?;
    let (reg, reg_layers) = regression_loss(assignments, traces, gts, w)?;
    let total = total_loss(cls, reg, seg, w)?;
    let per_layer = assignments
        .iter()
        .zip(cls_layers.iter().zip(&reg_layers))
        .map(|(a, (&c, &r))| LayerLossEntry {
            layer: a.layer,
            cls: c,
            reg: r,
        })
        .collect();
    Ok(LossBreakdown {
        cls,
        reg,
        seg,
        total,
        per_layer,
    })
}
