//! LIOU-based detection metrics.
//!
//! Predictions below the score threshold are discarded; the survivors are
//! matched one-to-one against ground truths by maximizing total LIOU (via
//! minimum-cost assignment on negated LIOUs), counting a true positive only
//! when the matched pair clears the LIOU threshold.

use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::error::{Error, Result};
use crate::geometry::{line_iou, GeometryConfig, LanePolyline};

/// Matching thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Minimum LIOU for a prediction/gt pair to count as a hit.
    pub liou_threshold: f64,
    /// Predictions scoring below this are dropped before matching
    /// (equality keeps the prediction).
    pub score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            liou_threshold: 0.5,
            score_threshold: 0.5,
        }
    }
}

/// True/false positive and false negative counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl EvalCounts {
    pub fn precision(&self) -> f64 {
        let denom = self.tp + self.fp;
        if denom == 0 {
            0.0
        } else {
            self.tp as f64 / denom as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let denom = self.tp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            self.tp as f64 / denom as f64
        }
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.precision(), self.recall())
    }

    pub fn add(&mut self, other: &EvalCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// `2 P R / (P + R)`, zero when the denominator vanishes.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    let denom = precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / denom
    }
}

/// A scored lane polyline as produced by a detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLane {
    pub score: f64,
    pub polyline: LanePolyline,
}

/// Evaluate one image: threshold, match, count.
///
/// Matching maximizes total LIOU over one-to-one pairings; pairs at or below
/// the LIOU threshold enter the assignment at neutral cost so choosing them is
/// never better than leaving both sides unmatched.
pub fn match_image(
    preds: &[ScoredLane],
    gts: &[LanePolyline],
    cfg: &EvalConfig,
    geo: &GeometryConfig,
) -> Result<EvalCounts> {
    for p in preds {
        if !p.score.is_finite() || !(0.0..=1.0).contains(&p.score) {
            return Err(Error::Domain(format!("prediction score must be in [0, 1], got {}", p.score)));
        }
    }
    let kept: Vec<&ScoredLane> = preds.iter().filter(|p| p.score >= cfg.score_threshold).collect();
    if kept.is_empty() || gts.is_empty() {
        return Ok(EvalCounts {
            tp: 0,
            fp: kept.len() as u64,
            fn_: gts.len() as u64,
        });
    }

    let mut cost = vec![vec![0.0f64; gts.len()]; kept.len()];
    for (i, p) in kept.iter().enumerate() {
        for (j, gt) in gts.iter().enumerate() {
            let liou = match line_iou(&p.polyline, gt, geo) {
                Ok(v) => v,
                Err(Error::NoCommonRows) => continue,
                Err(e) => return Err(e),
            };
            if liou > cfg.liou_threshold {
                cost[i][j] = -liou;
            }
        }
    }
    let matched = hungarian(&cost)?;
    let tp = matched.pairs.iter().filter(|&&(i, j)| cost[i][j] < 0.0).count() as u64;
    Ok(EvalCounts {
        tp,
        fp: kept.len() as u64 - tp,
        fn_: gts.len() as u64 - tp,
    })
}

/// Micro-average: sum counts over images, then derive precision/recall/F1.
pub fn aggregate(counts: &[EvalCounts]) -> EvalCounts {
    let mut total = EvalCounts::default();
    for c in counts {
        total.add(c);
    }
    total
}
