//! One-to-several label assignment.
//!
//! The last decoder layer's predictions are scored against every ground-truth
//! lane with a cost that blends geometric similarity and a focal
//! classification term. A SimOTA-style dynamic k picks how many anchors each
//! lane receives; conflicts go to the cheapest claimant and losers back-fill
//! from their next-best unclaimed candidates. Hungarian matching restricted to
//! those positives then selects the single fully positive anchor per lane; all
//! earlier layers share the positive sets with layer-wise soft labels that
//! decay toward the last layer's one-to-one assignment.

use serde::{Deserialize, Serialize};

use crate::decoder::{LayerTrace, Prediction};
use crate::error::{Error, Result};
use crate::geometry::{anchor_to_polyline, cost_components, line_iou, GeometryConfig, GroundTruthLane};

/// Cost and dynamic-k parameters of the one-to-many stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtaConfig {
    /// Weight of the squared similarity product.
    pub w_sim: f64,
    /// Weight of the focal classification cost.
    pub w_cls: f64,
    /// Minimum positives per ground truth (capacity permitting).
    pub t_min: usize,
    /// How many of the largest LIOUs feed the dynamic-k sum.
    pub top_q: usize,
    /// Hard cap on positives per ground truth.
    pub k_max: usize,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for OtaConfig {
    fn default() -> Self {
        OtaConfig {
            w_sim: 3.0,
            w_cls: 1.0,
            t_min: 2,
            top_q: 4,
            k_max: 8,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

/// Cost assigned to prediction/gt pairs that share no valid rows.
pub const SENTINEL_COST: f64 = 1e6;
/// LIOU recorded for pairs that share no valid rows: the infimum of the LIOU
/// range, i.e. the limit of two lanes drifting infinitely far apart.
pub const NO_OVERLAP_LIOU: f64 = -1.0;
/// Cost barring Hungarian from pairing an anchor with a gt it is not positive for.
const FORBIDDEN_COST: f64 = 1e9;

/// Focal classification cost of predicting foreground with probability `p`:
/// `alpha (1-p)^gamma (-ln p) - (1-alpha) p^gamma (-ln(1-p))`. Confident
/// foreground predictions drive it strongly negative; `p` is clamped away from
/// the boundaries so the result is always finite.
pub fn focal_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    alpha * (1.0 - p).powf(gamma) * -p.ln() - (1.0 - alpha) * p.powf(gamma) * -(1.0 - p).ln()
}

/// Assignment cost of one prediction/gt pair given its similarity components.
pub fn pair_cost(dis: f64, xy: f64, theta: f64, score: f64, cfg: &OtaConfig) -> f64 {
    let sim = dis * xy * theta;
    cfg.w_sim * sim * sim + cfg.w_cls * focal_cost(score, cfg.focal_alpha, cfg.focal_gamma)
}

/// Anchors x gts cost matrix over the given predictions. Pairs without common
/// valid rows (or with degenerate predicted angles) get [`SENTINEL_COST`].
pub fn ota_cost_matrix(
    preds: &[Prediction],
    gts: &[GroundTruthLane],
    cfg: &OtaConfig,
    geo: &GeometryConfig,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(preds.len());
    for p in preds {
        let anchor = p.geometry();
        let mut row = Vec::with_capacity(gts.len());
        for gt in gts {
            let cost = match cost_components(&anchor, gt, geo) {
                Ok(c) => pair_cost(c.dis, c.xy, c.theta, p.score, cfg),
                Err(Error::NoCommonRows) | Err(Error::DegenerateAngle { .. }) => SENTINEL_COST,
                Err(e) => return Err(e),
            };
            row.push(cost);
        }
        out.push(row);
    }
    Ok(out)
}

/// Anchors x gts LIOU matrix. Pairs without common valid rows (or with
/// degenerate predicted angles) get [`NO_OVERLAP_LIOU`].
pub fn liou_matrix(
    preds: &[Prediction],
    gts: &[GroundTruthLane],
    geo: &GeometryConfig,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(preds.len());
    for p in preds {
        let poly = match anchor_to_polyline(&p.geometry(), geo) {
            Ok(poly) => Some(poly),
            Err(Error::DegenerateAngle { .. }) => None,
            Err(e) => return Err(e),
        };
        let mut row = Vec::with_capacity(gts.len());
        for gt in gts {
            let liou = match &poly {
                Some(poly) => match line_iou(poly, &gt.polyline, geo) {
                    Ok(v) => v,
                    Err(Error::NoCommonRows) => NO_OVERLAP_LIOU,
                    Err(e) => return Err(e),
                },
                None => NO_OVERLAP_LIOU,
            };
            row.push(liou);
        }
        out.push(row);
    }
    Ok(out)
}

/// Dynamic positive count for one ground truth from its LIOU column: the floor
/// of the sum of the `top_q` largest LIOUs (clamped to [0, 1]), raised to
/// `t_min`, then capped by `k_max` and the column length.
pub fn dynamic_k(lious: &[f64], cfg: &OtaConfig) -> usize {
    if lious.is_empty() {
        return 0;
    }
    let mut clamped: Vec<f64> = lious.iter().map(|l| l.clamp(0.0, 1.0)).collect();
    clamped.sort_by(|a, b| b.total_cmp(a));
    let q = cfg.top_q.min(clamped.len());
    let sum: f64 = clamped[..q].iter().sum();
    let k = (sum.floor() as usize).max(cfg.t_min);
    k.min(cfg.k_max).min(lious.len())
}

/// One-to-many assignment: per ground truth, its dynamic-k lowest-cost anchors
/// with cost-based conflict resolution. Returns one ascending anchor list per
/// gt; no anchor appears in two lists.
pub fn ota_assign(cost: &[Vec<f64>], liou: &[Vec<f64>], cfg: &OtaConfig) -> Result<Vec<Vec<usize>>> {
    let a = cost.len();
    if a == 0 {
        return Err(Error::Domain("ota_assign needs at least one anchor".into()));
    }
    let g = cost[0].len();
    if liou.len() != a {
        return Err(Error::shape("liou matrix rows", a, liou.len()));
    }
    for (row_c, row_l) in cost.iter().zip(liou) {
        if row_c.len() != g || row_l.len() != g {
            return Err(Error::shape("matrix columns", g, format!("{}/{}", row_c.len(), row_l.len())));
        }
        if row_c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("cost matrix entries must be finite".into()));
        }
    }
    if g == 0 {
        return Ok(Vec::new());
    }

    // Candidate order per gt: ascending cost, ties to the lower anchor index.
    let orders: Vec<Vec<usize>> = (0..g)
        .map(|j| {
            let mut idx: Vec<usize> = (0..a).collect();
            idx.sort_by(|&x, &y| cost[x][j].total_cmp(&cost[y][j]).then(x.cmp(&y)));
            idx
        })
        .collect();
    let ks: Vec<usize> = (0..g)
        .map(|j| {
            let col: Vec<f64> = (0..a).map(|i| liou[i][j]).collect();
            dynamic_k(&col, cfg)
        })
        .collect();

    let mut member = vec![vec![false; a]; g];
    let mut sets: Vec<Vec<usize>> = vec![Vec::new(); g];
    let mut cursor = vec![0usize; g];
    let mut claims = vec![0usize; a];

    // Initial claims: every gt takes its k cheapest anchors outright; overlaps
    // are settled below.
    for j in 0..g {
        while sets[j].len() < ks[j] && cursor[j] < a {
            let anchor = orders[j][cursor[j]];
            cursor[j] += 1;
            sets[j].push(anchor);
            member[j][anchor] = true;
            claims[anchor] += 1;
        }
    }

    loop {
        // An anchor claimed by several gts stays with the cheapest claimant
        // (ties to the lower gt index); the winner keeps it for good because
        // back-fills only ever touch unclaimed anchors.
        let mut resolved = false;
        for anchor in 0..a {
            if claims[anchor] <= 1 {
                continue;
            }
            let mut winner = usize::MAX;
            for j in 0..g {
                if member[j][anchor] && (winner == usize::MAX || cost[anchor][j] < cost[anchor][winner]) {
                    winner = j;
                }
            }
            for j in 0..g {
                if j != winner && member[j][anchor] {
                    member[j][anchor] = false;
                    sets[j].retain(|&x| x != anchor);
                    claims[anchor] -= 1;
                    resolved = true;
                }
            }
        }

        // Losers back-fill from their next-cheapest candidates that nobody
        // held at the start of this pass; simultaneous back-fills may collide
        // and are settled by the next resolution pass.
        let snapshot = claims.clone();
        let mut refilled = false;
        for j in 0..g {
            while sets[j].len() < ks[j] && cursor[j] < a {
                let anchor = orders[j][cursor[j]];
                cursor[j] += 1;
                if snapshot[anchor] > 0 {
                    continue;
                }
                sets[j].push(anchor);
                member[j][anchor] = true;
                claims[anchor] += 1;
                refilled = true;
            }
        }
        if !resolved && !refilled {
            break;
        }
    }

    for s in sets.iter_mut() {
        s.sort_unstable();
    }
    Ok(sets)
}

/// Minimum-cost one-to-one matching of size `min(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HungarianResult {
    /// (row, col) pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    /// Total cost, accumulated in ascending row order.
    pub total: f64,
}

/// Hungarian assignment with deterministic tie-breaking: among all minimum
/// cost matchings, the one whose column choices are lexicographically smallest
/// in row order is returned (column order when rows outnumber columns).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<HungarianResult> {
    let n = cost.len();
    if n == 0 {
        return Err(Error::Domain("hungarian needs a non-empty matrix".into()));
    }
    let m = cost[0].len();
    if m == 0 {
        return Err(Error::Domain("hungarian needs at least one column".into()));
    }
    for row in cost {
        if row.len() != m {
            return Err(Error::shape("cost matrix columns", m, row.len()));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("hungarian entries must be finite".into()));
        }
    }
    if n <= m {
        let (pairs, total) = lex_solve(cost);
        Ok(HungarianResult { pairs, total })
    } else {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let (tp, _) = lex_solve(&t);
        let mut pairs: Vec<(usize, usize)> = tp.into_iter().map(|(r, c)| (c, r)).collect();
        pairs.sort_unstable();
        let total = mapping_total(cost, &pairs);
        Ok(HungarianResult { pairs, total })
    }
}

/// Sum of the mapped entries in ascending row order; the canonical
/// accumulation used for all optimality comparisons.
fn mapping_total(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    let mut total = 0.0;
    for &(r, c) in pairs {
        total += cost[r][c];
    }
    total
}

/// Shortest-augmenting-path Hungarian core for `rows <= cols`; returns the
/// matched column per row.
fn solve_rows_le_cols(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost[0].len();
    debug_assert!(n <= m);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut matched = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if matched[j] != 0 {
            row_to_col[matched[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Optimal matching refined to the lexicographically smallest column vector:
/// rows are fixed in order, each to the smallest column that still admits an
/// optimal completion.
fn lex_solve(cost: &[Vec<f64>]) -> (Vec<(usize, usize)>, f64) {
    let n = cost.len();
    let m = cost[0].len();
    let base = solve_rows_le_cols(cost);
    let base_pairs: Vec<(usize, usize)> = base.iter().enumerate().map(|(r, &c)| (r, c)).collect();
    let mut best_total = mapping_total(cost, &base_pairs);

    let mut fixed_cols: Vec<usize> = Vec::with_capacity(n);
    for r in 0..n {
        let mut best: Option<(f64, usize)> = None;
        for c in 0..m {
            if fixed_cols.contains(&c) {
                continue;
            }
            let rem_cols: Vec<usize> = (0..m).filter(|j| !fixed_cols.contains(j) && *j != c).collect();
            let completion: Vec<usize> = if r + 1 < n {
                let sub: Vec<Vec<f64>> = (r + 1..n)
                    .map(|rr| rem_cols.iter().map(|&cc| cost[rr][cc]).collect())
                    .collect();
                solve_rows_le_cols(&sub)
            } else {
                Vec::new()
            };
            let mut cols = fixed_cols.clone();
            cols.push(c);
            cols.extend(completion.iter().map(|&ci| rem_cols[ci]));
            let pairs: Vec<(usize, usize)> = cols.iter().copied().enumerate().collect();
            let total = mapping_total(cost, &pairs);
            if total == best_total {
                best = Some((total, c));
                break;
            }
            match best {
                Some((bt, _)) if total >= bt => {}
                _ => best = Some((total, c)),
            }
        }
        let (t, c) = best.expect("hungarian refinement always has a candidate column");
        fixed_cols.push(c);
        best_total = t;
    }
    let pairs: Vec<(usize, usize)> = fixed_cols.into_iter().enumerate().collect();
    (pairs, best_total)
}

/// Soft labels for one decoder layer `1 <= layer < num_layers`.
///
/// Fully positive anchors get 1; the rest get
/// `(N - r)/(N - 1) * score_j / max_{i in S} score_i` using this layer's
/// scores over the shared positive set `s` (anchor indices into `preds`).
pub fn layer_soft_labels(
    layer: usize,
    num_layers: usize,
    preds: &[Prediction],
    s: &[usize],
    fully: &[bool],
) -> Result<Vec<f64>> {
    if !(1..num_layers).contains(&layer) {
        return Err(Error::Domain(format!(
            "soft labels are defined for layers 1..{} (got {layer})",
            num_layers - 1
        )));
    }
    if s.len() != fully.len() {
        return Err(Error::shape("fully flags", s.len(), fully.len()));
    }
    let mut max = f64::NEG_INFINITY;
    for &j in s {
        let p = preds
            .get(j)
            .ok_or_else(|| Error::Domain(format!("positive anchor {j} out of range")))?;
        max = max.max(p.score);
    }
    if !(max > 0.0) {
        return Err(Error::DegenerateScore);
    }
    let factor = (num_layers - layer) as f64 / (num_layers - 1) as f64;
    Ok(s.iter()
        .zip(fully)
        .map(|(&j, &f)| if f { 1.0 } else { factor * preds[j].score / max })
        .collect())
}

/// One positive anchor/gt pairing in one layer's assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveRecord {
    pub anchor: usize,
    pub gt: usize,
    /// Soft label in [0, 1]; exactly 1 for fully positive anchors.
    pub d: f64,
    /// LIOU of this layer's prediction for the anchor against its gt.
    pub liou: f64,
    pub fully: bool,
}

/// Positive records and negative anchors of one decoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAssignment {
    pub layer: usize,
    pub positives: Vec<PositiveRecord>,
    pub negatives: Vec<usize>,
}

/// Full one-to-several assignment over a decoder trace.
///
/// OTA runs once on the last layer; Hungarian matching restricted to the OTA
/// positives picks the fully positive anchor per gt. Layers `1..N-1` share the
/// positive set with layer-wise soft labels; layer `N` keeps only the fully
/// positives.
pub fn one_to_several(
    traces: &[LayerTrace],
    gts: &[GroundTruthLane],
    cfg: &OtaConfig,
    geo: &GeometryConfig,
) -> Result<Vec<LayerAssignment>> {
    let n = traces.len();
    if n == 0 {
        return Err(Error::Domain("one_to_several needs at least one layer".into()));
    }
    let num_anchors = traces[0].predictions.len();
    if num_anchors == 0 {
        return Err(Error::Domain("one_to_several needs at least one anchor".into()));
    }
    for t in traces {
        if t.predictions.len() != num_anchors {
            return Err(Error::shape("trace predictions", num_anchors, t.predictions.len()));
        }
    }

    let last = &traces[n - 1].predictions;
    let (sets, cost_last, liou_last) = if gts.is_empty() {
        (Vec::new(), Vec::new(), Vec::new())
    } else {
        let cost = ota_cost_matrix(last, gts, cfg, geo)?;
        let liou_last = liou_matrix(last, gts, geo)?;
        let sets = ota_assign(&cost, &liou_last, cfg)?;
        (sets, cost, liou_last)
    };

    // Shared positive set (ascending) and who owns each member.
    let mut owner: Vec<Option<usize>> = vec![None; num_anchors];
    for (j, set) in sets.iter().enumerate() {
        for &anchor in set {
            owner[anchor] = Some(j);
        }
    }
    let s_list: Vec<usize> = (0..num_anchors).filter(|&a| owner[a].is_some()).collect();

    // Fully positive anchor per gt: Hungarian over the positive submatrix with
    // non-member pairs barred.
    let mut fully_flag = vec![false; num_anchors];
    if !s_list.is_empty() {
        let sub: Vec<Vec<f64>> = s_list
            .iter()
            .map(|&anchor| {
                (0..gts.len())
                    .map(|j| {
                        if owner[anchor] == Some(j) {
                            cost_last[anchor][j]
                        } else {
                            FORBIDDEN_COST
                        }
                    })
                    .collect()
            })
            .collect();
        let matched = hungarian(&sub)?;
        for (si, j) in matched.pairs {
            let anchor = s_list[si];
            if owner[anchor] == Some(j) {
                fully_flag[anchor] = true;
            }
        }
    }
    let fully_list: Vec<bool> = s_list.iter().map(|&a| fully_flag[a]).collect();

    let mut out = Vec::with_capacity(n);
    for r in 1..=n {
        let preds = &traces[r - 1].predictions;
        let liou_r = if r == n && !gts.is_empty() {
            liou_last.clone()
        } else if !gts.is_empty() {
            liou_matrix(preds, gts, geo)?
        } else {
            Vec::new()
        };
        let (positives, negatives) = if r < n {
            let d = if s_list.is_empty() {
                Vec::new()
            } else {
                layer_soft_labels(r, n, preds, &s_list, &fully_list)?
            };
            let positives: Vec<PositiveRecord> = s_list
                .iter()
                .zip(&d)
                .map(|(&anchor, &d)| {
                    let gt = owner[anchor].expect("every member of S has an owner");
                    PositiveRecord {
                        anchor,
                        gt,
                        d,
                        liou: liou_r[anchor][gt],
                        fully: fully_flag[anchor],
                    }
                })
                .collect();
            let negatives = (0..num_anchors).filter(|&a| owner[a].is_none()).collect();
            (positives, negatives)
        } else {
            let positives: Vec<PositiveRecord> = s_list
                .iter()
                .filter(|&&a| fully_flag[a])
                .map(|&anchor| {
                    let gt = owner[anchor].expect("fully positive anchors have an owner");
                    PositiveRecord {
                        anchor,
                        gt,
                        d: 1.0,
                        liou: liou_r[anchor][gt],
                        fully: true,
                    }
                })
                .collect();
            let negatives = (0..num_anchors).filter(|&a| !fully_flag[a]).collect();
            (positives, negatives)
        };
        out.push(LayerAssignment {
            layer: r,
            positives,
            negatives,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::LaneAnchor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn geo() -> GeometryConfig {
        GeometryConfig::new(800.0, 320.0, 72, 15.0).unwrap()
    }

    fn pred_from_anchor(anchor: &LaneAnchor, score: f64, idx: usize) -> Prediction {
        Prediction {
            score,
            start_x: anchor.start_x,
            start_y: anchor.start_y,
            theta: anchor.theta,
            length: anchor.length,
            offsets: anchor.offsets.clone(),
            layer: 1,
            anchor_index: idx,
        }
    }

    fn gt_at(x: f64, g: &GeometryConfig) -> GroundTruthLane {
        let anchor = LaneAnchor::straight(x, 0.0, FRAC_PI_2, 1.0, g.num_rows);
        GroundTruthLane::from_anchor(&anchor, g).unwrap()
    }

    #[test]
    fn focal_cost_drops_as_confidence_rises() {
        let lo = focal_cost(0.1, 0.25, 2.0);
        let hi = focal_cost(0.9, 0.25, 2.0);
        assert!(hi < lo);
        assert!(focal_cost(1.0, 0.25, 2.0).is_finite());
        assert!(focal_cost(0.0, 0.25, 2.0).is_finite());
    }

    #[test]
    fn similarity_term_matches_hand_value() {
        let cfg = OtaConfig::default();
        let with_sim = pair_cost(0.1, 0.2, 0.3, 0.5, &cfg);
        let cls_only = pair_cost(0.0, 0.2, 0.3, 0.5, &cfg);
        assert!((with_sim - cls_only - 1.08e-4).abs() < 1e-15);
    }

    #[test]
    fn identical_pair_cost_is_classification_only() {
        let g = geo();
        let cfg = OtaConfig::default();
        let gt = gt_at(0.5, &g);
        let anchor = LaneAnchor::straight(0.5, 0.0, FRAC_PI_2, 1.0, g.num_rows);
        let pred = pred_from_anchor(&anchor, 0.7, 0);
        let m = ota_cost_matrix(&[pred], &[gt], &cfg, &g).unwrap();
        let expected = cfg.w_cls * focal_cost(0.7, cfg.focal_alpha, cfg.focal_gamma);
        assert_eq!(m[0][0], expected);
    }

    #[test]
    fn doubling_w_sim_preserves_similarity_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let base = OtaConfig::default();
        let doubled = OtaConfig {
            w_sim: 6.0,
            ..OtaConfig::default()
        };
        for _ in 0..100 {
            let (d1, x1, t1): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
            let (d2, x2, t2): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
            let score = 0.5;
            let a = pair_cost(d1, x1, t1, score, &base);
            let b = pair_cost(d2, x2, t2, score, &base);
            let a2 = pair_cost(d1, x1, t1, score, &doubled);
            let b2 = pair_cost(d2, x2, t2, score, &doubled);
            assert_eq!(a < b, a2 < b2);
        }
    }

    #[test]
    fn no_overlap_pairs_get_sentinel_cost() {
        let g = geo();
        let cfg = OtaConfig::default();
        let gt = gt_at(0.5, &g);
        // Short lane high up: no rows in common with a bottom-anchored gt of
        // full length? The gt spans everything, so instead use a pred whose
        // span sits outside the image.
        let mut anchor = LaneAnchor::straight(2.5, 0.0, FRAC_PI_2, 1.0, g.num_rows);
        anchor.offsets = vec![0.0; g.num_rows];
        let pred = pred_from_anchor(&anchor, 0.5, 0);
        let m = ota_cost_matrix(&[pred], &[gt], &cfg, &g).unwrap();
        assert_eq!(m[0][0], SENTINEL_COST);
        let l = liou_matrix(
            &[pred_from_anchor(&anchor, 0.5, 0)],
            &[gt_at(0.5, &g)],
            &g,
        )
        .unwrap();
        assert_eq!(l[0][0], NO_OVERLAP_LIOU);
    }

    #[test]
    fn dynamic_k_floor_is_raised_to_t_min() {
        let cfg = OtaConfig::default();
        assert_eq!(dynamic_k(&[0.9, 0.8, 0.1, 0.05], &cfg), 2);
    }

    #[test]
    fn dynamic_k_sums_top_q() {
        let cfg = OtaConfig {
            k_max: 10,
            ..OtaConfig::default()
        };
        assert_eq!(dynamic_k(&[1.0; 6], &cfg), 4);
    }

    #[test]
    fn dynamic_k_capped_by_column_length() {
        let cfg = OtaConfig::default();
        assert_eq!(dynamic_k(&[0.9], &cfg), 1);
    }

    #[test]
    fn dynamic_k_clamps_negative_lious_to_zero() {
        let cfg = OtaConfig::default();
        assert_eq!(dynamic_k(&[-0.5, -1.0, -0.2, -0.9, -0.4], &cfg), 2);
    }

    #[test]
    fn ota_assign_takes_lowest_cost_anchors() {
        let cfg = OtaConfig::default();
        let cost = vec![vec![0.1], vec![0.2], vec![0.9], vec![1.0]];
        // LIOUs chosen so dynamic k = 2.
        let liou = vec![vec![0.6], vec![0.5], vec![0.1], vec![0.05]];
        let sets = ota_assign(&cost, &liou, &cfg).unwrap();
        assert_eq!(sets, vec![vec![0, 1]]);
    }

    #[test]
    fn ota_assign_conflict_goes_to_cheaper_gt_with_backfill() {
        let cfg = OtaConfig::default();
        // Anchor 0 is the cheapest for both gts; gt0 wins it (0.1 < 0.2) and
        // gt1 backfills with its next unclaimed candidates.
        let cost = vec![
            vec![0.1, 0.2],
            vec![0.3, 0.4],
            vec![0.8, 0.5],
            vec![0.9, 0.6],
        ];
        let liou = vec![
            vec![0.9, 0.9],
            vec![0.8, 0.8],
            vec![0.2, 0.3],
            vec![0.1, 0.2],
        ];
        let sets = ota_assign(&cost, &liou, &cfg).unwrap();
        assert_eq!(sets[0], vec![0, 1]);
        assert_eq!(sets[1], vec![2, 3]);
        // No anchor serves two gts.
        let mut seen = std::collections::HashSet::new();
        for s in &sets {
            for a in s {
                assert!(seen.insert(*a));
            }
        }
    }

    #[test]
    fn ota_assign_is_deterministic_under_exact_ties() {
        let cfg = OtaConfig::default();
        let cost = vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]];
        let liou = vec![vec![0.4, 0.4]; 4];
        let a = ota_assign(&cost, &liou, &cfg).unwrap();
        let b = ota_assign(&cost, &liou, &cfg).unwrap();
        assert_eq!(a, b);
        // Ties resolve to the lower gt index: gt0 keeps anchors 0 and 1.
        assert_eq!(a[0], vec![0, 1]);
        assert_eq!(a[1], vec![2, 3]);
    }

    #[test]
    fn hungarian_matches_small_hand_cases() {
        let r = hungarian(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(r.total, 2.0);

        let r = hungarian(&[vec![4.0, 1.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!(r.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(r.total, 3.0);

        let r = hungarian(&[vec![7.0]]).unwrap();
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert_eq!(r.total, 7.0);
    }

    #[test]
    fn hungarian_ties_prefer_lexicographically_smallest_columns() {
        let r = hungarian(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn hungarian_handles_rectangles_both_ways() {
        let r = hungarian(&[vec![5.0, 1.0, 3.0]]).unwrap();
        assert_eq!(r.pairs, vec![(0, 1)]);
        let r = hungarian(&[vec![5.0], vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(r.pairs, vec![(1, 0)]);
        assert_eq!(r.total, 1.0);
    }

    #[test]
    fn hungarian_rejects_bad_input() {
        assert!(hungarian(&[]).is_err());
        assert!(hungarian(&[vec![]]).is_err());
        assert!(hungarian(&[vec![1.0], vec![2.0, 3.0]]).is_err());
        assert!(hungarian(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn hungarian_mapping_invariant_to_constant_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let n = rng.random_range(1..=5);
            let m = rng.random_range(1..=5);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.random_range(0.0..10.0)).collect())
                .collect();
            let shift = rng.random_range(-5.0..5.0);
            let shifted: Vec<Vec<f64>> = cost
                .iter()
                .map(|row| row.iter().map(|v| v + shift).collect())
                .collect();
            assert_eq!(
                hungarian(&cost).unwrap().pairs,
                hungarian(&shifted).unwrap().pairs
            );
        }
    }

    #[test]
    fn soft_labels_follow_score_ratios() {
        let g = geo();
        let anchor = LaneAnchor::straight(0.5, 0.0, FRAC_PI_2, 1.0, g.num_rows);
        let preds: Vec<Prediction> = [0.9, 0.45, 0.3]
            .iter()
            .enumerate()
            .map(|(i, &s)| pred_from_anchor(&anchor, s, i))
            .collect();
        let s = vec![0, 1, 2];
        let fully = vec![false, false, false];
        // Layer 1 of 6: the decay factor is exactly 1.
        let d = layer_soft_labels(1, 6, &preds, &s, &fully).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-12);
        assert!((d[1] - 0.5).abs() < 1e-12);
        assert!((d[2] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn soft_labels_decay_with_depth_and_pin_fully_to_one() {
        let g = geo();
        let anchor = LaneAnchor::straight(0.5, 0.0, FRAC_PI_2, 1.0, g.num_rows);
        let preds: Vec<Prediction> = [0.9, 0.9]
            .iter()
            .enumerate()
            .map(|(i, &s)| pred_from_anchor(&anchor, s, i))
            .collect();
        let d = layer_soft_labels(5, 6, &preds, &[0, 1], &[true, false]).unwrap();
        assert_eq!(d[0], 1.0);
        // (6-5)/(6-1) * 0.9/0.9
        assert!((d[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn soft_labels_reject_zero_max_score() {
        let g = geo();
        let anchor = LaneAnchor::straight(0.5, 0.0, FRAC_PI_2, 1.0, g.num_rows);
        let preds = vec![pred_from_anchor(&anchor, 0.0, 0)];
        assert!(matches!(
            layer_soft_labels(1, 6, &preds, &[0], &[false]),
            Err(Error::DegenerateScore)
        ));
    }

    #[test]
    fn soft_labels_reject_out_of_range_layer() {
        let g = geo();
        let anchor = LaneAnchor::straight(0.5, 0.0, FRAC_PI_2, 1.0, g.num_rows);
        let preds = vec![pred_from_anchor(&anchor, 0.5, 0)];
        assert!(layer_soft_labels(0, 6, &preds, &[0], &[false]).is_err());
        assert!(layer_soft_labels(6, 6, &preds, &[0], &[false]).is_err());
    }

    fn synthetic_traces(num_anchors: usize, gts: &[GroundTruthLane], layers: usize, g: &GeometryConfig, seed: u64) -> Vec<LayerTrace> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors = crate::decoder::initial_anchors(num_anchors, g.num_rows);
        (1..=layers)
            .map(|layer| {
                let preds: Vec<Prediction> = anchors
                    .iter()
                    .enumerate()
                    .map(|(k, a)| {
                        // A few anchors sit exactly on gts so OTA has strong candidates.
                        if k < gts.len() {
                            let gt = &gts[k];
                            Prediction {
                                score: rng.random_range(0.55..0.95),
                                start_x: gt.start_x,
                                start_y: gt.start_y,
                                theta: gt.theta,
                                length: gt.length,
                                offsets: vec![0.0; g.num_rows],
                                layer,
                                anchor_index: k,
                            }
                        } else {
                            let mut p = pred_from_anchor(a, rng.random_range(0.05..0.9), k);
                            p.layer = layer;
                            p
                        }
                    })
                    .collect();
                LayerTrace::from_predictions(layer, preds)
            })
            .collect()
    }

    #[test]
    fn one_to_several_selects_one_fully_positive_per_gt() {
        let g = geo();
        let gts = vec![gt_at(0.3, &g), gt_at(0.7, &g)];
        let traces = synthetic_traces(24, &gts, 6, &g, 123);
        let assigns = one_to_several(&traces, &gts, &OtaConfig::default(), &g).unwrap();
        assert_eq!(assigns.len(), 6);

        let last = &assigns[5];
        assert_eq!(last.positives.len(), 2);
        assert!(last.positives.iter().all(|p| p.fully && p.d == 1.0));
        let gts_hit: std::collections::HashSet<usize> = last.positives.iter().map(|p| p.gt).collect();
        assert_eq!(gts_hit.len(), 2);
        assert_eq!(last.positives.len() + last.negatives.len(), 24);

        // Earlier layers share one positive set and honor t_min.
        let base: Vec<(usize, usize)> = assigns[0].positives.iter().map(|p| (p.anchor, p.gt)).collect();
        for layer in &assigns[..5] {
            let pairs: Vec<(usize, usize)> = layer.positives.iter().map(|p| (p.anchor, p.gt)).collect();
            assert_eq!(pairs, base);
            for gt in 0..2 {
                let count = layer.positives.iter().filter(|p| p.gt == gt).count();
                assert!((2..=8).contains(&count));
            }
            for p in &layer.positives {
                assert!((0.0..=1.0).contains(&p.d));
                if p.fully {
                    assert_eq!(p.d, 1.0);
                }
            }
            assert_eq!(layer.positives.len() + layer.negatives.len(), 24);
        }
    }

    #[test]
    fn one_to_several_with_no_gts_marks_everything_negative() {
        let g = geo();
        let traces = synthetic_traces(8, &[], 3, &g, 5);
        let assigns = one_to_several(&traces, &[], &OtaConfig::default(), &g).unwrap();
        for layer in assigns {
            assert!(layer.positives.is_empty());
            assert_eq!(layer.negatives.len(), 8);
        }
    }
}
