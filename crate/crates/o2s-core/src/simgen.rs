//! Deterministic synthetic scenes: ground-truth lanes plus noisy or perfect
//! detector-style predictions, all driven by a seeded ChaCha8 stream so equal
//! seeds give byte-identical output on every platform.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decoder::Prediction;
use crate::error::{Error, Result};
use crate::geometry::{GeometryConfig, GroundTruthLane, LaneAnchor};

/// Salt applied to the scene seed for the prediction-noise stream so lane
/// generation and perturbation never share draws.
const NOISE_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
/// Scene attempts before generation gives up.
const MAX_ATTEMPTS: usize = 64;
/// Minimum horizontal separation between lanes, as a fraction of image width.
pub const MIN_SEPARATION_FRAC: f64 = 0.015;

/// Prediction noise parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Std-dev of per-row lateral noise in pixels.
    pub x_sigma: f64,
    /// Std-dev of angle noise in radians.
    pub theta_sigma: f64,
    /// Probability of dropping each true lane from the predictions.
    pub drop_prob: f64,
    /// Number of low-scoring clutter lanes to add.
    pub clutter: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            x_sigma: 0.0,
            theta_sigma: 0.0,
            drop_prob: 0.0,
            clutter: 0,
        }
    }
}

/// Everything needed to generate one scene deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Number of ground-truth lanes (1 to 4).
    pub num_lanes: usize,
    /// Inclusive range of the quadratic curvature coefficient (fraction of
    /// image width reached at the top of the lane).
    pub curvature: (f64, f64),
    pub geometry: GeometryConfig,
    pub noise: NoiseSpec,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.num_lanes) {
            return Err(Error::InvalidConfig(format!(
                "num_lanes must be 1..=4, got {}",
                self.num_lanes
            )));
        }
        let (lo, hi) = self.curvature;
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::InvalidConfig(format!(
                "curvature range must be finite with min <= max, got ({lo}, {hi})"
            )));
        }
        GeometryConfig::new(
            self.geometry.image_width,
            self.geometry.image_height,
            self.geometry.num_rows,
            self.geometry.liou_radius,
        )?;
        let n = &self.noise;
        if !(n.x_sigma >= 0.0) || !n.x_sigma.is_finite() || !(n.theta_sigma >= 0.0) || !n.theta_sigma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "noise sigmas must be finite and non-negative, got ({}, {})",
                n.x_sigma, n.theta_sigma
            )));
        }
        if !(0.0..=1.0).contains(&n.drop_prob) {
            return Err(Error::InvalidConfig(format!(
                "drop_prob must be in [0, 1], got {}",
                n.drop_prob
            )));
        }
        Ok(())
    }
}

/// One sampled lane candidate: x per row plus its highest covered row.
struct RawLane {
    xs: Vec<f64>,
    top: usize,
}

fn sample_raw_lane(
    rng: &mut ChaCha8Rng,
    base: f64,
    slope_frac: f64,
    curvature: (f64, f64),
    frac_range: (f64, f64),
    geo: &GeometryConfig,
) -> Option<RawLane> {
    let z = geo.num_rows;
    let w = geo.image_width;
    let strips = (z - 1) as f64;
    let slope = rng.random_range(-slope_frac..=slope_frac) * w;
    let curv = rng.random_range(curvature.0..=curvature.1) * w;
    let frac = rng.random_range(frac_range.0..=frac_range.1);
    let top_row = ((frac * strips).round() as usize).min(z - 1);
    let xs: Vec<f64> = (0..z)
        .map(|i| {
            let t = i as f64 / strips;
            base + slope * t + curv * t * t
        })
        .collect();
    let mut top = None;
    for (i, x) in xs.iter().enumerate().take(top_row + 1) {
        if (0.0..=w).contains(x) {
            top = Some(i);
        } else {
            break;
        }
    }
    top.map(|top| RawLane { xs, top })
}

/// Ground truth fit through row samples `xs[first..=last]`: the anchor starts
/// at the bottom sample, takes its angle from the first two samples, and bends
/// onto the rest through per-row offsets. The stored polyline is exactly the
/// anchor's own sampling.
pub fn lane_from_samples(xs: &[f64], first: usize, last: usize, geo: &GeometryConfig) -> Result<GroundTruthLane> {
    let z = geo.num_rows;
    if xs.len() != z {
        return Err(Error::shape("lane samples", z, xs.len()));
    }
    if first >= last || last >= z {
        return Err(Error::Domain(format!(
            "lane needs at least two rows with first < last < {z}, got {first}..{last}"
        )));
    }
    let w = geo.image_width;
    let h = geo.image_height;
    let strips = (z - 1) as f64;
    let dy = h / strips;
    // The anchor ray is x = x0 + (y0*H - y) * cot(theta): moving one row up
    // changes x by -dy*cot, so a rightward step needs a negative cotangent.
    let theta = dy.atan2(-(xs[first + 1] - xs[first]));
    let start_x = (xs[first] / w).clamp(0.0, 1.0);
    let start_y = first as f64 / strips;
    let length = (last - first) as f64 / strips;
    let mut anchor = LaneAnchor::straight(start_x, start_y, theta, length, z);
    let cot = theta.cos() / theta.sin();
    let rows = geo.sample_rows();
    for i in first..=last {
        let ray = start_x * w + (start_y * h - rows[i]) * cot;
        anchor.offsets[i] = (xs[i] - ray) / w;
    }
    GroundTruthLane::from_anchor(&anchor, geo)
}

fn try_scene(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Result<Option<Vec<GroundTruthLane>>> {
    let geo = &spec.geometry;
    let z = geo.num_rows;
    let w = geo.image_width;
    let min_rows = (z / 6).max(2);
    let lanes_f = spec.num_lanes as f64;

    let mut raw = Vec::with_capacity(spec.num_lanes);
    for li in 0..spec.num_lanes {
        let slot = w * (li as f64 + 1.0) / (lanes_f + 1.0);
        let jitter = w / (4.0 * (lanes_f + 1.0));
        let base = slot + rng.random_range(-jitter..=jitter);
        let Some(lane) = sample_raw_lane(rng, base, 0.35, spec.curvature, (0.55, 1.0), geo) else {
            return Ok(None);
        };
        if lane.top + 1 < min_rows {
            return Ok(None);
        }
        raw.push(lane);
    }

    let min_sep = MIN_SEPARATION_FRAC * w;
    for a in 0..raw.len() {
        for b in a + 1..raw.len() {
            let top = raw[a].top.min(raw[b].top);
            for i in 0..=top {
                if (raw[a].xs[i] - raw[b].xs[i]).abs() < min_sep {
                    return Ok(None);
                }
            }
        }
    }

    let mut out = Vec::with_capacity(raw.len());
    for lane in &raw {
        out.push(lane_from_samples(&lane.xs, 0, lane.top, geo)?);
    }
    Ok(Some(out))
}

/// Generate the scene's ground-truth lanes: up to four non-crossing lanes
/// rising from the image bottom, quadratic in the row index, each spanning at
/// least a sixth of the rows and separated laterally by at least 1.5% of the
/// image width. Rejected samples are retried up to a fixed attempt budget.
pub fn gen_scene(spec: &SceneSpec) -> Result<Vec<GroundTruthLane>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(lanes) = try_scene(&mut rng, spec)? {
            return Ok(lanes);
        }
    }
    Err(Error::GenerationFailed { attempts: MAX_ATTEMPTS })
}

/// A prediction that reproduces the lane exactly (LIOU 1 against it).
pub fn prediction_from_lane(gt: &GroundTruthLane, score: f64, anchor_index: usize, geo: &GeometryConfig) -> Prediction {
    let anchor = gt.anchor(geo.num_rows);
    Prediction {
        score,
        start_x: anchor.start_x,
        start_y: anchor.start_y,
        theta: anchor.theta,
        length: anchor.length,
        offsets: anchor.offsets,
        layer: 1,
        anchor_index,
    }
}

/// One perfect, fully confident prediction per ground truth.
pub fn perfect_predictions(gts: &[GroundTruthLane], geo: &GeometryConfig) -> Vec<Prediction> {
    gts.iter()
        .enumerate()
        .map(|(i, gt)| prediction_from_lane(gt, 1.0, i, geo))
        .collect()
}

/// Noisy predictions for the scene's ground truths.
///
/// Per lane (in order): a drop draw, an angle draw, one lateral draw per row
/// and a score draw are consumed from a salted stream, so the draws a lane
/// receives do not depend on whether earlier lanes were dropped. Surviving
/// lanes keep their span but re-anchor on the noisy bottom sample and noisy
/// angle, with offsets rebuilt so the predicted polyline equals the noisy
/// samples. Clutter lanes score in [0.05, 0.45], true lanes in [0.75, 0.999].
pub fn perturb(gts: &[GroundTruthLane], spec: &SceneSpec) -> Result<Vec<Prediction>> {
    spec.validate()?;
    let geo = &spec.geometry;
    let z = geo.num_rows;
    let w = geo.image_width;
    let h = geo.image_height;
    let strips = (z - 1) as f64;
    let rows = geo.sample_rows();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ NOISE_SEED_SALT);
    let x_noise = Normal::new(0.0, spec.noise.x_sigma).expect("validated sigma");
    let theta_noise = Normal::new(0.0, spec.noise.theta_sigma).expect("validated sigma");

    let mut preds = Vec::new();
    for gt in gts {
        if gt.polyline.xs.len() != z {
            return Err(Error::shape("gt polyline rows", z, gt.polyline.xs.len()));
        }
        let drop: f64 = rng.random();
        let dt = theta_noise.sample(&mut rng);
        let dxs: Vec<f64> = (0..z).map(|_| x_noise.sample(&mut rng)).collect();
        let score = rng.random_range(0.75..=0.999);
        if drop < spec.noise.drop_prob {
            continue;
        }

        let first = ((gt.start_y * strips).round() as usize).min(z - 1);
        let last = (((gt.start_y + gt.length) * strips).round() as usize).min(z - 1);
        let theta = (gt.theta + dt).clamp(0.05, PI - 0.05);
        let start_x = ((gt.polyline.xs[first] + dxs[first]) / w).clamp(0.0, 1.0);
        let cot = theta.cos() / theta.sin();
        let mut offsets = vec![0.0; z];
        for i in first..=last {
            let ray = start_x * w + (gt.start_y * h - rows[i]) * cot;
            if gt.polyline.valid[i] {
                offsets[i] = (gt.polyline.xs[i] + dxs[i] - ray) / w;
            } else {
                // Keep rows the gt does not cover out of the image.
                offsets[i] = 10.0;
            }
        }
        preds.push(Prediction {
            score,
            start_x,
            start_y: gt.start_y,
            theta,
            length: gt.length,
            offsets,
            layer: 1,
            anchor_index: preds.len(),
        });
    }

    for _ in 0..spec.noise.clutter {
        if let Some(p) = clutter_lane(&mut rng, spec, preds.len()) {
            preds.push(p);
        }
    }
    Ok(preds)
}

fn clutter_lane(rng: &mut ChaCha8Rng, spec: &SceneSpec, anchor_index: usize) -> Option<Prediction> {
    let geo = &spec.geometry;
    let w = geo.image_width;
    for _ in 0..16 {
        let base = rng.random_range(0.08..=0.92) * w;
        let score = rng.random_range(0.05..=0.45);
        let Some(lane) = sample_raw_lane(rng, base, 0.3, spec.curvature, (0.3, 0.8), geo) else {
            continue;
        };
        if lane.top < 1 {
            continue;
        }
        let Ok(gt) = lane_from_samples(&lane.xs, 0, lane.top, geo) else {
            continue;
        };
        return Some(prediction_from_lane(&gt, score, anchor_index, geo));
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{anchor_to_polyline, line_iou};

    fn base_spec(seed: u64, num_lanes: usize) -> SceneSpec {
        SceneSpec {
            seed,
            num_lanes,
            curvature: (-0.08, 0.08),
            geometry: GeometryConfig::new(800.0, 320.0, 72, 15.0).unwrap(),
            noise: NoiseSpec::default(),
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = base_spec(42, 3);
        let a = gen_scene(&spec).unwrap();
        let b = gen_scene(&spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_scene(&base_spec(43, 3)).unwrap());
    }

    #[test]
    fn scenes_respect_count_bounds_and_angles() {
        for seed in 0..24u64 {
            let lanes = 1 + (seed as usize) % 4;
            let spec = base_spec(seed, lanes);
            let gts = gen_scene(&spec).unwrap();
            assert_eq!(gts.len(), lanes);
            for gt in &gts {
                assert_eq!(gt.start_y, 0.0);
                assert!(gt.polyline.valid[0], "lanes start at the bottom row");
                assert!(gt.polyline.num_valid() >= 12);
                assert!(gt.theta > 0.0 && gt.theta < PI);
                assert!(gt.length > 0.0 && gt.length <= 1.0);
                for (i, &v) in gt.polyline.valid.iter().enumerate() {
                    if v {
                        assert!((0.0..=spec.geometry.image_width).contains(&gt.polyline.xs[i]));
                    }
                }
            }
        }
    }

    #[test]
    fn lanes_never_cross_and_keep_separation() {
        for seed in 0..24u64 {
            let spec = base_spec(seed * 7 + 1, 4);
            let gts = gen_scene(&spec).unwrap();
            let min_sep = MIN_SEPARATION_FRAC * spec.geometry.image_width;
            for a in 0..gts.len() {
                for b in a + 1..gts.len() {
                    let mut sign = 0.0f64;
                    for i in 0..spec.geometry.num_rows {
                        if gts[a].polyline.valid[i] && gts[b].polyline.valid[i] {
                            let d = gts[a].polyline.xs[i] - gts[b].polyline.xs[i];
                            assert!(d.abs() >= min_sep - 1e-6, "seed {seed}: rows too close");
                            if sign == 0.0 {
                                sign = d.signum();
                            } else {
                                assert_eq!(d.signum(), sign, "seed {seed}: lanes cross");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_noise_predictions_match_ground_truth() {
        for seed in [3u64, 9, 27] {
            let spec = base_spec(seed, 3);
            let gts = gen_scene(&spec).unwrap();
            let preds = perturb(&gts, &spec).unwrap();
            assert_eq!(preds.len(), gts.len());
            for (p, gt) in preds.iter().zip(&gts) {
                assert!((0.75..=0.999).contains(&p.score));
                let poly = anchor_to_polyline(&p.geometry(), &spec.geometry).unwrap();
                let liou = line_iou(&poly, &gt.polyline, &spec.geometry).unwrap();
                assert!(1.0 - liou < 1e-9, "seed {seed}: liou {liou}");
            }
        }
    }

    #[test]
    fn perfect_predictions_reproduce_lanes_bitwise() {
        let spec = base_spec(11, 4);
        let gts = gen_scene(&spec).unwrap();
        let preds = perfect_predictions(&gts, &spec.geometry);
        for (p, gt) in preds.iter().zip(&gts) {
            assert_eq!(p.score, 1.0);
            let poly = anchor_to_polyline(&p.geometry(), &spec.geometry).unwrap();
            assert_eq!(poly, gt.polyline);
            assert_eq!(line_iou(&poly, &gt.polyline, &spec.geometry).unwrap(), 1.0);
        }
    }

    #[test]
    fn perturbation_is_deterministic_per_seed() {
        let mut spec = base_spec(5, 2);
        spec.noise.x_sigma = 3.0;
        spec.noise.theta_sigma = 0.01;
        spec.noise.clutter = 2;
        let gts = gen_scene(&spec).unwrap();
        assert_eq!(perturb(&gts, &spec).unwrap(), perturb(&gts, &spec).unwrap());
        let mut other = spec.clone();
        other.seed = 6;
        let gts2 = gen_scene(&other).unwrap();
        assert_ne!(perturb(&gts, &spec).unwrap(), perturb(&gts2, &other).unwrap());
    }

    #[test]
    fn drop_probability_one_removes_all_true_lanes() {
        let mut spec = base_spec(8, 3);
        spec.noise.drop_prob = 1.0;
        let gts = gen_scene(&spec).unwrap();
        assert!(perturb(&gts, &spec).unwrap().is_empty());
    }

    #[test]
    fn clutter_lanes_score_low_and_true_lanes_high() {
        let mut spec = base_spec(13, 2);
        spec.noise.clutter = 3;
        let gts = gen_scene(&spec).unwrap();
        let preds = perturb(&gts, &spec).unwrap();
        assert!(preds.len() >= gts.len());
        assert!(preds.len() <= gts.len() + 3);
        for (i, p) in preds.iter().enumerate() {
            if i < gts.len() {
                assert!((0.75..=0.999).contains(&p.score));
            } else {
                assert!((0.05..=0.45).contains(&p.score));
            }
            assert_eq!(p.anchor_index, i);
        }
    }

    #[test]
    fn wider_noise_lowers_mean_liou() {
        let mut tight_sum = 0.0;
        let mut wide_sum = 0.0;
        let mut count = 0usize;
        for seed in 0..50u64 {
            let spec = base_spec(seed, 2);
            let gts = gen_scene(&spec).unwrap();
            for (sigma, acc) in [(2.0, &mut tight_sum), (20.0, &mut wide_sum)] {
                let mut noisy = spec.clone();
                noisy.noise.x_sigma = sigma;
                let preds = perturb(&gts, &noisy).unwrap();
                for (p, gt) in preds.iter().zip(&gts) {
                    let poly = anchor_to_polyline(&p.geometry(), &spec.geometry).unwrap();
                    if let Ok(liou) = line_iou(&poly, &gt.polyline, &spec.geometry) {
                        *acc += liou;
                    }
                }
            }
            count += gts.len();
        }
        let tight = tight_sum / count as f64;
        let wide = wide_sum / count as f64;
        assert!(
            tight > wide + 0.05,
            "expected clearly higher LIOU at sigma 2 ({tight}) than sigma 20 ({wide})"
        );
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = base_spec(1, 0);
        assert!(gen_scene(&spec).is_err());
        spec.num_lanes = 5;
        assert!(gen_scene(&spec).is_err());
        spec.num_lanes = 2;
        spec.curvature = (0.5, -0.5);
        assert!(gen_scene(&spec).is_err());
        spec.curvature = (0.0, 0.0);
        spec.noise.drop_prob = 1.5;
        assert!(gen_scene(&spec).is_err());
        spec.noise.drop_prob = 0.0;
        spec.noise.x_sigma = -1.0;
        assert!(gen_scene(&spec).is_err());
    }

    #[test]
    fn straight_scene_lanes_have_small_offsets() {
        let mut spec = base_spec(21, 3);
        spec.curvature = (0.0, 0.0);
        let gts = gen_scene(&spec).unwrap();
        for gt in &gts {
            for &o in &gt.offsets {
                assert!(o.abs() < 1e-9, "straight lanes should need no bending, got {o}");
            }
        }
    }
}
