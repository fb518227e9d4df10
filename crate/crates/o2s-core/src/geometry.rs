//! Lane geometry on a fixed grid of horizontal rows.
//!
//! A lane lives on `num_rows` equally spaced rows of the image, counted from
//! the bottom edge upward (`y = 0` is the bottom, `y = image_height` the top).
//! An anchor is a ray from a start point at angle `theta` to the x axis plus a
//! per-row lateral offset; sampling it on the row grid yields a polyline with
//! a per-row validity mask. Line IOU (LIOU) compares two polylines by widening
//! each sample into a horizontal interval of radius `liou_radius` pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Angles with |sin(theta)| below this bound intersect the row grid too
/// shallowly to produce meaningful per-row samples.
pub const MIN_SIN_THETA: f64 = 1e-6;

/// Image raster and row-grid parameters shared by every geometric operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    /// Image width in pixels.
    pub image_width: f64,
    /// Image height in pixels.
    pub image_height: f64,
    /// Number of sample rows `z`; rows sit at `image_height / (z - 1) * i`.
    pub num_rows: usize,
    /// Half-width `e` in pixels of the interval used by LIOU.
    pub liou_radius: f64,
}

impl GeometryConfig {
    pub fn new(image_width: f64, image_height: f64, num_rows: usize, liou_radius: f64) -> Result<Self> {
        if !(image_width > 0.0) || !(image_height > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "image dimensions must be positive, got {image_width}x{image_height}"
            )));
        }
        if num_rows < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_rows must be at least 2, got {num_rows}"
            )));
        }
        if !(liou_radius > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "liou_radius must be positive, got {liou_radius}"
            )));
        }
        Ok(GeometryConfig {
            image_width,
            image_height,
            num_rows,
            liou_radius,
        })
    }

    /// CULane raster: 1640x590 pixels, 72 rows, 15 px LIOU radius.
    pub fn culane() -> Self {
        GeometryConfig {
            image_width: 1640.0,
            image_height: 590.0,
            num_rows: 72,
            liou_radius: 15.0,
        }
    }

    /// Row ordinates `y_i = image_height / (num_rows - 1) * i`, bottom to top.
    pub fn sample_rows(&self) -> Vec<f64> {
        let strips = (self.num_rows - 1) as f64;
        (0..self.num_rows)
            .map(|i| self.image_height * i as f64 / strips)
            .collect()
    }
}

/// Lane anchor: start point and length as fractions of the image, angle in
/// radians from the x axis, and one lateral offset per row as a fraction of
/// the image width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneAnchor {
    pub start_x: f64,
    pub start_y: f64,
    pub theta: f64,
    pub length: f64,
    pub offsets: Vec<f64>,
}

impl LaneAnchor {
    /// Straight anchor with zero offsets on every row.
    pub fn straight(start_x: f64, start_y: f64, theta: f64, length: f64, num_rows: usize) -> Self {
        LaneAnchor {
            start_x,
            start_y,
            theta,
            length,
            offsets: vec![0.0; num_rows],
        }
    }

    /// Domain check used at file boundaries; forward updates may leave these
    /// ranges and are validated only where an operation requires them.
    pub fn validate(&self, geo: &GeometryConfig) -> Result<()> {
        if self.offsets.len() != geo.num_rows {
            return Err(Error::shape("anchor offsets", geo.num_rows, self.offsets.len()));
        }
        if !(0.0..=1.0).contains(&self.start_x)
            || !(0.0..=1.0).contains(&self.start_y)
            || !(0.0..=1.0).contains(&self.length)
        {
            return Err(Error::Domain(format!(
                "anchor start/length must lie in [0,1], got ({}, {}, len {})",
                self.start_x, self.start_y, self.length
            )));
        }
        if !(self.theta > 0.0 && self.theta < std::f64::consts::PI) {
            return Err(Error::Domain(format!(
                "anchor theta must lie in (0, pi), got {}",
                self.theta
            )));
        }
        Ok(())
    }
}

/// Lane sampled on the row grid: one x per row plus a validity mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanePolyline {
    /// Sample x in pixels per row (meaningful only where `valid`).
    pub xs: Vec<f64>,
    /// Whether the lane covers the row and the sample lies inside the image.
    pub valid: Vec<bool>,
}

impl LanePolyline {
    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Ground-truth lane: its polyline plus the anchor-style summary fields used
/// by assignment costs and regression targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLane {
    pub polyline: LanePolyline,
    pub start_x: f64,
    pub start_y: f64,
    pub theta: f64,
    pub length: f64,
    /// Per-row lateral offsets of the underlying anchor (empty means all
    /// zero). Kept so a lane can be reproduced exactly in anchor form.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub offsets: Vec<f64>,
}

impl GroundTruthLane {
    /// Ground truth whose polyline is exactly the anchor's sampling, so a
    /// prediction carrying the same anchor parameters reproduces it bitwise.
    pub fn from_anchor(anchor: &LaneAnchor, geo: &GeometryConfig) -> Result<Self> {
        anchor.validate(geo)?;
        Ok(GroundTruthLane {
            polyline: anchor_to_polyline(anchor, geo)?,
            start_x: anchor.start_x,
            start_y: anchor.start_y,
            theta: anchor.theta,
            length: anchor.length,
            offsets: anchor.offsets.clone(),
        })
    }

    /// The lane in anchor form, with offsets padded or truncated to the grid.
    pub fn anchor(&self, num_rows: usize) -> LaneAnchor {
        let mut offsets = self.offsets.clone();
        offsets.resize(num_rows, 0.0);
        LaneAnchor {
            start_x: self.start_x,
            start_y: self.start_y,
            theta: self.theta,
            length: self.length,
            offsets,
        }
    }
}

/// Sample an anchor on the row grid.
///
/// The base ray at row `y` is `start_x*W + (start_y*H - y) / tan(theta)`; the
/// per-row offset (fraction of width) is added on top. A row is valid when its
/// index lies within the anchor's covered span (start row to start row plus
/// `length * (num_rows - 1)`, both rounded to the nearest row) and the sample
/// falls inside `[0, W]`.
pub fn anchor_to_polyline(anchor: &LaneAnchor, geo: &GeometryConfig) -> Result<LanePolyline> {
    if anchor.offsets.len() != geo.num_rows {
        return Err(Error::shape("anchor offsets", geo.num_rows, anchor.offsets.len()));
    }
    let sin = anchor.theta.sin();
    if sin.abs() < MIN_SIN_THETA {
        return Err(Error::DegenerateAngle { theta: anchor.theta });
    }
    let cot = anchor.theta.cos() / sin;

    let strips = (geo.num_rows - 1) as f64;
    let start_row = anchor.start_y * strips;
    let lo = start_row.round() as i64;
    let hi = (start_row + anchor.length * strips).round() as i64;

    let x0 = anchor.start_x * geo.image_width;
    let y0 = anchor.start_y * geo.image_height;

    let rows = geo.sample_rows();
    let mut xs = Vec::with_capacity(geo.num_rows);
    let mut valid = Vec::with_capacity(geo.num_rows);
    for (i, y) in rows.iter().enumerate() {
        let x = x0 + (y0 - y) * cot + anchor.offsets[i] * geo.image_width;
        let in_span = (i as i64) >= lo && (i as i64) <= hi;
        valid.push(in_span && x >= 0.0 && x <= geo.image_width);
        xs.push(x);
    }
    Ok(LanePolyline { xs, valid })
}

/// Line IOU between two polylines on the same row grid.
///
/// Each valid sample widens to `[x - e, x + e]`; per common row the signed
/// overlap `min(xa, xb) + e*2 ... ` contributes to the numerator and the span
/// to the denominator, and the result is the ratio of the two sums. Disjoint
/// intervals contribute negative overlap, so the result lies in (-1, 1] and
/// equals 1 only for identical samples.
pub fn line_iou(a: &LanePolyline, b: &LanePolyline, geo: &GeometryConfig) -> Result<f64> {
    if a.xs.len() != b.xs.len() || a.xs.len() != geo.num_rows {
        return Err(Error::shape(
            "polyline rows",
            geo.num_rows,
            format!("{} vs {}", a.xs.len(), b.xs.len()),
        ));
    }
    let e = geo.liou_radius;
    let mut overlap = 0.0;
    let mut union = 0.0;
    let mut common = 0usize;
    for i in 0..geo.num_rows {
        if a.valid[i] && b.valid[i] {
            let (xa, xb) = (a.xs[i], b.xs[i]);
            overlap += (xa + e).min(xb + e) - (xa - e).max(xb - e);
            union += (xa + e).max(xb + e) - (xa - e).min(xb - e);
            common += 1;
        }
    }
    if common == 0 {
        return Err(Error::NoCommonRows);
    }
    Ok(overlap / union)
}

/// The three normalized similarity components of the assignment cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostComponents {
    /// Mean per-row |x difference| over rows valid in both, over image width.
    pub dis: f64,
    /// Distance between normalized start points, over sqrt(2).
    pub xy: f64,
    /// |theta difference| over pi.
    pub theta: f64,
}

/// Normalized distance components between a predicted lane (in anchor form)
/// and a ground-truth lane. All three lie in [0, 1] when the inputs respect
/// their domains (starts in the unit square, angles in (0, pi)).
pub fn cost_components(
    pred: &LaneAnchor,
    gt: &GroundTruthLane,
    geo: &GeometryConfig,
) -> Result<CostComponents> {
    let poly = anchor_to_polyline(pred, geo)?;
    if gt.polyline.xs.len() != geo.num_rows {
        return Err(Error::shape("gt polyline rows", geo.num_rows, gt.polyline.xs.len()));
    }
    let mut sum = 0.0;
    let mut common = 0usize;
    for i in 0..geo.num_rows {
        if poly.valid[i] && gt.polyline.valid[i] {
            sum += (poly.xs[i] - gt.polyline.xs[i]).abs();
            common += 1;
        }
    }
    if common == 0 {
        return Err(Error::NoCommonRows);
    }
    let dis = sum / common as f64 / geo.image_width;
    let dx = pred.start_x - gt.start_x;
    let dy = pred.start_y - gt.start_y;
    let xy = (dx * dx + dy * dy).sqrt() / std::f64::consts::SQRT_2;
    let theta = (pred.theta - gt.theta).abs() / std::f64::consts::PI;
    Ok(CostComponents { dis, xy, theta })
}
