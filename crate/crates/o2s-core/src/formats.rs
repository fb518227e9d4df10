//! On-disk formats: scene/trace/report JSON schemas, the weights tensor map,
//! and the plain-text lane format (`.lines.txt`).
//!
//! JSON (de)serialization goes through serde_json, whose float printing is
//! shortest-round-trip, so saving and reloading any of these files reproduces
//! every f64 bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::assignment::{LayerAssignment, OtaConfig, PositiveRecord};
use crate::decoder::{AttentionWeights, DecoderLayerWeights, DecoderWeights, LayerTrace, Prediction};
use crate::encoding::{EncodingConfig, EncodingWeights};
use crate::error::{Error, Result};
use crate::evaluation::EvalCounts;
use crate::geometry::{GeometryConfig, GroundTruthLane, LanePolyline};
use crate::linalg::{LayerNorm, Linear, Mlp};
use crate::losses::{LayerLossEntry, LossBreakdown, LossWeights};

/// Read a JSON value from disk.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Write a value as pretty JSON with a trailing newline. Field order follows
/// the struct definitions and map keys are sorted, so equal values produce
/// byte-identical files.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// A scene: geometry, ground truths, and optionally per-layer predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub geometry: GeometryConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub gts: Vec<GroundTruthLane>,
    /// Predictions per decoder layer (outer index = layer - 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<Vec<Vec<Prediction>>>,
}

impl SceneFile {
    /// Schema check: consistent grid sizes and in-range scalar fields.
    pub fn validate(&self) -> Result<()> {
        let geo = GeometryConfig::new(
            self.geometry.image_width,
            self.geometry.image_height,
            self.geometry.num_rows,
            self.geometry.liou_radius,
        )
        .map_err(|e| Error::Schema(format!("bad geometry: {e}")))?;
        let z = geo.num_rows;
        for (i, gt) in self.gts.iter().enumerate() {
            if gt.polyline.xs.len() != z || gt.polyline.valid.len() != z {
                return Err(Error::Schema(format!(
                    "gt {i}: polyline must have {z} rows, got {}/{}",
                    gt.polyline.xs.len(),
                    gt.polyline.valid.len()
                )));
            }
            if !gt.offsets.is_empty() && gt.offsets.len() != z {
                return Err(Error::Schema(format!(
                    "gt {i}: offsets must be empty or length {z}, got {}",
                    gt.offsets.len()
                )));
            }
            if gt.polyline.xs.iter().any(|x| !x.is_finite()) {
                return Err(Error::Schema(format!("gt {i}: non-finite sample")));
            }
            gt.anchor(z)
                .validate(&geo)
                .map_err(|e| Error::Schema(format!("gt {i}: {e}")))?;
        }
        if let Some(layers) = &self.predictions {
            if layers.is_empty() {
                return Err(Error::Schema("predictions present but empty".into()));
            }
            let count = layers[0].len();
            for (li, layer) in layers.iter().enumerate() {
                if layer.len() != count {
                    return Err(Error::Schema(format!(
                        "prediction layer {}: expected {count} predictions, got {}",
                        li + 1,
                        layer.len()
                    )));
                }
                for (pi, p) in layer.iter().enumerate() {
                    validate_prediction(p, z).map_err(|e| {
                        Error::Schema(format!("prediction layer {} entry {pi}: {e}", li + 1))
                    })?;
                }
            }
        }
        Ok(())
    }
}

/// Prediction fields as accepted at file boundaries. Scores may sit exactly on
/// [0, 1]; decoder outputs stay strictly inside but perfect synthetic
/// predictions use the endpoints.
pub fn validate_prediction(p: &Prediction, num_rows: usize) -> Result<()> {
    if p.offsets.len() != num_rows {
        return Err(Error::shape("prediction offsets", num_rows, p.offsets.len()));
    }
    if !p.score.is_finite() || !(0.0..=1.0).contains(&p.score) {
        return Err(Error::Domain(format!("score must be in [0, 1], got {}", p.score)));
    }
    for (name, v) in [
        ("start_x", p.start_x),
        ("start_y", p.start_y),
        ("theta", p.theta),
        ("length", p.length),
    ] {
        if !v.is_finite() {
            return Err(Error::Domain(format!("{name} must be finite, got {v}")));
        }
    }
    if p.offsets.iter().any(|o| !o.is_finite()) {
        return Err(Error::Domain("offsets must be finite".into()));
    }
    Ok(())
}

/// A decoder run: configuration echo plus every layer's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub dim: usize,
    pub num_heads: usize,
    pub num_rows: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_seed: Option<u64>,
    pub layers: Vec<LayerTrace>,
}

impl TraceFile {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Schema("trace has no layers".into()));
        }
        let count = self.layers[0].predictions.len();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.predictions.len() != count {
                return Err(Error::Schema(format!(
                    "trace layer {}: expected {count} predictions, got {}",
                    i + 1,
                    layer.predictions.len()
                )));
            }
            for (pi, p) in layer.predictions.iter().enumerate() {
                validate_prediction(p, self.num_rows)
                    .map_err(|e| Error::Schema(format!("trace layer {} entry {pi}: {e}", i + 1)))?;
            }
        }
        Ok(())
    }
}

/// One layer of an assignment report: the full positive records plus how many
/// anchors were negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentLayerReport {
    pub layer: usize,
    pub positives: Vec<PositiveRecord>,
    pub negatives: usize,
}

/// Assignment outcome for every decoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentReport {
    pub ota: OtaConfig,
    pub layers: Vec<AssignmentLayerReport>,
}

impl AssignmentReport {
    pub fn new(ota: OtaConfig, assignments: &[LayerAssignment]) -> Self {
        AssignmentReport {
            ota,
            layers: assignments
                .iter()
                .map(|a| AssignmentLayerReport {
                    layer: a.layer,
                    positives: a.positives.clone(),
                    negatives: a.negatives.len(),
                })
                .collect(),
        }
    }
}

/// Loss evaluation with the weights that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub weights: LossWeights,
    pub cls: f64,
    pub reg: f64,
    pub seg: f64,
    pub total: f64,
    pub per_layer: Vec<LayerLossEntry>,
}

impl LossReport {
    pub fn new(weights: LossWeights, b: LossBreakdown) -> Self {
        LossReport {
            weights,
            cls: b.cls,
            reg: b.reg,
            seg: b.seg,
            total: b.total,
            per_layer: b.per_layer,
        }
    }
}

/// Counts and derived metrics for one evaluation bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBucket {
    pub images: u64,
    #[serde(flatten)]
    pub counts: EvalCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvalBucket {
    pub fn new(images: u64, counts: EvalCounts) -> Self {
        EvalBucket {
            images,
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
        }
    }
}

/// Detection metrics report; `matching` names the pairing criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub matching: String,
    pub liou_threshold: f64,
    pub score_threshold: f64,
    #[serde(flatten)]
    pub overall: EvalBucket,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_category: BTreeMap<String, EvalBucket>,
}

/// Scalar metadata of a weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsMeta {
    pub num_layers: usize,
    pub num_heads: usize,
    pub dim: usize,
    pub num_rows: usize,
    pub temperature: f64,
}

/// One named tensor: explicit shape plus row-major data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Decoder weights as a flat map of named tensors plus scalar metadata.
/// Tensor names follow `module.submodule.{weight|bias|gamma|beta}` with
/// decoder layers numbered from 1 (e.g. `layer1.self_attn.wq.weight`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub meta: WeightsMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn put_linear(map: &mut BTreeMap<String, Tensor>, prefix: &str, lin: &Linear) {
    map.insert(
        format!("{prefix}.weight"),
        Tensor {
            shape: vec![lin.out_dim, lin.in_dim],
            data: lin.weight.clone(),
        },
    );
    map.insert(
        format!("{prefix}.bias"),
        Tensor {
            shape: vec![lin.out_dim],
            data: lin.bias.clone(),
        },
    );
}

fn put_mlp(map: &mut BTreeMap<String, Tensor>, prefix: &str, mlp: &Mlp) {
    for (i, layer) in mlp.layers.iter().enumerate() {
        put_linear(map, &format!("{prefix}.{i}"), layer);
    }
}

fn put_norm(map: &mut BTreeMap<String, Tensor>, prefix: &str, ln: &LayerNorm) {
    map.insert(
        format!("{prefix}.gamma"),
        Tensor {
            shape: vec![ln.gamma.len()],
            data: ln.gamma.clone(),
        },
    );
    map.insert(
        format!("{prefix}.beta"),
        Tensor {
            shape: vec![ln.beta.len()],
            data: ln.beta.clone(),
        },
    );
}

fn put_attention(map: &mut BTreeMap<String, Tensor>, prefix: &str, aw: &AttentionWeights) {
    put_linear(map, &format!("{prefix}.wq"), &aw.wq);
    put_linear(map, &format!("{prefix}.wk"), &aw.wk);
    put_linear(map, &format!("{prefix}.wv"), &aw.wv);
    put_linear(map, &format!("{prefix}.wo"), &aw.wo);
}

fn take(map: &mut BTreeMap<String, Tensor>, key: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let t = map
        .remove(key)
        .ok_or_else(|| Error::Schema(format!("missing tensor '{key}'")))?;
    if t.shape != shape {
        return Err(Error::Schema(format!(
            "tensor '{key}': expected shape {shape:?}, got {:?}",
            t.shape
        )));
    }
    let expect: usize = shape.iter().product();
    if t.data.len() != expect {
        return Err(Error::Schema(format!(
            "tensor '{key}': shape {shape:?} needs {expect} values, got {}",
            t.data.len()
        )));
    }
    if t.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Schema(format!("tensor '{key}': non-finite value")));
    }
    Ok(t.data)
}

fn take_linear(map: &mut BTreeMap<String, Tensor>, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
    Ok(Linear {
        in_dim,
        out_dim,
        weight: take(map, &format!("{prefix}.weight"), &[out_dim, in_dim])?,
        bias: take(map, &format!("{prefix}.bias"), &[out_dim])?,
    })
}

fn take_mlp(map: &mut BTreeMap<String, Tensor>, prefix: &str, dims: &[usize]) -> Result<Mlp> {
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| take_linear(map, &format!("{prefix}.{i}"), w[0], w[1]))
        .collect::<Result<Vec<_>>>()?;
    Ok(Mlp { layers })
}

fn take_norm(map: &mut BTreeMap<String, Tensor>, prefix: &str, dim: usize) -> Result<LayerNorm> {
    Ok(LayerNorm {
        gamma: take(map, &format!("{prefix}.gamma"), &[dim])?,
        beta: take(map, &format!("{prefix}.beta"), &[dim])?,
        eps: 1e-5,
    })
}

fn take_attention(
    map: &mut BTreeMap<String, Tensor>,
    prefix: &str,
    q_in: usize,
    k_in: usize,
    dim: usize,
) -> Result<AttentionWeights> {
    Ok(AttentionWeights {
        wq: take_linear(map, &format!("{prefix}.wq"), q_in, dim)?,
        wk: take_linear(map, &format!("{prefix}.wk"), k_in, dim)?,
        wv: take_linear(map, &format!("{prefix}.wv"), dim, dim)?,
        wo: take_linear(map, &format!("{prefix}.wo"), dim, dim)?,
    })
}

impl WeightsFile {
    pub fn from_weights(w: &DecoderWeights) -> Self {
        let mut tensors = BTreeMap::new();
        put_mlp(&mut tensors, "encoding.loe_mlp", &w.encoding.loe_mlp);
        put_mlp(&mut tensors, "encoding.query_mlp", &w.encoding.query_mlp);
        for (i, lw) in w.layers.iter().enumerate() {
            let p = format!("layer{}", i + 1);
            put_attention(&mut tensors, &format!("{p}.self_attn"), &lw.self_attn);
            put_attention(&mut tensors, &format!("{p}.cross_attn"), &lw.cross_attn);
            put_norm(&mut tensors, &format!("{p}.norm_self"), &lw.norm_self);
            put_norm(&mut tensors, &format!("{p}.norm_cross"), &lw.norm_cross);
            put_norm(&mut tensors, &format!("{p}.norm_ffn"), &lw.norm_ffn);
            put_mlp(&mut tensors, &format!("{p}.ffn"), &lw.ffn);
            put_mlp(&mut tensors, &format!("{p}.cls_head"), &lw.cls_head);
            put_mlp(&mut tensors, &format!("{p}.reg_head"), &lw.reg_head);
            put_mlp(&mut tensors, &format!("{p}.offset_head"), &lw.offset_head);
            put_mlp(&mut tensors, &format!("{p}.update_head"), &lw.update_head);
        }
        WeightsFile {
            meta: WeightsMeta {
                num_layers: w.num_layers(),
                num_heads: w.num_heads,
                dim: w.dim(),
                num_rows: w.num_rows,
                temperature: w.encoding_cfg.temperature,
            },
            tensors,
        }
    }

    /// Rebuild decoder weights, rejecting missing, extra, misshapen or
    /// non-finite tensors.
    pub fn to_weights(&self) -> Result<DecoderWeights> {
        let m = &self.meta;
        let d = m.dim;
        let z = m.num_rows;
        let encoding_cfg = EncodingConfig::new(d, m.temperature)
            .map_err(|e| Error::Schema(format!("bad weights meta: {e}")))?;
        if m.num_layers == 0 {
            return Err(Error::Schema("weights meta: num_layers must be positive".into()));
        }
        if m.num_heads == 0 || d % m.num_heads != 0 {
            return Err(Error::Schema(format!(
                "weights meta: head count {} must divide dim {d}",
                m.num_heads
            )));
        }
        if z < 2 {
            return Err(Error::Schema(format!("weights meta: num_rows must be >= 2, got {z}")));
        }
        let mut map = self.tensors.clone();
        let encoding = EncodingWeights {
            loe_mlp: take_mlp(&mut map, "encoding.loe_mlp", &[z, z, 1])?,
            query_mlp: take_mlp(&mut map, "encoding.query_mlp", &[2 * d, d, d])?,
        };
        let mut layers = Vec::with_capacity(m.num_layers);
        for i in 0..m.num_layers {
            let p = format!("layer{}", i + 1);
            layers.push(DecoderLayerWeights {
                self_attn: take_attention(&mut map, &format!("{p}.self_attn"), d, d, d)?,
                cross_attn: take_attention(&mut map, &format!("{p}.cross_attn"), 2 * d, 2 * d, d)?,
                norm_self: take_norm(&mut map, &format!("{p}.norm_self"), d)?,
                norm_cross: take_norm(&mut map, &format!("{p}.norm_cross"), d)?,
                norm_ffn: take_norm(&mut map, &format!("{p}.norm_ffn"), d)?,
                ffn: take_mlp(&mut map, &format!("{p}.ffn"), &[d, 4 * d, d])?,
                cls_head: take_mlp(&mut map, &format!("{p}.cls_head"), &[d, d, 1])?,
                reg_head: take_mlp(&mut map, &format!("{p}.reg_head"), &[d, d, 4])?,
                offset_head: take_mlp(&mut map, &format!("{p}.offset_head"), &[d, d, z])?,
                update_head: take_mlp(&mut map, &format!("{p}.update_head"), &[d, d, 3 + z])?,
            });
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Schema(format!(
                "unexpected tensor '{extra}' ({} extra in total)",
                map.len()
            )));
        }
        let weights = DecoderWeights {
            num_heads: m.num_heads,
            num_rows: z,
            encoding_cfg,
            encoding,
            layers,
        };
        weights.validate()?;
        Ok(weights)
    }
}

/// Render polylines in the plain-text lane format: one lane per line as
/// `x y` pairs in image coordinates (y grows downward from the top edge),
/// listed bottom row first. Lanes with no valid rows are skipped.
pub fn polylines_to_lines_txt(lanes: &[LanePolyline], geo: &GeometryConfig) -> String {
    let rows = geo.sample_rows();
    let mut out = String::new();
    for lane in lanes {
        let mut first = true;
        for i in 0..geo.num_rows.min(lane.valid.len()) {
            if lane.valid[i] {
                if !first {
                    out.push(' ');
                }
                out.push_str(&format!("{:.4} {:.4}", lane.xs[i], geo.image_height - rows[i]));
                first = false;
            }
        }
        if !first {
            out.push('\n');
        }
    }
    out
}

/// Parse the plain-text lane format and resample each lane onto the row grid.
///
/// Each non-empty line holds `x y` pairs in image coordinates. Points are
/// flipped to bottom-up y, sorted, deduplicated, and linearly interpolated at
/// every row ordinate the lane covers; rows outside the lane's vertical span
/// stay invalid, as do samples outside `[0, width]`. Lanes with fewer than two
/// distinct points are skipped.
pub fn parse_lines_txt(text: &str, geo: &GeometryConfig) -> Result<Vec<LanePolyline>> {
    let rows = geo.sample_rows();
    let mut lanes = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Schema(format!("line {}: bad number '{t}': {e}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if toks.len() % 2 != 0 {
            return Err(Error::Schema(format!(
                "line {}: odd number of coordinates ({})",
                lineno + 1,
                toks.len()
            )));
        }
        if toks.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("line {}: non-finite coordinate", lineno + 1)));
        }
        let mut pts: Vec<(f64, f64)> = toks
            .chunks(2)
            .map(|c| (c[0], geo.image_height - c[1]))
            .collect();
        pts.sort_by(|a, b| a.1.total_cmp(&b.1));
        pts.dedup_by(|a, b| a.1 == b.1);
        if pts.len() < 2 {
            continue;
        }
        let (ymin, ymax) = (pts[0].1, pts[pts.len() - 1].1);
        let mut xs = vec![0.0; geo.num_rows];
        let mut valid = vec![false; geo.num_rows];
        for (i, &y) in rows.iter().enumerate() {
            if y < ymin - 1e-9 || y > ymax + 1e-9 {
                continue;
            }
            let j = pts.partition_point(|p| p.1 < y);
            let x = if j == 0 {
                pts[0].0
            } else if j >= pts.len() {
                pts[pts.len() - 1].0
            } else {
                let (x0, y0) = pts[j - 1];
                let (x1, y1) = pts[j];
                x0 + (x1 - x0) * (y - y0) / (y1 - y0)
            };
            xs[i] = x;
            valid[i] = (0.0..=geo.image_width).contains(&x);
        }
        if valid.iter().any(|v| *v) {
            lanes.push(LanePolyline { xs, valid });
        }
    }
    Ok(lanes)
}
