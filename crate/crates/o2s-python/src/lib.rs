//! Python bindings for the lane-detection engine.
//!
//! Scalar operations take and return native Python values; pipeline
//! operations exchange the same JSON documents the CLI reads and writes
//! (scene, trace, and report schemas), so results can be mixed freely
//! between the two front ends. Engine errors become `ValueError`s.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use o2s_core::assignment::OtaConfig;
use o2s_core::decoder::{decoder_forward, initial_anchors, DecoderWeights, FeatureMap, LayerTrace};
use o2s_core::encoding::EncodingConfig;
use o2s_core::evaluation::{match_image, EvalConfig, ScoredLane};
use o2s_core::formats::{AssignmentReport, EvalBucket, EvalReport, LossReport, SceneFile, TraceFile};
use o2s_core::geometry::{anchor_to_polyline, GeometryConfig, LanePolyline};
use o2s_core::losses::{compute_losses, LossWeights};
use o2s_core::simgen::{gen_scene, perfect_predictions, perturb, NoiseSpec, SceneSpec};

fn to_py(e: o2s_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(format!("json error: {e}"))
}

fn geometry(width: f64, height: f64, rows: usize, radius: f64) -> PyResult<GeometryConfig> {
    GeometryConfig::new(width, height, rows, radius).map_err(to_py)
}

/// Row ordinates of the sampling grid, bottom row first.
#[pyfunction]
#[pyo3(signature = (width = 800.0, height = 320.0, rows = 72, radius = 15.0))]
fn sample_rows(width: f64, height: f64, rows: usize, radius: f64) -> PyResult<Vec<f64>> {
    Ok(geometry(width, height, rows, radius)?.sample_rows())
}

/// Sinusoidal encoding of one scalar: `dim/2` sine/cosine pairs.
#[pyfunction]
#[pyo3(signature = (value, dim, temperature = 10000.0))]
fn pe_scalar(value: f64, dim: usize, temperature: f64) -> PyResult<Vec<f64>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(PyValueError::new_err("dim must be even and at least 2"));
    }
    if !(temperature > 1.0) {
        return Err(PyValueError::new_err("temperature must exceed 1"));
    }
    Ok(o2s_core::encoding::pe_scalar(value, dim, temperature))
}

/// Line IOU between two lanes sampled on the same row grid.
#[pyfunction]
#[pyo3(signature = (xs_a, valid_a, xs_b, valid_b, radius = 15.0, width = 800.0, height = 320.0))]
fn line_iou(
    xs_a: Vec<f64>,
    valid_a: Vec<bool>,
    xs_b: Vec<f64>,
    valid_b: Vec<bool>,
    radius: f64,
    width: f64,
    height: f64,
) -> PyResult<f64> {
    let rows = xs_a.len();
    let geo = geometry(width, height, rows, radius)?;
    let a = LanePolyline { xs: xs_a, valid: valid_a };
    let b = LanePolyline { xs: xs_b, valid: valid_b };
    if a.valid.len() != rows || b.xs.len() != rows || b.valid.len() != rows {
        return Err(PyValueError::new_err("all four arrays must share one length"));
    }
    o2s_core::geometry::line_iou(&a, &b, &geo).map_err(to_py)
}

/// Minimum-cost assignment; returns (pairs, total).
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    let result = o2s_core::assignment::hungarian(&cost).map_err(to_py)?;
    Ok((result.pairs, result.total))
}

/// Dynamic positive count for one ground truth's LIOU column.
#[pyfunction]
#[pyo3(signature = (lious, t_min = 2, top_q = 4, k_max = 8))]
fn dynamic_k(lious: Vec<f64>, t_min: usize, top_q: usize, k_max: usize) -> usize {
    let cfg = OtaConfig {
        t_min,
        top_q,
        k_max,
        ..OtaConfig::default()
    };
    o2s_core::assignment::dynamic_k(&lious, &cfg)
}

/// Quality focal term `-|q - p|^gamma (q ln p + (1 - q) ln(1 - p))`.
#[pyfunction]
#[pyo3(signature = (p, q, gamma = 2.0))]
fn focal_term(p: f64, q: f64, gamma: f64) -> PyResult<f64> {
    o2s_core::losses::focal_term(p, q, gamma).map_err(to_py)
}

/// Derivative of `focal_term` with respect to `p`.
#[pyfunction]
#[pyo3(signature = (p, q, gamma = 2.0))]
fn focal_term_derivative(p: f64, q: f64, gamma: f64) -> PyResult<f64> {
    o2s_core::losses::focal_term_derivative(p, q, gamma).map_err(to_py)
}

/// Smooth L1: quadratic inside `beta`, linear outside.
#[pyfunction]
#[pyo3(signature = (d, beta = 1.0))]
fn smooth_l1(d: f64, beta: f64) -> f64 {
    o2s_core::losses::smooth_l1(d, beta)
}

/// Harmonic mean of precision and recall (0 when their sum is 0).
#[pyfunction]
fn f1_score(precision: f64, recall: f64) -> f64 {
    o2s_core::evaluation::f1_score(precision, recall)
}

/// Generate a synthetic scene; returns the scene JSON document.
///
/// `preds` is "none", "perfect", or "noisy"; noisy predictions use the
/// x_sigma/theta_sigma/drop_prob/clutter parameters.
#[pyfunction]
#[pyo3(signature = (
    seed,
    lanes = 3,
    preds = "none",
    pred_layers = 6,
    width = 800.0,
    height = 320.0,
    rows = 72,
    radius = 15.0,
    curvature = (-0.08, 0.08),
    x_sigma = 0.0,
    theta_sigma = 0.0,
    drop_prob = 0.0,
    clutter = 0,
    category = None,
))]
#[allow(clippy::too_many_arguments)]
fn generate_scene(
    seed: u64,
    lanes: usize,
    preds: &str,
    pred_layers: usize,
    width: f64,
    height: f64,
    rows: usize,
    radius: f64,
    curvature: (f64, f64),
    x_sigma: f64,
    theta_sigma: f64,
    drop_prob: f64,
    clutter: usize,
    category: Option<String>,
) -> PyResult<String> {
    let geometry = geometry(width, height, rows, radius)?;
    let spec = SceneSpec {
        seed,
        num_lanes: lanes,
        curvature,
        geometry: geometry.clone(),
        noise: NoiseSpec {
            x_sigma,
            theta_sigma,
            drop_prob,
            clutter,
        },
    };
    spec.validate().map_err(to_py)?;
    let gts = gen_scene(&spec).map_err(to_py)?;
    let layer = match preds {
        "none" => None,
        "perfect" => Some(perfect_predictions(&gts, &geometry)),
        "noisy" => Some(perturb(&gts, &spec).map_err(to_py)?),
        other => {
            return Err(PyValueError::new_err(format!(
                "preds must be none, perfect or noisy, got {other:?}"
            )))
        }
    };
    let scene = SceneFile {
        geometry,
        category,
        gts,
        predictions: layer.map(|p| vec![p; pred_layers.max(1)]),
    };
    scene.validate().map_err(to_py)?;
    serde_json::to_string_pretty(&scene).map_err(json_err)
}

fn parse_scene(scene_json: &str) -> PyResult<SceneFile> {
    let scene: SceneFile = serde_json::from_str(scene_json).map_err(json_err)?;
    scene.validate().map_err(to_py)?;
    Ok(scene)
}

/// Per-layer predictions: an explicit trace document wins, otherwise the
/// scene's stored predictions.
fn traces_for(scene: &SceneFile, trace_json: Option<&str>) -> PyResult<Vec<LayerTrace>> {
    match trace_json {
        Some(text) => {
            let trace: TraceFile = serde_json::from_str(text).map_err(json_err)?;
            trace.validate().map_err(to_py)?;
            if trace.num_rows != scene.geometry.num_rows {
                return Err(PyValueError::new_err(format!(
                    "trace has {} rows but the scene has {}",
                    trace.num_rows, scene.geometry.num_rows
                )));
            }
            Ok(trace.layers)
        }
        None => {
            let layers = scene.predictions.as_ref().ok_or_else(|| {
                PyValueError::new_err("scene stores no predictions; pass trace_json")
            })?;
            Ok(layers
                .iter()
                .enumerate()
                .map(|(i, preds)| LayerTrace::from_predictions(i + 1, preds.clone()))
                .collect())
        }
    }
}

/// Run the refinement decoder over a scene; returns the trace JSON document.
#[pyfunction]
#[pyo3(signature = (
    scene_json,
    weights_seed = 42,
    anchors = 192,
    layers = 6,
    dim = 256,
    heads = 8,
    temperature = 10000.0,
    fmap = "pattern",
    fmap_seed = 7,
    fmap_height = 6,
    fmap_width = 15,
))]
#[allow(clippy::too_many_arguments)]
fn forward_scene(
    scene_json: &str,
    weights_seed: u64,
    anchors: usize,
    layers: usize,
    dim: usize,
    heads: usize,
    temperature: f64,
    fmap: &str,
    fmap_seed: u64,
    fmap_height: usize,
    fmap_width: usize,
) -> PyResult<String> {
    let scene = parse_scene(scene_json)?;
    let z = scene.geometry.num_rows;
    let cfg = EncodingConfig::new(dim, temperature).map_err(to_py)?;
    let weights = DecoderWeights::seeded(weights_seed, layers, heads, z, cfg).map_err(to_py)?;
    let fmap = match fmap {
        "pattern" => FeatureMap::patterned(fmap_height, fmap_width, dim),
        "random" => FeatureMap::seeded_random(fmap_height, fmap_width, dim, fmap_seed),
        other => {
            return Err(PyValueError::new_err(format!(
                "fmap must be pattern or random, got {other:?}"
            )))
        }
    };
    if anchors == 0 {
        return Err(PyValueError::new_err("anchors must be positive"));
    }
    let traces = decoder_forward(&initial_anchors(anchors, z), &fmap, &weights).map_err(to_py)?;
    let trace = TraceFile {
        dim,
        num_heads: heads,
        num_rows: z,
        weights_seed: Some(weights_seed),
        layers: traces,
    };
    serde_json::to_string_pretty(&trace).map_err(json_err)
}

/// One-to-several label assignment; returns the report JSON document.
#[pyfunction]
#[pyo3(signature = (
    scene_json,
    trace_json = None,
    w_sim = 3.0,
    w_cls = 1.0,
    t_min = 2,
    top_q = 4,
    k_max = 8,
    focal_gamma = 2.0,
    focal_alpha = 0.25,
))]
#[allow(clippy::too_many_arguments)]
fn assign_scene(
    scene_json: &str,
    trace_json: Option<&str>,
    w_sim: f64,
    w_cls: f64,
    t_min: usize,
    top_q: usize,
    k_max: usize,
    focal_gamma: f64,
    focal_alpha: f64,
) -> PyResult<String> {
    let scene = parse_scene(scene_json)?;
    let traces = traces_for(&scene, trace_json)?;
    let cfg = OtaConfig {
        w_sim,
        w_cls,
        t_min,
        top_q,
        k_max,
        focal_gamma,
        focal_alpha,
    };
    let layers = o2s_core::assignment::one_to_several(&traces, &scene.gts, &cfg, &scene.geometry)
        .map_err(to_py)?;
    serde_json::to_string_pretty(&AssignmentReport::new(cfg, &layers)).map_err(json_err)
}

/// Classification + regression losses; returns the report JSON document.
#[pyfunction]
#[pyo3(signature = (
    scene_json,
    trace_json = None,
    seg = 0.0,
    lambda_cls = 2.0,
    lambda_iou = 2.0,
    lambda_l1 = 0.3,
    lambda_seg = 1.0,
    cls_gamma = 2.0,
    smooth_l1_beta = 1.0,
))]
#[allow(clippy::too_many_arguments)]
fn loss_scene(
    scene_json: &str,
    trace_json: Option<&str>,
    seg: f64,
    lambda_cls: f64,
    lambda_iou: f64,
    lambda_l1: f64,
    lambda_seg: f64,
    cls_gamma: f64,
    smooth_l1_beta: f64,
) -> PyResult<String> {
    let scene = parse_scene(scene_json)?;
    let traces = traces_for(&scene, trace_json)?;
    let weights = LossWeights {
        lambda_cls,
        lambda_iou,
        lambda_l1,
        lambda_seg,
        focal_gamma: cls_gamma,
        smooth_l1_beta,
    };
    let assignments = o2s_core::assignment::one_to_several(
        &traces,
        &scene.gts,
        &OtaConfig::default(),
        &scene.geometry,
    )
    .map_err(to_py)?;
    let breakdown =
        compute_losses(&assignments, &traces, &scene.gts, &weights, seg).map_err(to_py)?;
    serde_json::to_string_pretty(&LossReport::new(weights, breakdown)).map_err(json_err)
}

/// Precision/recall/F1 of a scene's stored predictions; returns the report
/// JSON document. `layer` is 1-based and defaults to the last layer.
#[pyfunction]
#[pyo3(signature = (scene_json, layer = None, liou_threshold = 0.5, score_threshold = 0.5))]
fn eval_scene(
    scene_json: &str,
    layer: Option<usize>,
    liou_threshold: f64,
    score_threshold: f64,
) -> PyResult<String> {
    let scene = parse_scene(scene_json)?;
    let geo = &scene.geometry;
    let layers = scene
        .predictions
        .as_ref()
        .ok_or_else(|| PyValueError::new_err("scene stores no predictions"))?;
    let idx = layer.unwrap_or(layers.len());
    if idx == 0 || idx > layers.len() {
        return Err(PyValueError::new_err(format!(
            "layer {idx} out of range: the scene has {} prediction layers",
            layers.len()
        )));
    }
    let scored: Vec<ScoredLane> = layers[idx - 1]
        .iter()
        .map(|p| ScoredLane {
            score: p.score,
            polyline: anchor_to_polyline(&p.geometry(), geo).unwrap_or(LanePolyline {
                xs: vec![0.0; geo.num_rows],
                valid: vec![false; geo.num_rows],
            }),
        })
        .collect();
    let gt_polys: Vec<LanePolyline> = scene.gts.iter().map(|gt| gt.polyline.clone()).collect();
    let cfg = EvalConfig {
        liou_threshold,
        score_threshold,
    };
    let counts = match_image(&scored, &gt_polys, &cfg, geo).map_err(to_py)?;
    let mut per_category = std::collections::BTreeMap::new();
    if let Some(cat) = &scene.category {
        per_category.insert(cat.clone(), EvalBucket::new(1, counts));
    }
    let report = EvalReport {
        matching: "liou".into(),
        liou_threshold,
        score_threshold,
        overall: EvalBucket::new(1, counts),
        per_category,
    };
    serde_json::to_string_pretty(&report).map_err(json_err)
}

#[pymodule]
fn o2s(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(sample_rows, m)?)?;
    m.add_function(wrap_pyfunction!(pe_scalar, m)?)?;
    m.add_function(wrap_pyfunction!(line_iou, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(dynamic_k, m)?)?;
    m.add_function(wrap_pyfunction!(focal_term, m)?)?;
    m.add_function(wrap_pyfunction!(focal_term_derivative, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_l1, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(forward_scene, m)?)?;
    m.add_function(wrap_pyfunction!(assign_scene, m)?)?;
    m.add_function(wrap_pyfunction!(loss_scene, m)?)?;
    m.add_function(wrap_pyfunction!(eval_scene, m)?)?;
    Ok(())
}
