//! Deterministic desk-scale engine for anchor-based lane detection.
//!
//! The crate implements the full mathematical stack of a one-to-several
//! lane-detection transformer in pure scalar `f64`:
//!
//! - [`geometry`]: row-grid lane anchors, polylines, and line IOU (LIOU);
//! - [`encoding`]: sinusoidal scalar encodings, lane offset embeddings and
//!   positional queries;
//! - [`decoder`]: a forward-only refinement decoder with multi-head attention
//!   whose reductions run in a canonical order, making outputs bitwise
//!   reproducible and permutation-equivariant;
//! - [`assignment`]: OTA-style dynamic-k one-to-many assignment, a Hungarian
//!   solver with deterministic tie-breaking, and layer-wise soft labels;
//! - [`losses`]: quality focal classification, LIOU + smooth-L1 regression,
//!   and weighted totals;
//! - [`evaluation`]: LIOU-matched precision/recall/F1;
//! - [`simgen`]: seeded synthetic scenes and noisy predictions;
//! - [`formats`]: JSON schemas for scenes, traces, reports and weights, plus
//!   the plain-text lane format.
//!
//! Everything is deterministic: no global RNG, no threads, no platform
//! intrinsics; equal inputs give bitwise-equal outputs.

pub mod assignment;
pub mod decoder;
pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod formats;
pub mod geometry;
pub mod linalg;
pub mod losses;
pub mod simgen;

pub use assignment::{
    dynamic_k, focal_cost, hungarian, layer_soft_labels, liou_matrix, one_to_several,
    ota_assign, ota_cost_matrix, HungarianResult, LayerAssignment, OtaConfig, PositiveRecord,
};
pub use decoder::{
    decoder_forward, forward_with_probes, initial_anchors, update_anchor, DecoderWeights,
    FeatureMap, LayerTrace, Prediction,
};
pub use encoding::{pe_scalar, positional_query, EncodingConfig, EncodingWeights};
pub use error::{Error, Result};
pub use evaluation::{aggregate, f1_score, match_image, EvalConfig, EvalCounts, ScoredLane};
pub use formats::{
    parse_lines_txt, polylines_to_lines_txt, read_json, write_json, AssignmentReport, EvalBucket,
    EvalReport, LossReport, SceneFile, TraceFile, WeightsFile,
};
pub use geometry::{
    anchor_to_polyline, cost_components, line_iou, GeometryConfig, GroundTruthLane, LaneAnchor,
    LanePolyline,
};
pub use losses::{
    compute_losses, focal_term, focal_term_derivative, smooth_l1, total_loss, LossBreakdown,
    LossWeights,
};
pub use simgen::{gen_scene, perfect_predictions, perturb, NoiseSpec, SceneSpec};
