//! Sinusoidal encodings and the dynamic anchor-based positional query.
//!
//! A scalar in [0, 1] is scaled by 2π and expanded into interleaved sin/cos
//! pairs whose frequencies fall off geometrically, so the base frequency spans
//! exactly one period over the unit domain. An anchor is summarized by the
//! quadruple (start_x, start_y, theta, LOE) where LOE is a learned scalar
//! embedding of its per-row offsets; encoding each scalar at width D/2 and
//! passing the concatenation through a two-layer rectifier MLP yields the
//! positional query that drives decoder attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LaneAnchor;
use crate::linalg::Mlp;

/// Width and frequency base for all sinusoidal encodings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    /// Model width D. Four D/2-wide scalar encodings feed the query MLP and
    /// four D/4-wide ones form the cross-attention key/query position channel,
    /// so D must be divisible by 8.
    pub dim: usize,
    /// Frequency base; pair k uses frequency `temperature^(-2k/half_dim)`.
    pub temperature: f64,
}

impl EncodingConfig {
    pub fn new(dim: usize, temperature: f64) -> Result<Self> {
        if dim == 0 || dim % 8 != 0 {
            return Err(Error::InvalidConfig(format!(
                "encoding dim must be a positive multiple of 8, got {dim}"
            )));
        }
        if !(temperature > 1.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must exceed 1, got {temperature}"
            )));
        }
        Ok(EncodingConfig { dim, temperature })
    }
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            dim: 256,
            temperature: 10000.0,
        }
    }
}

/// Interleaved sin/cos encoding of one scalar.
///
/// Output length is `half_dim` (must be even): pair `k` holds
/// `sin(2π v f_k), cos(2π v f_k)` with `f_k = temperature^(-2k/half_dim)`.
pub fn pe_scalar(v: f64, half_dim: usize, temperature: f64) -> Vec<f64> {
    assert!(half_dim >= 2 && half_dim % 2 == 0, "half_dim must be even and >= 2");
    assert!(temperature > 1.0, "temperature must exceed 1");
    let w = v * std::f64::consts::TAU;
    let mut out = Vec::with_capacity(half_dim);
    for k in 0..half_dim / 2 {
        let freq = temperature.powf(-2.0 * k as f64 / half_dim as f64);
        let angle = w * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// Learned pieces of the encoding stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingWeights {
    /// Offsets (length z) to one scalar: layers [z, z, 1].
    pub loe_mlp: Mlp,
    /// Concatenated scalar encodings (2D) to the positional query (D):
    /// layers [2D, D, D].
    pub query_mlp: Mlp,
}

impl EncodingWeights {
    pub fn seeded(seed: u64, num_rows: usize, cfg: &EncodingConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncodingWeights {
            loe_mlp: Mlp::seeded(&mut rng, &[num_rows, num_rows, 1]),
            query_mlp: Mlp::seeded(&mut rng, &[2 * cfg.dim, cfg.dim, cfg.dim]),
        }
    }

    pub fn validate(&self, num_rows: usize, cfg: &EncodingConfig) -> Result<()> {
        if self.loe_mlp.in_dim() != num_rows || self.loe_mlp.out_dim() != 1 {
            return Err(Error::shape(
                "loe_mlp",
                format!("{num_rows} -> 1"),
                format!("{} -> {}", self.loe_mlp.in_dim(), self.loe_mlp.out_dim()),
            ));
        }
        if self.query_mlp.in_dim() != 2 * cfg.dim || self.query_mlp.out_dim() != cfg.dim {
            return Err(Error::shape(
                "query_mlp",
                format!("{} -> {}", 2 * cfg.dim, cfg.dim),
                format!("{} -> {}", self.query_mlp.in_dim(), self.query_mlp.out_dim()),
            ));
        }
        Ok(())
    }
}

/// Lane-offset embedding: collapse the per-row offsets to one scalar.
pub fn lane_offset_embedding(offsets: &[f64], weights: &EncodingWeights) -> Result<f64> {
    if offsets.len() != weights.loe_mlp.in_dim() {
        return Err(Error::shape("loe offsets", weights.loe_mlp.in_dim(), offsets.len()));
    }
    Ok(weights.loe_mlp.forward(offsets)?[0])
}

/// Anchor summary quadruple (start_x, start_y, theta, LOE).
pub fn anchor_embedding(anchor: &LaneAnchor, weights: &EncodingWeights) -> Result<[f64; 4]> {
    let loe = lane_offset_embedding(&anchor.offsets, weights)?;
    Ok([anchor.start_x, anchor.start_y, anchor.theta, loe])
}

/// Sinusoidal expansion of the anchor quadruple at `half_dim` per scalar.
pub fn embed_quadruple(q: &[f64; 4], half_dim: usize, cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * half_dim);
    for v in q {
        out.extend(pe_scalar(*v, half_dim, cfg.temperature));
    }
    out
}

/// Dynamic anchor-based positional query: PE the quadruple at D/2 per scalar
/// (2D total) and project to D through the query MLP.
pub fn positional_query(
    anchor: &LaneAnchor,
    weights: &EncodingWeights,
    cfg: &EncodingConfig,
) -> Result<Vec<f64>> {
    let quad = anchor_embedding(anchor, weights)?;
    let pe = embed_quadruple(&quad, cfg.dim / 2, cfg);
    weights.query_mlp.forward(&pe)
}

/// Per-cell positional encoding of a feature grid: the row coordinate encoded
/// at D/2 concatenated with the column coordinate at D/2, both normalized by
/// their grid extent. Returned row-major, one D-vector per cell.
pub fn feature_pe(height: usize, width: usize, cfg: &EncodingConfig) -> Vec<Vec<f64>> {
    let half = cfg.dim / 2;
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let row_enc = pe_scalar(r as f64 / height as f64, half, cfg.temperature);
        for c in 0..width {
            let mut cell = row_enc.clone();
            cell.extend(pe_scalar(c as f64 / width as f64, half, cfg.temperature));
            out.push(cell);
        }
    }
    out
}
