//! Forward-only refinement decoder over lane anchors.
//!
//! Each layer runs self-attention among the anchor queries (queries and keys
//! are content plus the dynamic positional query, values are content alone),
//! cross-attention into the feature grid (queries and keys carry a positional
//! channel, width 2D; values are the raw features), a rectifier FFN, and four
//! prediction heads. The anchor-update head feeds back additively into the
//! anchors, so layer r+1 sees refined anchors and freshly recomputed
//! positional queries.
//!
//! All attention reductions run in a canonical order (keys sorted by score,
//! ties by value slice) so outputs are bitwise reproducible and permuting the
//! anchors permutes the outputs bitwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{
    anchor_embedding, embed_quadruple, feature_pe, EncodingConfig, EncodingWeights,
};
use crate::error::{Error, Result};
use crate::geometry::LaneAnchor;
use crate::linalg::{sigmoid, LayerNorm, Linear, Mlp};

/// Dense feature grid standing in for the backbone + encoder output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Row-major `height * width` cells of `dim` values each.
    pub cells: Vec<f64>,
}

impl FeatureMap {
    pub fn cell(&self, idx: usize) -> &[f64] {
        &self.cells[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    /// Uniform random cells in [-1, 1), reproducible from the seed.
    pub fn seeded_random(height: usize, width: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = (0..height * width * dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        FeatureMap {
            height,
            width,
            dim,
            cells,
        }
    }

    /// Smooth analytic pattern; useful when a test wants structure instead of noise.
    pub fn patterned(height: usize, width: usize, dim: usize) -> Self {
        let mut cells = Vec::with_capacity(height * width * dim);
        for r in 0..height {
            for c in 0..width {
                for d in 0..dim {
                    let v = (0.37 * (r as f64 + 1.0)).sin() * (0.73 * (c as f64 + 1.0)).cos()
                        + 0.25 * (0.11 * (d as f64 + 1.0)).sin();
                    cells.push(v);
                }
            }
        }
        FeatureMap {
            height,
            width,
            dim,
            cells,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.dim == 0 {
            return Err(Error::InvalidConfig("feature map dims must be positive".into()));
        }
        if self.cells.len() != self.height * self.width * self.dim {
            return Err(Error::shape(
                "feature map cells",
                self.height * self.width * self.dim,
                self.cells.len(),
            ));
        }
        Ok(())
    }
}

/// One decoded lane hypothesis emitted by a decoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Foreground probability from the classification head, inside (0, 1).
    pub score: f64,
    pub start_x: f64,
    pub start_y: f64,
    pub theta: f64,
    pub length: f64,
    pub offsets: Vec<f64>,
    /// 1-based decoder layer that produced this prediction.
    pub layer: usize,
    /// Index of the anchor this prediction refines.
    pub anchor_index: usize,
}

impl Prediction {
    /// The prediction's geometry in anchor form.
    pub fn geometry(&self) -> LaneAnchor {
        LaneAnchor {
            start_x: self.start_x,
            start_y: self.start_y,
            theta: self.theta,
            length: self.length,
            offsets: self.offsets.clone(),
        }
    }
}

/// Output of one decoder layer: predictions plus the refined anchors the next
/// layer consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub predictions: Vec<Prediction>,
    pub anchors_after: Vec<LaneAnchor>,
}

impl LayerTrace {
    /// Wrap standalone predictions as a trace layer, reusing each prediction's
    /// own geometry as the refined anchor.
    pub fn from_predictions(layer: usize, predictions: Vec<Prediction>) -> Self {
        let anchors_after = predictions.iter().map(|p| p.geometry()).collect();
        LayerTrace {
            layer,
            predictions,
            anchors_after,
        }
    }
}

/// Projection set of one attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl AttentionWeights {
    fn seeded(rng: &mut ChaCha8Rng, q_in: usize, k_in: usize, dim: usize) -> Self {
        AttentionWeights {
            wq: Linear::seeded(rng, q_in, dim),
            wk: Linear::seeded(rng, k_in, dim),
            wv: Linear::seeded(rng, dim, dim),
            wo: Linear::seeded(rng, dim, dim),
        }
    }
}

/// Learned pieces of one decoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayerWeights {
    pub self_attn: AttentionWeights,
    pub cross_attn: AttentionWeights,
    pub norm_self: LayerNorm,
    pub norm_cross: LayerNorm,
    pub norm_ffn: LayerNorm,
    /// Content FFN [D, 4D, D].
    pub ffn: Mlp,
    /// One foreground logit.
    pub cls_head: Mlp,
    /// Raw (x, y, theta, length); squashed on emission.
    pub reg_head: Mlp,
    /// Per-row offsets, emitted raw.
    pub offset_head: Mlp,
    /// Anchor update (dx, dy, dtheta, per-row d-offsets).
    pub update_head: Mlp,
}

/// Full decoder parameterization, including the embedded encoding stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderWeights {
    pub num_heads: usize,
    pub num_rows: usize,
    pub encoding_cfg: EncodingConfig,
    pub encoding: EncodingWeights,
    pub layers: Vec<DecoderLayerWeights>,
}

impl DecoderWeights {
    pub fn dim(&self) -> usize {
        self.encoding_cfg.dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seeded(
        seed: u64,
        num_layers: usize,
        num_heads: usize,
        num_rows: usize,
        encoding_cfg: EncodingConfig,
    ) -> Result<Self> {
        let d = encoding_cfg.dim;
        if num_layers == 0 {
            return Err(Error::InvalidConfig("decoder needs at least one layer".into()));
        }
        if num_heads == 0 || d % num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "head count {num_heads} must divide model width {d}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoding = EncodingWeights {
            loe_mlp: Mlp::seeded(&mut rng, &[num_rows, num_rows, 1]),
            query_mlp: Mlp::seeded(&mut rng, &[2 * d, d, d]),
        };
        let layers = (0..num_layers)
            .map(|_| DecoderLayerWeights {
                self_attn: AttentionWeights::seeded(&mut rng, d, d, d),
                cross_attn: AttentionWeights::seeded(&mut rng, 2 * d, 2 * d, d),
                norm_self: LayerNorm::identity(d),
                norm_cross: LayerNorm::identity(d),
                norm_ffn: LayerNorm::identity(d),
                ffn: Mlp::seeded(&mut rng, &[d, 4 * d, d]),
                cls_head: Mlp::seeded(&mut rng, &[d, d, 1]),
                reg_head: Mlp::seeded(&mut rng, &[d, d, 4]),
                offset_head: Mlp::seeded(&mut rng, &[d, d, num_rows]),
                update_head: Mlp::seeded(&mut rng, &[d, d, 3 + num_rows]),
            })
            .collect();
        Ok(DecoderWeights {
            num_heads,
            num_rows,
            encoding_cfg,
            encoding,
            layers,
        })
    }

    /// Full shape audit; run after deserializing from a weights file.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.num_heads == 0 || d % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "head count {} must divide model width {d}",
                self.num_heads
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("decoder needs at least one layer".into()));
        }
        self.encoding.validate(self.num_rows, &self.encoding_cfg)?;
        let expect = |mlp: &Mlp, what: &str, in_dim: usize, out_dim: usize| -> Result<()> {
            if mlp.in_dim() != in_dim || mlp.out_dim() != out_dim {
                return Err(Error::shape(
                    what,
                    format!("{in_dim} -> {out_dim}"),
                    format!("{} -> {}", mlp.in_dim(), mlp.out_dim()),
                ));
            }
            for (i, l) in mlp.layers.iter().enumerate() {
                l.check_dims(&format!("{what} layer {i}"))?;
            }
            Ok(())
        };
        for (i, lw) in self.layers.iter().enumerate() {
            let attn = |aw: &AttentionWeights, what: &str, q_in: usize, k_in: usize| -> Result<()> {
                for (lin, name, in_dim) in [
                    (&aw.wq, "wq", q_in),
                    (&aw.wk, "wk", k_in),
                    (&aw.wv, "wv", d),
                    (&aw.wo, "wo", d),
                ] {
                    if lin.in_dim != in_dim || lin.out_dim != d {
                        return Err(Error::shape(
                            format!("layer {i} {what}.{name}"),
                            format!("{in_dim} -> {d}"),
                            format!("{} -> {}", lin.in_dim, lin.out_dim),
                        ));
                    }
                    lin.check_dims(&format!("layer {i} {what}.{name}"))?;
                }
                Ok(())
            };
            attn(&lw.self_attn, "self_attn", d, d)?;
            attn(&lw.cross_attn, "cross_attn", 2 * d, 2 * d)?;
            for (ln, name) in [
                (&lw.norm_self, "norm_self"),
                (&lw.norm_cross, "norm_cross"),
                (&lw.norm_ffn, "norm_ffn"),
            ] {
                if ln.gamma.len() != d || ln.beta.len() != d {
                    return Err(Error::shape(format!("layer {i} {name}"), d, ln.gamma.len()));
                }
            }
            expect(&lw.ffn, &format!("layer {i} ffn"), d, d)?;
            expect(&lw.cls_head, &format!("layer {i} cls_head"), d, 1)?;
            expect(&lw.reg_head, &format!("layer {i} reg_head"), d, 4)?;
            expect(&lw.offset_head, &format!("layer {i} offset_head"), d, self.num_rows)?;
            expect(&lw.update_head, &format!("layer {i} update_head"), d, 3 + self.num_rows)?;
        }
        Ok(())
    }
}

/// Attention output plus the softmax rows for inspection.
#[derive(Debug, Clone)]
pub struct AttentionResult {
    /// One D-vector per query.
    pub output: Vec<Vec<f64>>,
    /// `probs[head][query][key]`; every row sums to 1.
    pub probs: Vec<Vec<Vec<f64>>>,
}

/// Multi-head scaled dot-product attention with canonical reduction order.
///
/// For every head and query, key indices are sorted by (score, value slice)
/// before the softmax and the value-weighted sums run. The reduction order is
/// therefore a function of the key multiset, not of storage order, which makes
/// the output bitwise stable under permutations of the key/query lists.
fn attention(
    queries: &[Vec<f64>],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    w: &AttentionWeights,
    num_heads: usize,
) -> AttentionResult {
    let dim = w.wo.in_dim;
    let head_dim = dim / num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q_proj: Vec<Vec<f64>> = queries.iter().map(|q| w.wq.forward(q)).collect();
    let k_proj: Vec<Vec<f64>> = keys.iter().map(|k| w.wk.forward(k)).collect();
    let v_proj: Vec<Vec<f64>> = values.iter().map(|v| w.wv.forward(v)).collect();

    let nk = keys.len();
    let mut probs = vec![vec![vec![0.0; nk]; queries.len()]; num_heads];
    let mut merged = vec![vec![0.0; dim]; queries.len()];

    for h in 0..num_heads {
        let span = h * head_dim..(h + 1) * head_dim;
        for (qi, q) in q_proj.iter().enumerate() {
            let qh = &q[span.clone()];
            let mut scores = Vec::with_capacity(nk);
            for k in &k_proj {
                let kh = &k[span.clone()];
                let mut dot = 0.0;
                for (a, b) in qh.iter().zip(kh) {
                    dot += a * b;
                }
                scores.push(dot * scale);
            }

            // Canonical key order: by score, ties by the value slice; equal
            // (score, value) entries are interchangeable in every reduction.
            let mut order: Vec<usize> = (0..nk).collect();
            order.sort_by(|&a, &b| {
                scores[a].total_cmp(&scores[b]).then_with(|| {
                    let va = &v_proj[a][span.clone()];
                    let vb = &v_proj[b][span.clone()];
                    for (x, y) in va.iter().zip(vb) {
                        let c = x.total_cmp(y);
                        if c != std::cmp::Ordering::Equal {
                            return c;
                        }
                    }
                    std::cmp::Ordering::Equal
                })
            });

            let max = scores[*order.last().expect("attention requires at least one key")];
            let mut denom = 0.0;
            for &j in &order {
                denom += (scores[j] - max).exp();
            }
            for &j in &order {
                probs[h][qi][j] = (scores[j] - max).exp() / denom;
            }
            let out = &mut merged[qi][span.clone()];
            for &j in &order {
                let p = probs[h][qi][j];
                for (o, v) in out.iter_mut().zip(&v_proj[j][span.clone()]) {
                    *o += p * v;
                }
            }
        }
    }

    let output = merged.iter().map(|m| w.wo.forward(m)).collect();
    AttentionResult { output, probs }
}

/// Self-attention among anchor queries: queries and keys are content plus the
/// positional query, values are content alone.
pub fn self_attention(
    content: &[Vec<f64>],
    pos_query: &[Vec<f64>],
    w: &AttentionWeights,
    num_heads: usize,
) -> AttentionResult {
    let qk: Vec<Vec<f64>> = content
        .iter()
        .zip(pos_query)
        .map(|(c, p)| c.iter().zip(p).map(|(a, b)| a + b).collect())
        .collect();
    attention(&qk, &qk, content, w, num_heads)
}

/// Cross-attention from anchor queries into the feature grid. Queries are
/// Cat(content, anchor position encoding) and keys Cat(cell, cell position
/// encoding), both width 2D; values are the raw cells.
pub fn cross_attention(
    content: &[Vec<f64>],
    anchor_pe: &[Vec<f64>],
    cells: &[Vec<f64>],
    cell_pe: &[Vec<f64>],
    w: &AttentionWeights,
    num_heads: usize,
) -> AttentionResult {
    let queries: Vec<Vec<f64>> = content
        .iter()
        .zip(anchor_pe)
        .map(|(c, p)| {
            let mut q = c.clone();
            q.extend_from_slice(p);
            q
        })
        .collect();
    let keys: Vec<Vec<f64>> = cells
        .iter()
        .zip(cell_pe)
        .map(|(f, p)| {
            let mut k = f.clone();
            k.extend_from_slice(p);
            k
        })
        .collect();
    attention(&queries, &keys, cells, w, num_heads)
}

/// Additive anchor refinement: delta is (dx, dy, dtheta, per-row d-offsets);
/// length is not updated.
pub fn update_anchor(anchor: &LaneAnchor, delta: &[f64]) -> LaneAnchor {
    assert_eq!(
        delta.len(),
        3 + anchor.offsets.len(),
        "anchor update delta must be 3 + num_rows wide"
    );
    LaneAnchor {
        start_x: anchor.start_x + delta[0],
        start_y: anchor.start_y + delta[1],
        theta: anchor.theta + delta[2],
        length: anchor.length,
        offsets: anchor
            .offsets
            .iter()
            .zip(&delta[3..])
            .map(|(o, d)| o + d)
            .collect(),
    }
}

/// Attention rows recorded for one layer of a probed forward pass.
#[derive(Debug, Clone)]
pub struct LayerProbe {
    pub layer: usize,
    pub self_attn: Vec<Vec<Vec<f64>>>,
    pub cross_attn: Vec<Vec<Vec<f64>>>,
}

/// Decoder forward pass; see [`forward_with_probes`] for the instrumented form.
pub fn decoder_forward(
    anchors: &[LaneAnchor],
    fmap: &FeatureMap,
    weights: &DecoderWeights,
) -> Result<Vec<LayerTrace>> {
    Ok(forward_with_probes(anchors, fmap, weights)?.0)
}

/// Run the decoder and also return per-layer attention rows.
pub fn forward_with_probes(
    anchors: &[LaneAnchor],
    fmap: &FeatureMap,
    weights: &DecoderWeights,
) -> Result<(Vec<LayerTrace>, Vec<LayerProbe>)> {
    fmap.validate()?;
    weights.validate()?;
    let d = weights.dim();
    if fmap.dim != d {
        return Err(Error::shape("feature map dim", d, fmap.dim));
    }
    if anchors.is_empty() {
        return Err(Error::InvalidConfig("decoder needs at least one anchor".into()));
    }
    for a in anchors {
        if a.offsets.len() != weights.num_rows {
            return Err(Error::shape("anchor offsets", weights.num_rows, a.offsets.len()));
        }
    }

    let cfg = &weights.encoding_cfg;
    let cells: Vec<Vec<f64>> = (0..fmap.num_cells()).map(|i| fmap.cell(i).to_vec()).collect();
    let cell_pe = feature_pe(fmap.height, fmap.width, cfg);

    let mut current: Vec<LaneAnchor> = anchors.to_vec();
    let mut content = vec![vec![0.0; d]; anchors.len()];
    let mut traces = Vec::with_capacity(weights.num_layers());
    let mut probes = Vec::with_capacity(weights.num_layers());

    for (li, lw) in weights.layers.iter().enumerate() {
        let layer = li + 1;
        let mut pos_q = Vec::with_capacity(current.len());
        let mut anchor_pe = Vec::with_capacity(current.len());
        for a in &current {
            let quad = anchor_embedding(a, &weights.encoding)?;
            pos_q.push(weights.encoding.query_mlp.forward(&embed_quadruple(&quad, d / 2, cfg))?);
            anchor_pe.push(embed_quadruple(&quad, d / 4, cfg));
        }

        let sa = self_attention(&content, &pos_q, &lw.self_attn, weights.num_heads);
        content = residual_norm(&content, &sa.output, &lw.norm_self);

        let ca = cross_attention(
            &content,
            &anchor_pe,
            &cells,
            &cell_pe,
            &lw.cross_attn,
            weights.num_heads,
        );
        content = residual_norm(&content, &ca.output, &lw.norm_cross);

        let ffn_out: Vec<Vec<f64>> = content
            .iter()
            .map(|c| lw.ffn.forward(c))
            .collect::<Result<_>>()?;
        content = residual_norm(&content, &ffn_out, &lw.norm_ffn);

        let mut predictions = Vec::with_capacity(current.len());
        let mut next = Vec::with_capacity(current.len());
        for (k, c) in content.iter().enumerate() {
            let logit = lw.cls_head.forward(c)?[0];
            let reg = lw.reg_head.forward(c)?;
            let offsets = lw.offset_head.forward(c)?;
            let delta = lw.update_head.forward(c)?;
            predictions.push(Prediction {
                score: sigmoid(logit),
                start_x: sigmoid(reg[0]),
                start_y: sigmoid(reg[1]),
                theta: sigmoid(reg[2]) * std::f64::consts::PI,
                length: sigmoid(reg[3]),
                offsets,
                layer,
                anchor_index: k,
            });
            next.push(update_anchor(&current[k], &delta));
        }
        current = next;
        traces.push(LayerTrace {
            layer,
            predictions,
            anchors_after: current.clone(),
        });
        probes.push(LayerProbe {
            layer,
            self_attn: sa.probs,
            cross_attn: ca.probs,
        });
    }
    Ok((traces, probes))
}

fn residual_norm(x: &[Vec<f64>], sub: &[Vec<f64>], ln: &LayerNorm) -> Vec<Vec<f64>> {
    x.iter()
        .zip(sub)
        .map(|(a, b)| {
            let summed: Vec<f64> = a.iter().zip(b).map(|(u, v)| u + v).collect();
            ln.forward(&summed)
        })
        .collect()
}

/// Deterministic anchor set: start points evenly spread along the bottom edge,
/// angles cycling through a 7-way fan, full length, zero offsets.
pub fn initial_anchors(count: usize, num_rows: usize) -> Vec<LaneAnchor> {
    const FAN: usize = 7;
    (0..count)
        .map(|i| {
            let start_x = (i as f64 + 0.5) / count as f64;
            let theta = std::f64::consts::PI * ((i % FAN) as f64 + 1.0) / (FAN as f64 + 1.0);
            LaneAnchor::straight(start_x, 0.0, theta, 1.0, num_rows)
        })
        .collect()
}
