//! Minimal dense f64 building blocks for the encoder/decoder stacks.
//!
//! Everything here is plain row-major `Vec<f64>` math. Reductions run in a
//! fixed index order so repeated runs are bitwise identical.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine map `y = W x + b` with `W` stored row-major as `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform init on [-1/sqrt(in_dim), 1/sqrt(in_dim)] for weights and bias.
    pub fn seeded(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut layer = Linear::zeros(in_dim, out_dim);
        for w in layer.weight.iter_mut() {
            *w = rng.random_range(-bound..bound);
        }
        for b in layer.bias.iter_mut() {
            *b = rng.random_range(-bound..bound);
        }
        layer
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut out = Vec::with_capacity(self.out_dim);
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            out.push(acc);
        }
        out
    }

    pub fn check_dims(&self, what: &str) -> Result<()> {
        if self.weight.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(Error::shape(
                what,
                format!("{}x{} weights + {} bias", self.out_dim, self.in_dim, self.out_dim),
                format!("{} weights + {} bias", self.weight.len(), self.bias.len()),
            ));
        }
        Ok(())
    }
}

/// Stack of affine layers with a rectifier between consecutive layers
/// (none after the last one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists layer widths, e.g. `[in, hidden, out]`.
    pub fn seeded(rng: &mut ChaCha8Rng, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Linear::seeded(rng, w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let layers = dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::shape("mlp input", self.in_dim(), x.len()));
        }
        let last = self.layers.len() - 1;
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(&cur);
            if i != last {
                for v in cur.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
        Ok(cur)
    }
}

/// Layer normalization over the feature axis with learned scale and shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.gamma.len());
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + self.eps).sqrt();
        x.iter()
            .zip(self.gamma.iter().zip(&self.beta))
            .map(|(v, (g, b))| (v - mean) * inv * g + b)
            .collect()
    }
}

/// Numerically stable logistic squash; output clamped to the open interval
/// (0, 1) so downstream log/score domains stay valid even for saturated inputs.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(1e-12, 1.0 - 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_forward_matches_hand_computation() {
        let layer = Linear {
            in_dim: 2,
            out_dim: 2,
            weight: vec![1.0, 2.0, -1.0, 0.5],
            bias: vec![0.25, -0.25],
        };
        let y = layer.forward(&[3.0, 4.0]);
        assert_eq!(y, vec![3.0 + 8.0 + 0.25, -3.0 + 2.0 - 0.25]);
    }

    #[test]
    fn mlp_applies_rectifier_between_layers_only() {
        // First layer forces a negative pre-activation which the rectifier
        // zeroes; the final layer may still emit negatives.
        let mlp = Mlp {
            layers: vec![
                Linear {
                    in_dim: 1,
                    out_dim: 1,
                    weight: vec![1.0],
                    bias: vec![0.0],
                },
                Linear {
                    in_dim: 1,
                    out_dim: 1,
                    weight: vec![-2.0],
                    bias: vec![0.0],
                },
            ],
        };
        assert_eq!(mlp.forward(&[-5.0]).unwrap(), vec![0.0]);
        assert_eq!(mlp.forward(&[3.0]).unwrap(), vec![-6.0]);
    }

    #[test]
    fn layer_norm_centers_and_scales() {
        let ln = LayerNorm::identity(4);
        let y = ln.forward(&[1.0, 2.0, 3.0, 4.0]);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        // Constant rows collapse to beta instead of dividing by zero.
        let z = ln.forward(&[5.0, 5.0, 5.0, 5.0]);
        assert!(z.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn seeded_init_is_deterministic_and_bounded() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let la = Linear::seeded(&mut a, 16, 8);
        let lb = Linear::seeded(&mut b, 16, 8);
        assert_eq!(la, lb);
        let bound = 1.0 / 4.0;
        assert!(la.weight.iter().chain(&la.bias).all(|w| w.abs() <= bound));
    }

    #[test]
    fn sigmoid_stays_in_open_interval() {
        for x in [-1e9, -40.0, 0.0, 40.0, 1e9] {
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
        }
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
