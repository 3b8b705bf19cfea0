use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// All trainable tensors. Projection matrices are stored `[in, out]` so a
/// row-vector activation multiplies on the left.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub tok_embeddings: Tensor,
    pub layers: Vec<LayerParams>,
    pub norm: Tensor,
    pub output: Tensor,
}

const LAYER_FIELDS: [&str; 9] = [
    "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down",
];

impl LayerParams {
    fn fields(&self) -> [&Tensor; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

impl ModelParams {
    /// Normal(0, 0.02) weights, residual output projections scaled by
    /// `1/sqrt(2L)`, unit norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size);
        let resid_std = INIT_STD / (2.0 * cfg.num_layers as f32).sqrt();
        let tok_embeddings = Tensor::randn(vec![v, d], INIT_STD, &mut rng);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::full(vec![d], 1.0),
                wq: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                wk: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                wv: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                wo: Tensor::randn(vec![d, d], resid_std, &mut rng),
                ffn_norm: Tensor::full(vec![d], 1.0),
                w_gate: Tensor::randn(vec![d, f], INIT_STD, &mut rng),
                w_up: Tensor::randn(vec![d, f], INIT_STD, &mut rng),
                w_down: Tensor::randn(vec![f, d], resid_std, &mut rng),
            })
            .collect();
        let norm = Tensor::full(vec![d], 1.0);
        let output = Tensor::randn(vec![d, v], INIT_STD, &mut rng);
        Self {
            tok_embeddings,
            layers,
            norm,
            output,
        }
    }

    pub fn names(num_layers: usize) -> Vec<String> {
        let mut names = vec!["tok_embeddings".to_string()];
        for l in 0..num_layers {
            names.extend(LAYER_FIELDS.iter().map(|f| format!("layers.{l}.{f}")));
        }
        names.push("norm".into());
        names.push("output".into());
        names
    }

    /// Tensors in canonical order (matches [`ModelParams::names`]).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_embeddings];
        for layer in &self.layers {
            out.extend(layer.fields());
        }
        out.push(&self.norm);
        out.push(&self.output);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_embeddings];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.norm);
        out.push(&mut self.output);
        out
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        Self::names(self.layers.len())
            .into_iter()
            .zip(self.tensors())
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Rebuilds parameters from named tensors, checking every shape against `cfg`.
    pub fn from_named(cfg: &ModelConfig, mut named: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut params = Self::init(cfg, 0);
        let names = Self::names(cfg.num_layers);
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = named
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Config(format!(
                    "tensor '{name}' has shape {:?}, config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Format(format!("unexpected tensor '{extra}'")));
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_order_matches_names() {
        let cfg = ModelConfig {
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 16,
            max_seq_len: 8,
        };
        let p = ModelParams::init(&cfg, 3);
        let named = p.named();
        assert_eq!(named.len(), 1 + 2 * 9 + 2);
        assert_eq!(named[1].0, "layers.0.attn_norm");
        assert_eq!(p.num_elements(), cfg.param_count());
        let map = named
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect::<BTreeMap<_, _>>();
        assert_eq!(ModelParams::from_named(&cfg, map).unwrap(), p);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig::desk();
        assert_eq!(ModelParams::init(&cfg, 7), ModelParams::init(&cfg, 7));
        assert_ne!(ModelParams::init(&cfg, 7), ModelParams::init(&cfg, 8));
    }
}
