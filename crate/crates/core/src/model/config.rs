use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topk::{self, Nonlinearity};

/// Architectural hyperparameters of the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

/// Which layers are sparse and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKPolicy {
    pub k: usize,
    pub n_nontopk: usize,
    pub anneal_step_ratio: f64,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
}

/// Gated FFN width for a given model width: `8D/3` rounded up to a multiple of 8.
pub fn default_ffn_dim(hidden_dim: usize) -> usize {
    (8 * hidden_dim).div_ceil(3).div_ceil(8) * 8
}

impl ModelConfig {
    /// Laptop-scale preset: D=128, L=6, 4 heads, byte vocabulary, 256 positions.
    pub fn desk() -> Self {
        Self {
            hidden_dim: 128,
            num_layers: 6,
            num_heads: 4,
            ffn_dim: default_ffn_dim(128),
            vocab_size: 256,
            max_seq_len: 256,
        }
    }

    /// Reference preset at published scale (`D/128` heads, 32k vocabulary).
    /// Kept for documentation and config generation; not trained here.
    pub fn reference(hidden_dim: usize, num_layers: usize) -> Self {
        Self {
            hidden_dim,
            num_layers,
            num_heads: hidden_dim / 128,
            ffn_dim: default_ffn_dim(hidden_dim),
            vocab_size: 32000,
            max_seq_len: 1024,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "num_heads {} does not divide hidden_dim {}",
                self.num_heads, self.hidden_dim
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config("head dimension must be even for rotary embeddings"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, f, v) = (self.hidden_dim, self.ffn_dim, self.vocab_size);
        let per_layer = 2 * d + 4 * d * d + 3 * d * f;
        2 * v * d + d + self.num_layers * per_layer
    }
}

impl TopKPolicy {
    pub fn desk() -> Self {
        Self {
            k: 16,
            n_nontopk: 2,
            anneal_step_ratio: 0.2,
            nonlinearity: Nonlinearity::Relu,
        }
    }

    /// A policy with no TopK layers: the dense baseline.
    pub fn dense(num_layers: usize, hidden_dim: usize) -> Self {
        Self {
            k: hidden_dim,
            n_nontopk: num_layers,
            anneal_step_ratio: 0.2,
            nonlinearity: Nonlinearity::Relu,
        }
    }

    pub fn is_topk_layer(&self, layer: usize, num_layers: usize) -> bool {
        topk::layer_is_topk(layer, num_layers, self.n_nontopk)
    }

    pub fn topk_layers(&self, num_layers: usize) -> Vec<usize> {
        (0..num_layers)
            .filter(|&l| self.is_topk_layer(l, num_layers))
            .collect()
    }

    pub fn is_dense(&self, num_layers: usize) -> bool {
        self.n_nontopk >= num_layers
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        topk::check_k(self.k, model.hidden_dim)?;
        if self.n_nontopk > model.num_layers {
            return Err(Error::config(format!(
                "n_nontopk {} exceeds num_layers {}",
                self.n_nontopk, model.num_layers
            )));
        }
        if !(0.0..=1.0).contains(&self.anneal_step_ratio) {
            return Err(Error::config("anneal_step_ratio must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_preset_is_valid() {
        let m = ModelConfig::desk();
        m.validate().unwrap();
        assert_eq!(m.ffn_dim, 344);
        TopKPolicy::desk().validate(&m).unwrap();
    }

    #[test]
    fn reference_presets_use_128_wide_heads() {
        for (d, l) in [(1024, 8), (1024, 24), (2048, 16)] {
            let m = ModelConfig::reference(d, l);
            assert_eq!(m.num_heads, d / 128);
            m.validate().unwrap();
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut m = ModelConfig::desk();
        m.num_heads = 3;
        assert!(m.validate().is_err());
        let m = ModelConfig::desk();
        let mut p = TopKPolicy::desk();
        p.k = 129;
        assert!(p.validate(&m).is_err());
        p.k = 16;
        p.n_nontopk = 7;
        assert!(p.validate(&m).is_err());
    }
}
