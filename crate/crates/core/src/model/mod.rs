//! The decoder-only transformer with optional TopK residual-stream sparsity.

mod config;
mod decode;
mod forward;
mod params;

use std::collections::BTreeMap;
use std::sync::Arc;

pub use config::{default_ffn_dim, ModelConfig, TopKPolicy};
pub use decode::Decoder;
pub use forward::{attention_block, ffn_block, forward_graph, ForwardOptions, GraphForward, LayerVars};
pub use params::{LayerParams, ModelParams, INIT_STD};

use crate::autodiff::Graph;
use crate::error::Result;
use crate::kernels::Rope;
use crate::steering::SteeringSpec;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub policy: TopKPolicy,
    pub params: ModelParams,
    rope: Arc<Rope>,
}

/// Result of an inference forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[batch, seq, vocab]`
    pub logits: Tensor,
    /// Post-block hidden states `[batch, seq, hidden]` for each requested layer.
    pub hidden: BTreeMap<usize, Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig, policy: TopKPolicy, params: ModelParams) -> Result<Self> {
        config.validate()?;
        policy.validate(&config)?;
        let rope = Arc::new(Rope::new(config.head_dim(), config.max_seq_len));
        Ok(Self {
            config,
            policy,
            params,
            rope,
        })
    }

    pub fn init(config: ModelConfig, policy: TopKPolicy, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Self::new(config, policy, params)
    }

    pub fn rope(&self) -> Arc<Rope> {
        self.rope.clone()
    }

    /// Runs the model on `batch` equal-length sequences stored back to back.
    pub fn forward(
        &self,
        tokens: &[usize],
        batch: usize,
        alpha: f32,
        steering: &[SteeringSpec],
        capture: &[usize],
    ) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let opts = ForwardOptions {
            alpha,
            steering,
            capture,
        };
        let out = forward_graph(&mut g, self, tokens, batch, &opts, false)?;
        let seq = tokens.len() / batch;
        let logits = g
            .value(out.logits)
            .clone()
            .reshape(vec![batch, seq, self.config.vocab_size])?;
        let mut hidden = BTreeMap::new();
        for (l, v) in out.captured {
            let h = g
                .value(v)
                .clone()
                .reshape(vec![batch, seq, self.config.hidden_dim])?;
            hidden.insert(l, h);
        }
        Ok(ForwardOutput { logits, hidden })
    }

    /// Mean next-token cross-entropy and its gradient for every parameter
    /// (canonical order), for a batch of `inputs` predicting `targets`.
    pub fn loss_and_grads(
        &self,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        alpha: f32,
    ) -> Result<(f32, Vec<Vec<f32>>)> {
        let mut g = Graph::new();
        let opts = ForwardOptions {
            alpha,
            ..Default::default()
        };
        let out = forward_graph(&mut g, self, inputs, batch, &opts, true)?;
        let loss = g.cross_entropy(out.logits, targets)?;
        g.backward(loss)?;
        let value = g.value(loss).data()[0];
        let grads = out
            .params
            .iter()
            .map(|&p| {
                g.take_grad(p)
                    .unwrap_or_else(|| vec![0.0; g.value(p).numel()])
            })
            .collect();
        Ok((value, grads))
    }

    /// Mean next-token cross-entropy without gradients.
    pub fn loss(&self, inputs: &[usize], targets: &[usize], batch: usize, alpha: f32) -> Result<f32> {
        let mut g = Graph::new();
        let opts = ForwardOptions {
            alpha,
            ..Default::default()
        };
        let out = forward_graph(&mut g, self, inputs, batch, &opts, false)?;
        let loss = g.cross_entropy(out.logits, targets)?;
        Ok(g.value(loss).data()[0])
    }

    pub fn decoder(&self, alpha: f32, steering: &[SteeringSpec]) -> Result<Decoder<'_>> {
        Decoder::new(self, alpha, steering)
    }
}
