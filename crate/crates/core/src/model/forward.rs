//! Graph construction for the decoder: pre-norm attention and gated FFN
//! sublayers, followed by the (annealed) TopK activation on sparse layers.

use std::sync::Arc;

use super::params::{LayerParams, ModelParams};
use super::Model;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::{AttnDims, Rope};
use crate::steering::{SteeringSite, SteeringSpec};

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

impl LayerVars {
    pub fn insert(g: &mut Graph, p: &LayerParams, trainable: bool) -> Self {
        let mut put = |t: &crate::Tensor| g.leaf(t.clone(), trainable);
        Self {
            attn_norm: put(&p.attn_norm),
            wq: put(&p.wq),
            wk: put(&p.wk),
            wv: put(&p.wv),
            wo: put(&p.wo),
            ffn_norm: put(&p.ffn_norm),
            w_gate: put(&p.w_gate),
            w_up: put(&p.w_up),
            w_down: put(&p.w_down),
        }
    }

    fn all(&self) -> [Var; 9] {
        [
            self.attn_norm,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ffn_norm,
            self.w_gate,
            self.w_up,
            self.w_down,
        ]
    }
}

/// `x + Wo · attention(rope(norm(x)·Wq), rope(norm(x)·Wk), norm(x)·Wv)`.
pub fn attention_block(
    g: &mut Graph,
    x: Var,
    lv: &LayerVars,
    dims: AttnDims,
    rope: Arc<Rope>,
) -> Result<Var> {
    let a = g.rms_norm(x, lv.attn_norm)?;
    let q = g.matmul(a, lv.wq)?;
    let k = g.matmul(a, lv.wk)?;
    let v = g.matmul(a, lv.wv)?;
    let o = g.attention(q, k, v, dims, rope)?;
    let o = g.matmul(o, lv.wo)?;
    g.add(x, o)
}

/// `x + W_down · (silu(norm(x)·W_gate) ⊙ norm(x)·W_up)`.
pub fn ffn_block(g: &mut Graph, x: Var, lv: &LayerVars) -> Result<Var> {
    let m = g.rms_norm(x, lv.ffn_norm)?;
    let gate = g.matmul(m, lv.w_gate)?;
    let up = g.matmul(m, lv.w_up)?;
    let s = g.swiglu(gate, up)?;
    let s = g.matmul(s, lv.w_down)?;
    g.add(x, s)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub alpha: f32,
    pub steering: &'a [SteeringSpec],
    pub capture: &'a [usize],
}

pub struct GraphForward {
    /// `[batch*seq, vocab]`
    pub logits: Var,
    /// Parameter leaves in canonical order.
    pub params: Vec<Var>,
    /// `(layer, [batch*seq, hidden])` post-block hidden states.
    pub captured: Vec<(usize, Var)>,
}

pub(crate) fn insert_params(g: &mut Graph, p: &ModelParams, trainable: bool) -> (Var, Vec<LayerVars>, Var, Var) {
    let emb = g.leaf(p.tok_embeddings.clone(), trainable);
    let layers = p
        .layers
        .iter()
        .map(|l| LayerVars::insert(g, l, trainable))
        .collect();
    let norm = g.leaf(p.norm.clone(), trainable);
    let out = g.leaf(p.output.clone(), trainable);
    (emb, layers, norm, out)
}

/// Records the full forward pass of `model` over `batch` sequences laid out
/// contiguously in `tokens`.
pub fn forward_graph(
    g: &mut Graph,
    model: &Model,
    tokens: &[usize],
    batch: usize,
    opts: &ForwardOptions<'_>,
    trainable: bool,
) -> Result<GraphForward> {
    let cfg = &model.config;
    if batch == 0 || tokens.len() % batch != 0 {
        return Err(Error::Shape {
            op: "forward",
            lhs: vec![tokens.len()],
            rhs: vec![batch],
        });
    }
    let seq = tokens.len() / batch;
    if seq > cfg.max_seq_len {
        return Err(Error::Length {
            len: seq,
            max: cfg.max_seq_len,
        });
    }
    for s in opts.steering {
        s.validate(cfg, &model.policy)?;
    }
    if let Some(&bad) = opts.capture.iter().find(|&&l| l >= cfg.num_layers) {
        return Err(Error::Index {
            what: "layer",
            index: bad,
            bound: cfg.num_layers,
        });
    }
    let dims = AttnDims {
        batch,
        seq,
        heads: cfg.num_heads,
        head_dim: cfg.head_dim(),
    };
    let (emb, layers, norm, out) = insert_params(g, &model.params, trainable);
    let mut x = g.embedding(emb, tokens)?;
    let mut captured = Vec::new();
    for (l, lv) in layers.iter().enumerate() {
        x = attention_block(g, x, lv, dims, model.rope.clone())?;
        x = ffn_block(g, x, lv)?;
        for s in opts.steering.iter().filter(|s| s.layer == l) {
            if s.site == SteeringSite::PreTopk {
                x = g.add_column(x, s.neuron, s.delta)?;
            }
        }
        if model.policy.is_topk_layer(l, cfg.num_layers) {
            x = g.annealed_topk(x, model.policy.k, model.policy.nonlinearity, opts.alpha)?;
        }
        for s in opts.steering.iter().filter(|s| s.layer == l) {
            if s.site == SteeringSite::Hidden {
                x = g.add_column(x, s.neuron, s.delta)?;
            }
        }
        if opts.capture.contains(&l) {
            captured.push((l, x));
        }
    }
    let h = g.rms_norm(x, norm)?;
    let logits = g.matmul(h, out)?;
    let mut params = vec![emb];
    for lv in &layers {
        params.extend(lv.all());
    }
    params.push(norm);
    params.push(out);
    Ok(GraphForward {
        logits,
        params,
        captured,
    })
}
