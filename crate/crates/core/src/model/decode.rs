//! Incremental single-token decoding with a key/value cache.

use super::Model;
use crate::error::{Error, Result};
use crate::kernels;
use crate::steering::{SteeringSite, SteeringSpec};
use crate::topk;

pub struct Decoder<'m> {
    model: &'m Model,
    alpha: f32,
    steering: Vec<SteeringSpec>,
    k_cache: Vec<Vec<f32>>,
    v_cache: Vec<Vec<f32>>,
    pos: usize,
    // scratch
    x: Vec<f32>,
    a: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    o: Vec<f32>,
    proj: Vec<f32>,
    gate: Vec<f32>,
    up: Vec<f32>,
    attn: Vec<f32>,
    kept: Vec<bool>,
    order: Vec<usize>,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m Model, alpha: f32, steering: &[SteeringSpec]) -> Result<Self> {
        topk::check_alpha(alpha)?;
        for s in steering {
            s.validate(&model.config, &model.policy)?;
        }
        let d = model.config.hidden_dim;
        let f = model.config.ffn_dim;
        let layers = model.config.num_layers;
        Ok(Self {
            model,
            alpha,
            steering: steering.to_vec(),
            k_cache: vec![Vec::new(); layers],
            v_cache: vec![Vec::new(); layers],
            pos: 0,
            x: vec![0.0; d],
            a: vec![0.0; d],
            q: vec![0.0; d],
            k: vec![0.0; d],
            v: vec![0.0; d],
            o: vec![0.0; d],
            proj: vec![0.0; d],
            gate: vec![0.0; f],
            up: vec![0.0; f],
            attn: Vec::new(),
            kept: vec![false; d],
            order: Vec::new(),
        })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one token and returns next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<f32>> {
        let cfg = &self.model.config;
        let p = &self.model.params;
        if token >= cfg.vocab_size {
            return Err(Error::Index {
                what: "token",
                index: token,
                bound: cfg.vocab_size,
            });
        }
        if self.pos >= cfg.max_seq_len {
            return Err(Error::Length {
                len: self.pos + 1,
                max: cfg.max_seq_len,
            });
        }
        let (d, f) = (cfg.hidden_dim, cfg.ffn_dim);
        let mut inv = [0.0f32];
        self.x.copy_from_slice(p.tok_embeddings.row(token));
        for (l, lp) in p.layers.iter().enumerate() {
            kernels::rms_norm_forward(&self.x, lp.attn_norm.data(), &mut self.a, &mut inv);
            kernels::mm(1, d, d, &self.a, lp.wq.data(), &mut self.q, 0.0);
            kernels::mm(1, d, d, &self.a, lp.wk.data(), &mut self.k, 0.0);
            kernels::mm(1, d, d, &self.a, lp.wv.data(), &mut self.v, 0.0);
            self.model.rope.rotate(&mut self.q, self.pos, false);
            self.model.rope.rotate(&mut self.k, self.pos, false);
            self.k_cache[l].extend_from_slice(&self.k);
            self.v_cache[l].extend_from_slice(&self.v);
            kernels::attention_decode(
                &self.q,
                &self.k_cache[l],
                &self.v_cache[l],
                cfg.num_heads,
                cfg.head_dim(),
                &mut self.o,
                &mut self.attn,
            );
            kernels::mm(1, d, d, &self.o, lp.wo.data(), &mut self.proj, 0.0);
            add_assign(&mut self.x, &self.proj);

            kernels::rms_norm_forward(&self.x, lp.ffn_norm.data(), &mut self.a, &mut inv);
            kernels::mm(1, d, f, &self.a, lp.w_gate.data(), &mut self.gate, 0.0);
            kernels::mm(1, d, f, &self.a, lp.w_up.data(), &mut self.up, 0.0);
            let mut s = vec![0.0; f];
            kernels::swiglu_forward(&self.gate, &self.up, &mut s);
            kernels::mm(1, f, d, &s, lp.w_down.data(), &mut self.proj, 0.0);
            add_assign(&mut self.x, &self.proj);

            self.apply_steering(l, SteeringSite::PreTopk);
            if self.model.policy.is_topk_layer(l, cfg.num_layers) {
                topk::annealed_topk_row(
                    &mut self.x,
                    self.model.policy.k,
                    self.model.policy.nonlinearity,
                    self.alpha,
                    &mut self.kept,
                    &mut self.order,
                );
            }
            self.apply_steering(l, SteeringSite::Hidden);
        }
        kernels::rms_norm_forward(&self.x, p.norm.data(), &mut self.a, &mut inv);
        let mut logits = vec![0.0; cfg.vocab_size];
        kernels::mm(1, d, cfg.vocab_size, &self.a, p.output.data(), &mut logits, 0.0);
        self.pos += 1;
        Ok(logits)
    }

    fn apply_steering(&mut self, layer: usize, site: SteeringSite) {
        for s in &self.steering {
            if s.layer == layer && s.site == site {
                self.x[s.neuron] += s.delta;
            }
        }
    }
}

fn add_assign(x: &mut [f32], y: &[f32]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}
