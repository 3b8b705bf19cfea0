use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Order in which the top-k and nucleus filters are applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterOrder {
    #[default]
    TopKThenTopP,
    TopPThenTopK,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f32,
    pub top_p: f32,
    pub top_k: usize,
    pub max_tokens: usize,
    pub seed: u64,
    pub filter_order: FilterOrder,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.9,
            top_k: 50,
            max_tokens: 128,
            seed: 0,
            filter_order: FilterOrder::TopKThenTopP,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive and finite"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config("top_p must lie in (0, 1]"));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k must be at least 1"));
        }
        Ok(())
    }
}

fn keep_top_k(probs: &mut [f64], order: &[usize], k: usize) {
    for &i in order.iter().skip(k) {
        probs[i] = 0.0;
    }
}

fn keep_nucleus(probs: &mut [f64], order: &[usize], p: f64) {
    let total: f64 = probs.iter().sum();
    let mut cum = 0.0;
    let mut cut = order.len();
    for (rank, &i) in order.iter().enumerate() {
        if probs[i] == 0.0 {
            cut = rank;
            break;
        }
        cum += probs[i] / total;
        if cum >= p - 1e-12 {
            cut = rank + 1;
            break;
        }
    }
    for &i in &order[cut..] {
        probs[i] = 0.0;
    }
}

/// The normalized distribution `sample_next` draws from: softmax of
/// `logits / temperature`, restricted by top-k and nucleus filters in the
/// configured order. The most likely token always survives.
pub fn filtered_distribution(logits: &[f32], params: &GenerationParams) -> Result<Vec<f64>> {
    params.validate()?;
    if logits.is_empty() {
        return Err(Error::input("empty logit vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("logits must be finite"));
    }
    let t = params.temperature as f64;
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let mut probs: Vec<f64> = logits.iter().map(|&v| ((v as f64 - max) / t).exp()).collect();
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // Descending probability; equal probabilities keep the lower index first.
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    match params.filter_order {
        FilterOrder::TopKThenTopP => {
            keep_top_k(&mut probs, &order, params.top_k);
            keep_nucleus(&mut probs, &order, params.top_p as f64);
        }
        FilterOrder::TopPThenTopK => {
            keep_nucleus(&mut probs, &order, params.top_p as f64);
            keep_top_k(&mut probs, &order, params.top_k);
        }
    }
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(probs)
}

/// Draws one token from [`filtered_distribution`].
pub fn sample_next<R: Rng + ?Sized>(
    logits: &[f32],
    params: &GenerationParams,
    rng: &mut R,
) -> Result<usize> {
    let probs = filtered_distribution(logits, params)?;
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        cum += p;
        last = i;
        if u < cum {
            return Ok(i);
        }
    }
    Ok(last)
}
