use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampler::{sample_next, GenerationParams};
use super::spec::SteeringSpec;
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::Model;
use crate::training::tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Prompt followed by the continuation.
    pub text: String,
    /// Prompt and continuation token ids.
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
    /// Model log-probability (temperature 1, unfiltered) of each generated token.
    pub logprobs: Vec<f64>,
}

impl Generation {
    pub fn continuation(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }
}

/// Autoregressive sampling with steering active at every position. Stops
/// after `max_tokens` or when the context window is full.
pub fn generate(
    model: &Model,
    alpha: f32,
    prompt: &str,
    specs: &[SteeringSpec],
    params: &GenerationParams,
) -> Result<Generation> {
    params.validate()?;
    let prompt_tokens = tokenizer::encode(prompt.as_bytes());
    if prompt_tokens.is_empty() {
        return Err(Error::input("prompt must not be empty"));
    }
    if prompt_tokens.len() > model.config.max_seq_len {
        return Err(Error::Length {
            len: prompt_tokens.len(),
            max: model.config.max_seq_len,
        });
    }
    let mut dec = model.decoder(alpha, specs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut tokens = prompt_tokens.clone();
    let mut logprobs = Vec::new();
    let mut logits = Vec::new();
    for &t in &prompt_tokens {
        logits = dec.step(t)?;
    }
    for i in 0..params.max_tokens {
        let next = sample_next(&logits, params, &mut rng)?;
        logprobs.push(kernels::log_softmax_at(&logits, next));
        tokens.push(next);
        if i + 1 == params.max_tokens || dec.position() >= model.config.max_seq_len {
            break;
        }
        logits = dec.step(next)?;
    }
    Ok(Generation {
        text: tokenizer::decode_lossy(&tokens),
        tokens,
        prompt_len: prompt_tokens.len(),
        logprobs,
    })
}
