use serde::{Deserialize, Serialize};

use super::generate::generate;
use super::sampler::GenerationParams;
use super::spec::SteeringSpec;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectScore {
    /// Mean over pairs of (steered − baseline) concept-token frequency.
    pub lift: f64,
    /// One-sided sign test, H1: steered frequency exceeds baseline.
    pub p_value: f64,
    pub n_samples: usize,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub steered_mean: f64,
    pub baseline_mean: f64,
    pub warning: Option<String>,
}

/// Share of `tokens` that fall in `concept` (0 for an empty slice).
pub fn concept_frequency(tokens: &[usize], concept: &[bool]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let hits = tokens
        .iter()
        .filter(|&&t| concept.get(t).copied().unwrap_or(false))
        .count();
    hits as f64 / tokens.len() as f64
}

/// `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_choose = 0.0; // ln C(n, 0)
    let mut tail = 0.0;
    for k in 0..=n {
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            tail += (ln_choose + ln_half_n).exp();
        }
    }
    tail.min(1.0)
}

/// Paired-seed comparison of concept-token frequency in continuations with
/// and without `spec`. Sample `i` uses seed `params.seed + i` for both arms.
pub fn steering_effect_score(
    model: &Model,
    alpha: f32,
    prompt: &str,
    spec: &SteeringSpec,
    params: &GenerationParams,
    n_samples: usize,
    concept_tokens: &[usize],
) -> Result<EffectScore> {
    if concept_tokens.is_empty() {
        return Err(Error::input("concept token set is empty"));
    }
    if n_samples == 0 {
        return Err(Error::input("n_samples must be positive"));
    }
    let mut concept = vec![false; model.config.vocab_size];
    for &t in concept_tokens {
        *concept.get_mut(t).ok_or(Error::Index {
            what: "concept token",
            index: t,
            bound: model.config.vocab_size,
        })? = true;
    }
    let warning = (n_samples < 10).then(|| {
        let w = format!("only {n_samples} samples; the sign test has little power below 10");
        log::warn!("{w}");
        w
    });
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    let (mut steered_sum, mut base_sum) = (0.0, 0.0);
    for i in 0..n_samples {
        let p = GenerationParams {
            seed: params.seed.wrapping_add(i as u64),
            ..*params
        };
        let base = generate(model, alpha, prompt, &[], &p)?;
        let steered = generate(model, alpha, prompt, std::slice::from_ref(spec), &p)?;
        let fb = concept_frequency(base.continuation(), &concept);
        let fs = concept_frequency(steered.continuation(), &concept);
        base_sum += fb;
        steered_sum += fs;
        match fs.partial_cmp(&fb) {
            Some(std::cmp::Ordering::Greater) => wins += 1,
            Some(std::cmp::Ordering::Less) => losses += 1,
            _ => ties += 1,
        }
    }
    let n = n_samples as f64;
    Ok(EffectScore {
        lift: (steered_sum - base_sum) / n,
        p_value: sign_test_p(wins, losses),
        n_samples,
        wins,
        losses,
        ties,
        steered_mean: steered_sum / n,
        baseline_mean: base_sum / n,
        warning,
    })
}
