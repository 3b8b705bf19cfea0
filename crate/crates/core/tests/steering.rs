use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topklm::model::{Model, ModelConfig, TopKPolicy};
use topklm::steering::*;
use topklm::topk::Nonlinearity;

/// Reference filter written from the definition: sort descending, keep the
/// top `k`, then the shortest prefix whose renormalized mass reaches `p`.
fn reference_distribution(logits: &[f32], t: f64, k: usize, p: f64) -> Vec<f64> {
    let z: Vec<f64> = logits.iter().map(|&l| (l as f64 / t).exp()).collect();
    let total: f64 = z.iter().sum();
    let probs: Vec<f64> = z.iter().map(|v| v / total).collect();
    let mut ranked: Vec<(usize, f64)> = probs.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    let kept_mass: f64 = ranked.iter().map(|r| r.1).sum();
    let mut n = 0;
    let mut cum = 0.0;
    while n < ranked.len() {
        cum += ranked[n].1 / kept_mass;
        n += 1;
        if cum >= p - 1e-12 {
            break;
        }
    }
    ranked.truncate(n);
    let mass: f64 = ranked.iter().map(|r| r.1).sum();
    let mut out = vec![0.0; logits.len()];
    for (i, q) in ranked {
        out[i] = q / mass;
    }
    out
}

fn empirical_tv(logits: &[f32], params: &GenerationParams, draws: usize, seed: u64) -> f64 {
    let want = reference_distribution(
        logits,
        params.temperature as f64,
        params.top_k,
        params.top_p as f64,
    );
    let mut counts = vec![0usize; logits.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..draws {
        counts[sample_next(logits, params, &mut rng).unwrap()] += 1;
    }
    counts
        .iter()
        .zip(&want)
        .map(|(&c, &w)| (c as f64 / draws as f64 - w).abs())
        .sum::<f64>()
        / 2.0
}

#[test]
fn filtered_distribution_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.random_range(1..80);
        let logits: Vec<f32> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let params = GenerationParams {
            temperature: rng.random_range(0.2..2.0),
            top_p: rng.random_range(0.05..1.0),
            top_k: rng.random_range(1..100),
            ..Default::default()
        };
        let got = filtered_distribution(&logits, &params).unwrap();
        let want = reference_distribution(
            &logits,
            params.temperature as f64,
            params.top_k,
            params.top_p as f64,
        );
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn empirical_frequencies_within_one_percent() {
    let four = [2.0, 1.0, 0.5, -1.0];
    let tv = empirical_tv(&four, &GenerationParams::default(), 100_000, 1);
    assert!(tv < 0.01, "4 logits: tv {tv}");

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let fifty: Vec<f32> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
    let params = GenerationParams {
        temperature: 1.0,
        top_p: 0.95,
        top_k: 40,
        ..Default::default()
    };
    let tv = empirical_tv(&fifty, &params, 100_000, 2);
    assert!(tv < 0.01, "50 logits: tv {tv}");
}

#[test]
fn no_op_filters_give_plain_softmax() {
    let logits = [0.3f32, -1.2, 2.0, 0.0];
    let params = GenerationParams {
        temperature: 1.0,
        top_p: 1.0,
        top_k: 4,
        ..Default::default()
    };
    let got = filtered_distribution(&logits, &params).unwrap();
    let z: f64 = logits.iter().map(|&l| (l as f64).exp()).sum();
    for (g, &l) in got.iter().zip(&logits) {
        assert!((g - (l as f64).exp() / z).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn top_one_is_argmax(
        logits in proptest::collection::vec(-10.0f32..10.0, 1..64),
        t in 0.05f32..5.0,
        seed in any::<u64>(),
    ) {
        let params = GenerationParams { temperature: t, top_k: 1, ..Default::default() };
        let argmax = logits
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > logits[best] { i } else { best });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(sample_next(&logits, &params, &mut rng).unwrap(), argmax);
    }

    #[test]
    fn draws_stay_in_support(
        logits in proptest::collection::vec(-5.0f32..5.0, 2..64),
        top_k in 1usize..70,
        top_p in 0.05f32..1.0,
        seed in any::<u64>(),
    ) {
        let params = GenerationParams { top_k, top_p, ..Default::default() };
        let support = filtered_distribution(&logits, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let t = sample_next(&logits, &params, &mut rng).unwrap();
            prop_assert!(support[t] > 0.0);
        }
        prop_assert!(support.iter().filter(|p| **p > 0.0).count() <= top_k);
    }
}

fn tiny_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        hidden_dim: 16,
        num_layers: 3,
        num_heads: 2,
        ffn_dim: 32,
        vocab_size: 256,
        max_seq_len: 64,
    };
    let policy = TopKPolicy {
        k: 4,
        n_nontopk: 1,
        anneal_step_ratio: 0.2,
        nonlinearity: Nonlinearity::Relu,
    };
    Model::init(cfg, policy, seed).unwrap()
}

fn params(seed: u64, max_tokens: usize) -> GenerationParams {
    GenerationParams {
        temperature: 1.0,
        top_k: 256,
        top_p: 1.0,
        max_tokens,
        seed,
        ..Default::default()
    }
}

#[test]
fn zero_delta_matches_unsteered_logits_every_step() {
    let m = tiny_model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let toks: Vec<usize> = (0..40).map(|_| rng.random_range(0..256)).collect();
    for site in [SteeringSite::PreTopk, SteeringSite::Hidden] {
        let spec = SteeringSpec {
            layer: 1,
            neuron: 5,
            delta: 0.0,
            site,
        };
        let mut plain = m.decoder(0.0, &[]).unwrap();
        let mut steered = m.decoder(0.0, &[spec]).unwrap();
        for &t in &toks {
            let a: Vec<u32> = plain.step(t).unwrap().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = steered.step(t).unwrap().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }
    let spec = SteeringSpec::auto(0, 3, 0.0, &m.config, &m.policy);
    let p = params(7, 40);
    let a = generate(&m, 0.0, "Once upon a time,", &[], &p).unwrap();
    let b = generate(&m, 0.0, "Once upon a time,", &[spec], &p).unwrap();
    assert_eq!(a, b);
}

#[test]
fn generation_contracts() {
    let m = tiny_model(2);
    let prompt = "Once upon a time,";
    let none = generate(&m, 0.0, prompt, &[], &params(1, 0)).unwrap();
    assert_eq!(none.text, prompt);
    assert!(none.logprobs.is_empty());

    let a = generate(&m, 0.0, prompt, &[], &params(1, 30)).unwrap();
    let again = generate(&m, 0.0, prompt, &[], &params(1, 30)).unwrap();
    assert_eq!(a, again);
    assert_eq!(a.continuation().len(), 30);
    assert_eq!(a.logprobs.len(), 30);
    assert!(a.logprobs.iter().all(|l| *l <= 0.0));

    let spec = SteeringSpec {
        layer: 1,
        neuron: 2,
        delta: 8.0,
        site: SteeringSite::PreTopk,
    };
    let s1 = generate(&m, 0.0, prompt, &[spec], &params(1, 30)).unwrap();
    let s2 = generate(&m, 0.0, prompt, &[spec], &params(2, 30)).unwrap();
    assert_ne!(s1.tokens, s2.tokens);
    assert_eq!(s1, generate(&m, 0.0, prompt, &[spec], &params(1, 30)).unwrap());

    assert!(generate(&m, 0.0, "", &[], &params(1, 5)).is_err());
    let long = "x".repeat(65);
    assert!(generate(&m, 0.0, &long, &[], &params(1, 5)).is_err());
}

#[test]
fn generation_stops_at_context_window() {
    let m = tiny_model(3);
    let g = generate(&m, 0.0, "abc", &[], &params(0, 500)).unwrap();
    // the last token is predicted from a full window and never fed back
    assert_eq!(g.tokens.len(), 65);
}

#[test]
fn pre_topk_on_dense_layer_is_rejected() {
    let m = tiny_model(4);
    let spec = SteeringSpec {
        layer: 2,
        neuron: 0,
        delta: 1.0,
        site: SteeringSite::PreTopk,
    };
    assert!(generate(&m, 0.0, "a", &[spec], &params(0, 2)).is_err());
    let spec = SteeringSpec {
        site: SteeringSite::Hidden,
        ..spec
    };
    assert!(generate(&m, 0.0, "a", &[spec], &params(0, 2)).is_ok());
}

#[test]
fn effect_score_null_cases() {
    let m = tiny_model(5);
    let p = params(0, 16);
    let zero = SteeringSpec::auto(1, 4, 0.0, &m.config, &m.policy);
    let s = steering_effect_score(&m, 0.0, "Once", &zero, &p, 12, &[b'e' as usize]).unwrap();
    assert_eq!(s.lift, 0.0);
    assert_eq!(s.ties, 12);
    assert_eq!(s.p_value, 1.0);
    assert!(s.warning.is_none());

    let strong = SteeringSpec::auto(1, 4, 25.0, &m.config, &m.policy);
    let all: Vec<usize> = (0..256).collect();
    let s = steering_effect_score(&m, 0.0, "Once", &strong, &p, 12, &all).unwrap();
    assert_eq!(s.lift, 0.0);

    let s = steering_effect_score(&m, 0.0, "Once", &strong, &p, 5, &[1]).unwrap();
    assert!(s.warning.is_some());
    assert!(steering_effect_score(&m, 0.0, "Once", &strong, &p, 5, &[]).is_err());
}
