use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topklm::model::{Model, ModelConfig, TopKPolicy};
use topklm::topk::{anneal_alpha, Nonlinearity};
use topklm::training::*;
use topklm::{Error, Tensor};

fn small(total_steps: usize) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.model = ModelConfig {
        hidden_dim: 16,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 48,
        vocab_size: 256,
        max_seq_len: 32,
    };
    cfg.policy = TopKPolicy {
        k: 4,
        n_nontopk: 1,
        anneal_step_ratio: 0.2,
        nonlinearity: Nonlinearity::Relu,
    };
    cfg.train.total_steps = total_steps;
    cfg.train.batch_size = 4;
    cfg.train.seq_len = 16;
    cfg.train.checkpoint_every = (total_steps / 4).max(1);
    cfg.train.lr = 3e-3;
    cfg
}

fn corpus() -> Corpus {
    Corpus::from_bytes(synthetic_stories(20_000, 7).as_bytes(), 0.1).unwrap()
}

fn bits(t: &[&Tensor]) -> Vec<u32> {
    t.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn schedule_laws() {
    let (t, peak) = (1000, 3e-4);
    let mut prev = lr_schedule(0, t, peak, 0.1);
    for s in 1..=t {
        let lr = lr_schedule(s, t, peak, 0.1);
        // no step moves the rate by more than one warmup increment
        assert!((lr - prev).abs() <= peak / 100.0 + 1e-18, "jump at {s}");
        prev = lr;
    }
    assert!((lr_schedule(100, t, peak, 0.1) - peak).abs() < 1e-18);
    assert!((lr_schedule(550, t, peak, 0.1) - peak / 2.0).abs() < 1e-15);
    let mut prev = 1.0;
    for s in 0..=t {
        let a = anneal_alpha(s, t, 0.2).unwrap();
        assert!(a <= prev);
        if s >= 200 {
            assert_eq!(a, 0.0);
        }
        prev = a;
    }
}

proptest! {
    #[test]
    fn clipped_norm_is_bounded(grads in proptest::collection::vec(
        proptest::collection::vec(-50.0f32..50.0, 1..20), 1..6)) {
        let mut g = grads.clone();
        clip_grad_norm(&mut g, 10.0, 0).unwrap();
        let n: f64 = g.iter().flatten().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!(n <= 10.0 + 1e-6);
    }
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let cfg = small(100);
    let c = corpus();
    let a = train(&cfg, &c, None, |_| {}).unwrap();
    let b = train(&cfg, &c, None, |_| {}).unwrap();
    let last = |o: &TrainOutcome| bits(&o.final_checkpoint().params.tensors());
    assert_eq!(a.final_checkpoint().step(), 100);
    assert_eq!(last(&a), last(&b));
    let mut other = cfg.clone();
    other.train.seed = 1;
    let c2 = train(&other, &c, None, |_| {}).unwrap();
    assert_ne!(last(&a), last(&c2));
}

#[test]
fn checkpoint_cadence_includes_step_zero_and_final() {
    let cfg = small(20);
    let out = train(&cfg, &corpus(), None, |_| {}).unwrap();
    let steps: Vec<usize> = out.checkpoints.iter().map(|c| c.step()).collect();
    assert_eq!(steps, vec![0, 5, 10, 15, 20]);
    assert_eq!(out.curve.len(), 20);
    assert_eq!(out.checkpoints[0].meta.alpha, 1.0);
}

#[test]
fn degenerate_topk_reproduces_dense_curve() {
    let mut dense = small(40);
    dense.policy = TopKPolicy::dense(2, 16);
    let mut topk = dense.clone();
    topk.policy = TopKPolicy {
        k: 16,
        n_nontopk: 0,
        anneal_step_ratio: 0.2,
        nonlinearity: Nonlinearity::Identity,
    };
    let c = corpus();
    let a = train(&dense, &c, None, |_| {}).unwrap();
    let b = train(&topk, &c, None, |_| {}).unwrap();
    for (x, y) in a.curve.iter().zip(&b.curve) {
        assert!((x.loss - y.loss).abs() <= 1e-6, "step {}", x.step);
    }
}

#[test]
fn accumulation_matches_full_batch() {
    let mut full = small(4);
    full.train.checkpoint_every = 2;
    full.train.batch_size = 8;
    let mut acc = full.clone();
    acc.train.micro_batches = 4;
    let c = corpus();
    let a = train(&full, &c, None, |_| {}).unwrap();
    let b = train(&acc, &c, None, |_| {}).unwrap();
    for (x, y) in a.model.params.tensors().iter().zip(b.model.params.tensors()) {
        assert!(x.max_abs_diff(y) < 1e-5);
    }
    for (x, y) in a.curve.iter().zip(&b.curve) {
        assert!((x.loss - y.loss).abs() < 1e-5);
    }
}

#[test]
fn zero_output_projection_is_uniform() {
    let cfg = small(10);
    let mut m = Model::init(cfg.model.clone(), cfg.policy.clone(), 0).unwrap();
    m.params.output = Tensor::zeros(m.params.output.shape().to_vec());
    let toks: Vec<usize> = (0..300).map(|i| (i * 13) % 256).collect();
    let ppl = perplexity(&m, &toks, 16, 0.0).unwrap();
    assert!((ppl - 256.0).abs() < 1.0, "{ppl}");
    assert!(matches!(perplexity(&m, &[1], 16, 0.0), Err(Error::Input(_))));
}

#[test]
fn teacher_forced_loss_equals_log_perplexity() {
    let cfg = small(10);
    let m = Model::init(cfg.model.clone(), cfg.policy.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let toks: Vec<usize> = (0..17).map(|_| rng.random_range(0..256)).collect();
    let loss = m.loss(&toks[..16], &toks[1..], 1, 0.0).unwrap() as f64;
    let ppl = perplexity(&m, &toks, 16, 0.0).unwrap();
    assert!((loss - ppl.ln()).abs() < 1e-5);
}

#[test]
fn overfits_a_short_loop() {
    let unit: Vec<u8> = (0..100u32).map(|i| b'a' + (i * 7 % 26) as u8).collect();
    let text: Vec<u8> = unit.iter().cycle().take(20_000).copied().collect();
    let c = Corpus::from_bytes(&text, 0.05).unwrap();
    let mut cfg = small(300);
    cfg.train.lr = 1e-2;
    cfg.train.warmup_ratio = 0.05;
    let out = train(&cfg, &c, None, |_| {}).unwrap();
    let last = out.final_checkpoint();
    let ppl = perplexity(&out.model, &c.val, 16, last.meta.alpha).unwrap();
    assert!(ppl < 1.5, "{ppl}");
}

#[test]
fn run_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path().join("run"));
    let cfg = small(20);
    let out = train(&cfg, &corpus(), Some(&run), |_| {}).unwrap();
    assert_eq!(run.steps().unwrap(), vec![0, 5, 10, 15, 20]);
    assert_eq!(run.config().unwrap(), cfg);
    let back = run.load(20).unwrap();
    assert_eq!(back.meta, out.final_checkpoint().meta);
    assert_eq!(bits(&back.params.tensors()), bits(&out.model.params.tensors()));
    let m = back.model().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let toks: Vec<usize> = (0..12).map(|_| rng.random_range(0..256)).collect();
        let a = m.forward(&toks, 1, 0.0, &[], &[]).unwrap();
        let b = out.model.forward(&toks, 1, 0.0, &[], &[]).unwrap();
        assert_eq!(bits(&[&a.logits]), bits(&[&b.logits]));
    }
    let curve = read_loss_csv(&run.loss_path()).unwrap();
    assert_eq!(curve.len(), 20);
    assert_eq!(curve[3].step, 3);
    assert_eq!(curve[3].loss, out.curve[3].loss);
    assert_eq!(
        std::fs::read_to_string(run.loss_path()).unwrap().lines().next(),
        Some("step,loss,lr,alpha")
    );
    assert!(!run.val_tokens().unwrap().is_empty());
    assert!(run.load(7).is_err());
}

#[test]
fn divergence_keeps_earlier_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path().join("boom"));
    let mut cfg = small(40);
    cfg.train.lr = 1e35;
    cfg.train.warmup_ratio = 0.01;
    let err = train(&cfg, &corpus(), Some(&run), |_| {}).err().expect("must diverge");
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    assert!(run.steps().unwrap().contains(&0));
}

#[test]
fn rejects_short_corpus_and_bad_config() {
    let cfg = small(10);
    let c = Corpus::from_bytes(b"hello world", 0.2).unwrap();
    assert!(train(&cfg, &c, None, |_| {}).is_err());
    let mut bad = small(10);
    bad.train.micro_batches = 3;
    assert!(matches!(train(&bad, &corpus(), None, |_| {}), Err(Error::Config(_))));
    let mut bad = small(10);
    bad.train.checkpoint_every = 8;
    assert!(bad.validate().is_err());
}
