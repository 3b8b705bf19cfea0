//! Reverse-mode gradients against central finite differences.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topklm::autodiff::{finite_diff_check, finite_diff_check_many, Graph, Var};
use topklm::kernels::{AttnDims, Rope};
use topklm::model::{attention_block, ffn_block, LayerVars};
use topklm::topk::Nonlinearity;
use topklm::{Error, Tensor};

const TOL: f32 = 1e-3;
const STEP: f32 = 1e-3;
// Smooth blocks sum many f32 outputs, so rounding noise in the difference
// quotient grows like eps/h; cbrt(eps) balances it against truncation.
const SMOOTH_STEP: f32 = 4.9e-3;

fn randn(shape: Vec<usize>, std: f32, seed: u64) -> Tensor {
    Tensor::randn(shape, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Rows whose entries are a shuffled grid with spacing 0.1 plus small
/// jitter, so no two coordinates (and no coordinate and zero) are closer
/// than 10 finite-difference steps.
fn separated(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut vals: Vec<f32> = (0..cols)
            .map(|i| (i as f32 - cols as f32 / 2.0 + 0.5) * 0.1 + rng.random_range(-0.02..0.02))
            .collect();
        vals.shuffle(&mut rng);
        data.extend(vals);
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn assert_pass(what: &str, seed: u64, r: topklm::autodiff::GradCheckReport) {
    assert!(
        r.passed(),
        "{what} seed {seed}: max diff {} over {} elements",
        r.max_abs_diff,
        r.checked
    );
}

#[test]
fn single_matmul_3x4_4x2() {
    for seed in 0..10 {
        let a = randn(vec![3, 4], 1.0, seed);
        let b = randn(vec![4, 2], 1.0, seed + 100);
        let r = finite_diff_check_many(|g, v| g.matmul(v[0], v[1]), &[a, b], STEP, TOL, seed).unwrap();
        assert_pass("matmul", seed, r);
    }
}

// A matmul chain is linear in each entry, so central differences carry no
// truncation error and a wider step only reduces f32 rounding noise.
#[test]
fn matmul_chain() {
    for seed in 0..10 {
        let a = randn(vec![3, 4], 1.0, seed);
        let b = randn(vec![4, 2], 1.0, seed + 100);
        let c = randn(vec![2, 3], 1.0, seed + 200);
        let r = finite_diff_check_many(
            |g, v| {
                let ab = g.matmul(v[0], v[1])?;
                g.matmul(ab, v[2])
            },
            &[a, b, c],
            1e-2,
            TOL,
            seed,
        )
        .unwrap();
        assert_pass("matmul chain", seed, r);
    }
}

#[test]
fn cross_entropy_5x7() {
    for seed in 0..10 {
        let logits = randn(vec![5, 7], 1.0, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<usize> = (0..5).map(|_| rng.random_range(0..7)).collect();
        let r = finite_diff_check(|g, x| g.cross_entropy(x, &targets), &logits, STEP, TOL, seed).unwrap();
        assert_pass("cross entropy", seed, r);
    }
}

#[test]
fn topk_activation_relu_and_identity() {
    for f in [Nonlinearity::Relu, Nonlinearity::Identity] {
        for seed in 0..10 {
            let x = separated(3, 12, seed);
            let r = finite_diff_check(|g, v| g.annealed_topk(v, 4, f, 0.0), &x, STEP, TOL, seed).unwrap();
            assert_pass("topk", seed, r);
        }
    }
}

#[test]
fn annealed_topk_at_three_alphas() {
    for alpha in [0.0, 0.3, 1.0] {
        for seed in 0..10 {
            let x = separated(3, 12, seed + 50);
            let r = finite_diff_check(
                |g, v| g.annealed_topk(v, 5, Nonlinearity::Relu, alpha),
                &x,
                STEP,
                TOL,
                seed,
            )
            .unwrap();
            assert_pass("annealed topk", seed, r);
        }
    }
}

#[test]
fn topk_refuses_near_ties() {
    let x = Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap();
    let err = finite_diff_check(
        |g, v| g.annealed_topk(v, 2, Nonlinearity::Identity, 0.0),
        &x,
        STEP,
        TOL,
        0,
    );
    assert!(matches!(err, Err(Error::NearTie { .. })));
}

struct Block {
    inputs: Vec<Tensor>,
}

/// Random sublayer parameters at a scale where activations are O(1).
fn block_inputs(d: usize, ffn: usize, rows: usize, seed: u64) -> Block {
    let s = 1.0 / (d as f32).sqrt();
    let mut k = seed * 16;
    let mut next = |shape: Vec<usize>, std: f32| {
        k += 1;
        randn(shape, std, k)
    };
    let x = next(vec![rows, d], 1.0);
    let norm_a = Tensor::new(vec![d], next(vec![d], 0.1).data().iter().map(|v| 1.0 + v).collect()).unwrap();
    let norm_f = Tensor::new(vec![d], next(vec![d], 0.1).data().iter().map(|v| 1.0 + v).collect()).unwrap();
    let inputs = vec![
        x,
        norm_a,
        next(vec![d, d], s),
        next(vec![d, d], s),
        next(vec![d, d], s),
        next(vec![d, d], s),
        norm_f,
        next(vec![d, ffn], s),
        next(vec![d, ffn], s),
        next(vec![ffn, d], 1.0 / (ffn as f32).sqrt()),
    ];
    Block { inputs }
}

fn layer_vars(v: &[Var]) -> LayerVars {
    LayerVars {
        attn_norm: v[1],
        wq: v[2],
        wk: v[3],
        wv: v[4],
        wo: v[5],
        ffn_norm: v[6],
        w_gate: v[7],
        w_up: v[8],
        w_down: v[9],
    }
}

#[test]
fn attention_block_all_inputs() {
    let (d, heads, batch, seq) = (8, 2, 2, 3);
    let rope = Arc::new(Rope::new(d / heads, 16));
    let dims = AttnDims {
        batch,
        seq,
        heads,
        head_dim: d / heads,
    };
    for seed in 0..10 {
        let b = block_inputs(d, 12, batch * seq, seed);
        let r = finite_diff_check_many(
            |g: &mut Graph, v: &[Var]| attention_block(g, v[0], &layer_vars(v), dims, rope.clone()),
            &b.inputs,
            SMOOTH_STEP,
            TOL,
            seed,
        )
        .unwrap();
        assert_pass("attention block", seed, r);
    }
}

#[test]
fn ffn_block_all_inputs() {
    for seed in 0..10 {
        let b = block_inputs(8, 12, 4, seed + 1000);
        let r = finite_diff_check_many(
            |g: &mut Graph, v: &[Var]| ffn_block(g, v[0], &layer_vars(v)),
            &b.inputs,
            SMOOTH_STEP,
            TOL,
            seed,
        )
        .unwrap();
        assert_pass("ffn block", seed, r);
    }
}

#[test]
fn backward_is_linear_in_the_root() {
    // grad(f + g) == grad(f) + grad(g) up to reassociation.
    let a = randn(vec![3, 4], 1.0, 1);
    let b = randn(vec![4, 2], 1.0, 2);
    let grads = |which: u8| {
        let mut g = Graph::new();
        let va = g.param(a.clone());
        let vb = g.param(b.clone());
        let ab = g.matmul(va, vb).unwrap();
        let f = g.sum(ab);
        let sq = g.matmul(va, vb).unwrap();
        let w: Vec<f32> = (0..6).map(|i| i as f32 - 2.5).collect();
        let h = g.project(sq, &w).unwrap();
        let root = match which {
            0 => f,
            1 => h,
            _ => g.add(f, h).unwrap(),
        };
        g.backward(root).unwrap();
        g.grad(va).unwrap()
    };
    let (f, h, both) = (grads(0), grads(1), grads(2));
    for i in 0..f.numel() {
        assert!((f.data()[i] + h.data()[i] - both.data()[i]).abs() < 1e-6);
    }
}
