//! Central-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - central difference|` over every checked element.
    pub max_abs_diff: f32,
    pub step: f32,
    pub tol: f32,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_abs_diff < self.tol
    }
}

/// Checks the gradient of `op` with respect to a single input tensor.
/// See [`finite_diff_check_many`].
pub fn finite_diff_check<F>(
    op: F,
    input: &Tensor,
    step: f32,
    tol: f32,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(
        |g, vars| op(g, vars[0]),
        std::slice::from_ref(input),
        step,
        tol,
        seed,
    )
}

/// Compares reverse-mode gradients of `op` against central differences for
/// every element of every input.
///
/// Non-scalar outputs are reduced by a fixed random projection drawn from
/// `seed`. Refuses with [`Error::NearTie`] when any TopK node in the graph
/// sits within `10 * step` of a selection tie (or of the ReLU kink), since
/// the finite difference is meaningless there.
pub fn finite_diff_check_many<F>(
    op: F,
    inputs: &[Tensor],
    step: f32,
    tol: f32,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    if g.topk_margin() < 10.0 * step {
        return Err(Error::NearTie {
            margin: g.topk_margin(),
            step,
        });
    }
    let numel = g.value(out).numel();
    let weights = if numel == 1 {
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Some(Tensor::randn(vec![numel], 1.0, &mut rng).into_data())
    };
    let root = match &weights {
        Some(w) => g.project(out, w)?,
        None => out,
    };
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        let y = g.value(out).data();
        Ok(match &weights {
            Some(w) => y.iter().zip(w).map(|(&a, &b)| a as f64 * b as f64).sum(),
            None => y[0] as f64,
        })
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_abs_diff = 0.0f32;
    let mut checked = 0;
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[t].numel() {
            let orig = inputs[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = ((plus - minus) / (2.0 * step as f64)) as f32;
            max_abs_diff = max_abs_diff.max((numeric - grad.data()[i]).abs());
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_abs_diff,
        step,
        tol,
        checked,
    })
}
