//! The TopK activation, its annealed blend, and the schedule that drives it.
//!
//! `y_i = f(x_i)` for the `k` largest pre-activations and `0` elsewhere.
//! During annealing the non-selected coordinates keep `alpha * f(x_i)`, which
//! equals `alpha*f(x) + (1-alpha)*(f(x) ⊙ mask)` coordinate by coordinate.
//! Writing it this way keeps the `k = d` and `alpha = 1` cases bit-exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Relu,
    Identity,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Nonlinearity::Relu => x.max(0.0),
            Nonlinearity::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f32) -> f32 {
        match self {
            Nonlinearity::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "identity" => Ok(Self::Identity),
            other => Err(Error::config(format!("unknown nonlinearity '{other}'"))),
        }
    }
}

/// Marks the `k` largest entries of `x` in `kept`. Equal values are ordered
/// by index, so exactly `k` survive and the lowest indices win ties.
///
/// Returns the gap `τ_k(x) − τ_{k+1}(x)` (`+inf` when `k == x.len()`).
pub fn select_topk(x: &[f32], k: usize, kept: &mut [bool], order: &mut Vec<usize>) -> f32 {
    let d = x.len();
    debug_assert!(k >= 1 && k <= d && kept.len() == d);
    if k == d {
        kept.fill(true);
        return f32::INFINITY;
    }
    order.clear();
    order.extend(0..d);
    let cmp = |&a: &usize, &b: &usize| x[b].total_cmp(&x[a]).then(a.cmp(&b));
    order.select_nth_unstable_by(k - 1, cmp);
    kept.fill(false);
    for &i in &order[..k] {
        kept[i] = true;
    }
    let tau = x[order[k - 1]];
    let next = order[k..]
        .iter()
        .map(|&i| x[i])
        .fold(f32::NEG_INFINITY, f32::max);
    tau - next
}

pub fn check_k(k: usize, d: usize) -> Result<()> {
    if k < 1 || k > d {
        return Err(Error::config(format!("TopK k={k} must satisfy 1 <= k <= {d}")));
    }
    Ok(())
}

pub fn check_alpha(alpha: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("annealing alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Applies the annealed TopK activation to one row in place, recording the
/// selection in `kept`. Returns the selection gap (see [`select_topk`]).
pub fn annealed_topk_row(
    row: &mut [f32],
    k: usize,
    f: Nonlinearity,
    alpha: f32,
    kept: &mut [bool],
    order: &mut Vec<usize>,
) -> f32 {
    let gap = select_topk(row, k, kept, order);
    for (v, &keep) in row.iter_mut().zip(kept.iter()) {
        let fx = f.apply(*v);
        *v = if keep { fx } else { alpha * fx };
    }
    gap
}

/// Hard TopK activation of a single vector.
pub fn topk_activation(x: &[f32], k: usize, f: Nonlinearity) -> Result<Vec<f32>> {
    annealed_topk(x, k, f, 0.0)
}

/// Convex blend of the dense activation `f(x)` (weight `alpha`) and the TopK
/// activation (weight `1 - alpha`).
pub fn annealed_topk(x: &[f32], k: usize, f: Nonlinearity, alpha: f32) -> Result<Vec<f32>> {
    check_k(k, x.len())?;
    check_alpha(alpha)?;
    let mut out = x.to_vec();
    let mut kept = vec![false; x.len()];
    annealed_topk_row(&mut out, k, f, alpha, &mut kept, &mut Vec::new());
    Ok(out)
}

/// Indices retained by TopK selection, ascending.
pub fn kept_indices(x: &[f32], k: usize) -> Result<Vec<usize>> {
    check_k(k, x.len())?;
    let mut kept = vec![false; x.len()];
    select_topk(x, k, &mut kept, &mut Vec::new());
    Ok(kept
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect())
}

/// Linear decay of the annealing factor: `1` at step 0, `0` from
/// `ratio * total_steps` onward. A ratio of `0` disables annealing.
pub fn anneal_alpha(step: usize, total_steps: usize, anneal_step_ratio: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::config("total_steps must be positive"));
    }
    if !(0.0..=1.0).contains(&anneal_step_ratio) {
        return Err(Error::config(format!(
            "anneal_step_ratio {anneal_step_ratio} outside [0, 1]"
        )));
    }
    if anneal_step_ratio == 0.0 {
        return Ok(0.0);
    }
    let span = anneal_step_ratio * total_steps as f64;
    Ok((1.0 - step as f64 / span).max(0.0))
}

/// Layers `[0, L - n_nontopk)` carry the TopK activation; the rest stay dense.
pub fn layer_is_topk(layer_index: usize, num_layers: usize, n_nontopk: usize) -> bool {
    layer_index < num_layers.saturating_sub(n_nontopk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ID: Nonlinearity = Nonlinearity::Identity;

    #[test]
    fn keeps_two_largest() {
        let y = topk_activation(&[3.0, -1.0, 2.0, 0.0, 5.0], 2, ID).unwrap();
        assert_eq!(y, vec![3.0, 0.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn full_k_is_identity() {
        let x = [0.5, -2.0, 7.0, 1e-9];
        assert_eq!(topk_activation(&x, 4, ID).unwrap(), x.to_vec());
    }

    #[test]
    fn relu_zeroes_negative_survivors() {
        let x = [-3.0, -1.0, -2.0];
        assert_eq!(kept_indices(&x, 2).unwrap(), vec![1, 2]);
        assert_eq!(
            topk_activation(&x, 2, Nonlinearity::Relu).unwrap(),
            vec![0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn ties_keep_lowest_indices() {
        assert_eq!(kept_indices(&[1.0, 1.0, 1.0], 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn bad_k_is_config_error() {
        assert!(matches!(topk_activation(&[1.0], 2, ID), Err(Error::Config(_))));
        assert!(matches!(topk_activation(&[1.0], 0, ID), Err(Error::Config(_))));
    }

    #[test]
    fn annealed_endpoints_and_midpoint() {
        let x = [3.0, -1.0, 2.0, 0.0, 5.0];
        assert_eq!(annealed_topk(&x, 2, ID, 1.0).unwrap(), x.to_vec());
        assert_eq!(
            annealed_topk(&x, 2, ID, 0.0).unwrap(),
            vec![3.0, 0.0, 0.0, 0.0, 5.0]
        );
        assert_eq!(annealed_topk(&[4.0, 2.0], 1, ID, 0.5).unwrap(), vec![4.0, 1.0]);
        assert!(annealed_topk(&x, 2, ID, 1.5).is_err());
        assert!(annealed_topk(&x, 2, ID, -0.1).is_err());
    }

    #[test]
    fn alpha_schedule_points() {
        let t = 2000;
        assert_eq!(anneal_alpha(0, t, 0.2).unwrap(), 1.0);
        assert_eq!(anneal_alpha(400, t, 0.2).unwrap(), 0.0);
        assert_eq!(anneal_alpha(200, t, 0.2).unwrap(), 0.5);
        assert_eq!(anneal_alpha(1999, t, 0.2).unwrap(), 0.0);
        assert!(anneal_alpha(0, 0, 0.2).is_err());
    }

    #[test]
    fn hybrid_placement() {
        assert!(layer_is_topk(21, 24, 2));
        assert!(!layer_is_topk(22, 24, 2));
        assert!((0..8).all(|l| layer_is_topk(l, 8, 0)));
        assert!((0..8).all(|l| !layer_is_topk(l, 8, 8)));
    }

    proptest! {
        #[test]
        fn exactly_k_kept(x in prop::collection::vec(-4i32..4, 1..40), k_frac in 0.0f64..1.0) {
            // small integer range forces plenty of ties
            let x: Vec<f32> = x.into_iter().map(|v| v as f32).collect();
            let k = 1 + ((x.len() - 1) as f64 * k_frac) as usize;
            let kept = kept_indices(&x, k).unwrap();
            prop_assert_eq!(kept.len(), k);
            let tau = kept.iter().map(|&i| x[i]).fold(f32::INFINITY, f32::min);
            for (i, &v) in x.iter().enumerate() {
                if v > tau { prop_assert!(kept.contains(&i)); }
            }
        }

        #[test]
        fn annealing_is_lipschitz_in_alpha(
            x in prop::collection::vec(-10.0f32..10.0, 2..30),
            a in 0.0f32..1.0,
            b in 0.0f32..1.0,
        ) {
            let k = x.len() / 2 + 1;
            let f = Nonlinearity::Relu;
            let ya = annealed_topk(&x, k, f, a).unwrap();
            let yb = annealed_topk(&x, k, f, b).unwrap();
            for i in 0..x.len() {
                let bound = (a - b).abs() * f.apply(x[i]).abs();
                prop_assert!((ya[i] - yb[i]).abs() <= bound * (1.0 + 1e-5) + 1e-6);
            }
        }
    }
}
