//! Following one hidden dimension, and entropy summaries, across checkpoints.

use serde::{Deserialize, Serialize};

use super::entropy::{layer_threshold, EntropyReport, ReportOptions};
use super::stats::{collect_token_stats, NeuronTokenStats};
use crate::error::{Error, Result};
use crate::training::Checkpoint;

/// Grid of `(checkpoint, layer)` occurrence-mean activations of one
/// dimension on one query token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMap {
    pub dim: usize,
    pub token: usize,
    pub steps: Vec<usize>,
    pub num_layers: usize,
    /// `values[c][l]`
    pub values: Vec<Vec<f64>>,
    pub thresholds: Vec<Vec<f64>>,
    pub markers: Vec<Vec<bool>>,
}

fn check_sequence(ckpts: &[Checkpoint]) -> Result<()> {
    let first = ckpts
        .first()
        .ok_or_else(|| Error::input("no checkpoints given"))?;
    if ckpts
        .iter()
        .any(|c| c.config.model != first.config.model)
    {
        return Err(Error::config("checkpoints disagree on model shape"));
    }
    Ok(())
}

pub fn trace_dimension(
    ckpts: &[Checkpoint],
    probe: &[usize],
    dim: usize,
    token: usize,
    seq_len: usize,
) -> Result<TraceMap> {
    check_sequence(ckpts)?;
    let cfg = &ckpts[0].config.model;
    if dim >= cfg.hidden_dim {
        return Err(Error::Index {
            what: "dim",
            index: dim,
            bound: cfg.hidden_dim,
        });
    }
    if !probe.contains(&token) {
        return Err(missing_token(token));
    }
    let layers: Vec<usize> = (0..cfg.num_layers).collect();
    let mut stats = Vec::with_capacity(ckpts.len());
    for ck in ckpts {
        let model = ck.model()?;
        let s = collect_token_stats(&model, probe, &layers, seq_len, ck.meta.alpha)?;
        stats.push((ck.step(), s));
    }
    let refs: Vec<(usize, &NeuronTokenStats)> = stats.iter().map(|(s, st)| (*s, st)).collect();
    trace_from_stats(&refs, dim, token)
}

/// [`trace_dimension`] over precomputed per-checkpoint statistics, which
/// must capture every layer.
pub fn trace_from_stats(stats: &[(usize, &NeuronTokenStats)], dim: usize, token: usize) -> Result<TraceMap> {
    let first = stats
        .first()
        .ok_or_else(|| Error::input("no checkpoints given"))?
        .1;
    if dim >= first.hidden_dim {
        return Err(Error::Index {
            what: "dim",
            index: dim,
            bound: first.hidden_dim,
        });
    }
    if token >= first.vocab_size || first.counts[token] == 0 {
        return Err(missing_token(token));
    }
    let mut map = TraceMap {
        dim,
        token,
        steps: Vec::new(),
        num_layers: first.num_layers,
        values: Vec::new(),
        thresholds: Vec::new(),
        markers: Vec::new(),
    };
    for &(step, st) in stats {
        if st.hidden_dim != first.hidden_dim || st.layers.len() != st.num_layers {
            return Err(Error::input("trace needs statistics over every layer of one model shape"));
        }
        let mut vals = Vec::with_capacity(st.num_layers);
        let mut ths = Vec::with_capacity(st.num_layers);
        for l in 0..st.num_layers {
            let sums = st.layer_sums(l)?;
            vals.push(sums[token * st.hidden_dim + dim] / st.counts[token] as f64);
            ths.push(layer_threshold(st, l)?.unwrap_or(f64::INFINITY));
        }
        map.markers.push(vals.iter().zip(&ths).map(|(v, t)| v > t).collect());
        map.steps.push(step);
        map.values.push(vals);
        map.thresholds.push(ths);
    }
    Ok(map)
}

fn missing_token(token: usize) -> Error {
    let shown = u8::try_from(token)
        .map(|b| format!(" ({:?})", b as char))
        .unwrap_or_default();
    Error::input(format!(
        "query token {token}{shown} does not occur in the probe corpus"
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub layer: usize,
    pub h_token_mean: Option<f64>,
    pub h_sem_mean: Option<f64>,
}

/// Per-checkpoint mean entropies of `layers`. Needs at least 3 checkpoints.
pub fn checkpoint_entropy_curve(
    ckpts: &[Checkpoint],
    probe: &[usize],
    freqs: &[f64],
    layers: &[usize],
    seq_len: usize,
    opts: ReportOptions,
) -> Result<Vec<CurveRow>> {
    check_sequence(ckpts)?;
    if ckpts.len() < 3 {
        return Err(Error::input(format!(
            "entropy curve needs at least 3 checkpoints, got {}",
            ckpts.len()
        )));
    }
    let mut rows = Vec::new();
    for ck in ckpts {
        let model = ck.model()?;
        let stats = collect_token_stats(&model, probe, layers, seq_len, ck.meta.alpha)?;
        let report = EntropyReport::compute(&stats, &ck.params.tok_embeddings, freqs, opts)?;
        for s in report.summary() {
            rows.push(CurveRow {
                step: ck.step(),
                layer: s.layer,
                h_token_mean: s.h_token_mean,
                h_sem_mean: s.h_sem_mean,
            });
        }
    }
    Ok(rows)
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    let mut out = String::from("step,layer,H_token_mean,H_sem_mean\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step,
            r.layer,
            fmt(r.h_token_mean),
            fmt(r.h_sem_mean)
        ));
    }
    out
}

/// The layers the entropy curve tracks by default: the last TopK layer (if
/// any) and the last layer.
pub fn default_curve_layers(num_layers: usize, n_nontopk: usize) -> Vec<usize> {
    let mut ls = Vec::new();
    if n_nontopk < num_layers {
        ls.push(num_layers - n_nontopk - 1);
    }
    if ls.last() != Some(&(num_layers - 1)) {
        ls.push(num_layers - 1);
    }
    ls
}
