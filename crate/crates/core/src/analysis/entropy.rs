//! Token entropy, vocabulary subsets and semantic entropy of neurons.

use serde::{Deserialize, Serialize};

use super::stats::NeuronTokenStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 1000;
pub const SUBSET_PERCENTILE: f64 = 99.9;
pub const SUBSET_FRACTION: f64 = 0.7;

/// Shannon entropy (nats) of `mass` after clamping negatives to zero and
/// normalizing. `None` when no positive mass remains.
pub fn entropy_of_mass(mass: &[f64]) -> Option<f64> {
    let total: f64 = mass.iter().map(|&m| m.max(0.0)).sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    let h = mass
        .iter()
        .map(|&m| m.max(0.0) / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum::<f64>();
    Some(h.max(0.0))
}

/// H_token of one neuron, in nats.
pub fn token_entropy(
    stats: &NeuronTokenStats,
    layer: usize,
    neuron: usize,
    occurrence_mean: bool,
) -> Result<Option<f64>> {
    Ok(entropy_of_mass(&stats.mu(layer, neuron, occurrence_mean)?))
}

/// Percentile with linear interpolation between closest ranks (the numpy
/// default). `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// `0.7 × 99.9th percentile` of all occurrence-mean activations of `layer`
/// (every neuron, every observed token).
pub fn layer_threshold(stats: &NeuronTokenStats, layer: usize) -> Result<Option<f64>> {
    let a = stats.occurrence_means(layer)?;
    let all: Vec<f64> = a.iter().flatten().flat_map(|row| row.iter().copied()).collect();
    Ok(percentile(&all, SUBSET_PERCENTILE).map(|p| SUBSET_FRACTION * p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabSubset {
    pub tokens: Vec<usize>,
    pub theta: f64,
}

/// Tokens whose occurrence-mean activation on `neuron` exceeds the layer
/// threshold.
pub fn select_vocab_subset(stats: &NeuronTokenStats, layer: usize, neuron: usize) -> Result<VocabSubset> {
    let theta = layer_threshold(stats, layer)?.unwrap_or(f64::INFINITY);
    subset_with_threshold(stats, layer, neuron, theta)
}

pub fn subset_with_threshold(
    stats: &NeuronTokenStats,
    layer: usize,
    neuron: usize,
    theta: f64,
) -> Result<VocabSubset> {
    if neuron >= stats.hidden_dim {
        return Err(Error::Index {
            what: "neuron",
            index: neuron,
            bound: stats.hidden_dim,
        });
    }
    let a = stats.occurrence_means(layer)?;
    let tokens = a
        .iter()
        .enumerate()
        .filter_map(|(t, row)| row.as_ref().filter(|r| r[neuron] > theta).map(|_| t))
        .collect();
    Ok(VocabSubset { tokens, theta })
}

/// Pairwise cosine similarities of embedding rows, `None` for zero rows.
#[derive(Clone, Debug)]
pub struct CosineTable {
    n: usize,
    sims: Vec<f64>,
    zero: Vec<bool>,
}

impl CosineTable {
    pub fn new(embeddings: &Tensor) -> Self {
        let (n, d) = embeddings.as_matrix();
        let data = embeddings.data();
        let norms: Vec<f64> = (0..n)
            .map(|i| {
                data[i * d..(i + 1) * d]
                    .iter()
                    .map(|&v| v as f64 * v as f64)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let mut sims = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let dot: f64 = data[i * d..(i + 1) * d]
                    .iter()
                    .zip(&data[j * d..(j + 1) * d])
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                let s = if norms[i] > 0.0 && norms[j] > 0.0 {
                    (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
                } else {
                    0.0
                };
                sims[i * n + j] = s;
                sims[j * n + i] = s;
            }
        }
        Self {
            n,
            sims,
            zero: norms.iter().map(|&x| x == 0.0).collect(),
        }
    }

    pub fn get(&self, a: usize, b: usize) -> Option<f64> {
        (!self.zero[a] && !self.zero[b]).then(|| self.sims[a * self.n + b])
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticEntropy {
    /// Bits; `None` when fewer than two tokens (or no weighted pair) remain.
    pub bits: Option<f64>,
    /// Pairs dropped because one embedding was the zero vector.
    pub skipped_pairs: usize,
}

/// Bin index of a similarity `s ∈ [-1, 1]` among `n_bins` equal bins.
pub fn similarity_bin(s: f64, n_bins: usize) -> usize {
    (((s + 1.0) / 2.0 * n_bins as f64).floor() as usize).min(n_bins - 1)
}

/// H_sem of a token subset, in bits, from the frequency-weighted histogram
/// of pairwise embedding cosine similarities (unordered pairs, no
/// self-pairs, fixed range `[-1, 1]`).
pub fn semantic_entropy(
    subset: &[usize],
    cosines: &CosineTable,
    freqs: &[f64],
    n_bins: usize,
) -> Result<SemanticEntropy> {
    if n_bins == 0 {
        return Err(Error::config("n_bins must be at least 1"));
    }
    if let Some(&bad) = subset.iter().find(|&&t| t >= cosines.len() || t >= freqs.len()) {
        return Err(Error::Index {
            what: "token",
            index: bad,
            bound: cosines.len().min(freqs.len()),
        });
    }
    let mut hist = vec![0.0f64; n_bins];
    let mut skipped = 0;
    for (i, &a) in subset.iter().enumerate() {
        for &b in &subset[i + 1..] {
            match cosines.get(a, b) {
                Some(s) => hist[similarity_bin(s, n_bins)] += freqs[a] * freqs[b],
                None => skipped += 1,
            }
        }
    }
    if skipped > 0 {
        log::warn!("semantic entropy skipped {skipped} pairs with zero embeddings");
    }
    if subset.len() < 2 {
        return Ok(SemanticEntropy {
            bits: None,
            skipped_pairs: skipped,
        });
    }
    let bits = entropy_of_mass(&hist).map(|h| h / std::f64::consts::LN_2);
    Ok(SemanticEntropy {
        bits,
        skipped_pairs: skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronEntropy {
    pub layer: usize,
    pub neuron: usize,
    pub h_token: Option<f64>,
    pub h_sem: Option<f64>,
    pub subset: Vec<usize>,
}

impl NeuronEntropy {
    pub fn defined(&self) -> bool {
        self.h_token.is_some() && self.h_sem.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub h_token_mean: Option<f64>,
    pub h_token_std: Option<f64>,
    pub h_sem_mean: Option<f64>,
    pub h_sem_std: Option<f64>,
    pub n_token_defined: usize,
    pub n_sem_defined: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub n_bins: usize,
    pub occurrence_mean: bool,
    pub thresholds: Vec<(usize, f64)>,
    pub neurons: Vec<NeuronEntropy>,
}

#[derive(Clone, Copy, Debug)]
pub struct ReportOptions {
    pub n_bins: usize,
    /// Use the per-token occurrence mean for H_token instead of dividing by N.
    pub occurrence_mean: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            n_bins: DEFAULT_BINS,
            occurrence_mean: false,
        }
    }
}

/// Population mean and standard deviation; `None` for an empty sample.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

impl EntropyReport {
    /// Both entropies for every neuron of every captured layer.
    pub fn compute(
        stats: &NeuronTokenStats,
        embeddings: &Tensor,
        freqs: &[f64],
        opts: ReportOptions,
    ) -> Result<Self> {
        let cosines = CosineTable::new(embeddings);
        let mut neurons = Vec::with_capacity(stats.layers.len() * stats.hidden_dim);
        let mut thresholds = Vec::new();
        for &layer in &stats.layers {
            let theta = layer_threshold(stats, layer)?.unwrap_or(f64::INFINITY);
            thresholds.push((layer, theta));
            for neuron in 0..stats.hidden_dim {
                let h_token = token_entropy(stats, layer, neuron, opts.occurrence_mean)?;
                let subset = subset_with_threshold(stats, layer, neuron, theta)?.tokens;
                let h_sem = semantic_entropy(&subset, &cosines, freqs, opts.n_bins)?.bits;
                neurons.push(NeuronEntropy {
                    layer,
                    neuron,
                    h_token,
                    h_sem,
                    subset,
                });
            }
        }
        Ok(Self {
            n_bins: opts.n_bins,
            occurrence_mean: opts.occurrence_mean,
            thresholds,
            neurons,
        })
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut ls: Vec<usize> = self.neurons.iter().map(|n| n.layer).collect();
        ls.dedup();
        ls
    }

    pub fn get(&self, layer: usize, neuron: usize) -> Option<&NeuronEntropy> {
        self.neurons
            .iter()
            .find(|n| n.layer == layer && n.neuron == neuron)
    }

    /// Per-layer mean and population std of each entropy over defined neurons.
    pub fn summary(&self) -> Vec<LayerSummary> {
        self.layers()
            .into_iter()
            .map(|layer| {
                let of = |f: fn(&NeuronEntropy) -> Option<f64>| -> Vec<f64> {
                    self.neurons
                        .iter()
                        .filter(|n| n.layer == layer)
                        .filter_map(f)
                        .collect()
                };
                let ht = of(|n| n.h_token);
                let hs = of(|n| n.h_sem);
                let t = mean_std(&ht);
                let s = mean_std(&hs);
                LayerSummary {
                    layer,
                    h_token_mean: t.map(|x| x.0),
                    h_token_std: t.map(|x| x.1),
                    h_sem_mean: s.map(|x| x.0),
                    h_sem_std: s.map(|x| x.1),
                    n_token_defined: ht.len(),
                    n_sem_defined: hs.len(),
                }
            })
            .collect()
    }

    /// `layer,neuron,h_token,h_sem,defined`; undefined values are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,neuron,h_token,h_sem,defined\n");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for n in &self.neurons {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                n.layer,
                n.neuron,
                fmt(n.h_token),
                fmt(n.h_sem),
                n.defined()
            ));
        }
        out
    }
}

pub fn summary_csv(rows: &[LayerSummary]) -> String {
    let mut out = String::from(
        "layer,h_token_mean,h_token_std,h_sem_mean,h_sem_std,n_token_defined,n_sem_defined\n",
    );
    let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.layer,
            fmt(r.h_token_mean),
            fmt(r.h_token_std),
            fmt(r.h_sem_mean),
            fmt(r.h_sem_std),
            r.n_token_defined,
            r.n_sem_defined
        ));
    }
    out
}
