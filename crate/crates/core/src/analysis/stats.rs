//! Per-(layer, neuron, token) activation sums collected over a probe corpus.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::training::{load_tensors, save_tensors, write_atomic};

/// Activation sums and token occurrence counts for a set of captured layers.
///
/// `sums[i]` is laid out `[vocab, hidden]`: row `d` accumulates the hidden
/// state at every position whose input token is `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronTokenStats {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub layers: Vec<usize>,
    pub sums: Vec<Vec<f64>>,
    pub counts: Vec<u64>,
    pub total: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StatsMeta {
    num_layers: usize,
    hidden_dim: usize,
    vocab_size: usize,
    layers: Vec<usize>,
    total: u64,
}

impl NeuronTokenStats {
    pub fn empty(num_layers: usize, hidden_dim: usize, vocab_size: usize, layers: &[usize]) -> Self {
        Self {
            num_layers,
            hidden_dim,
            vocab_size,
            layers: layers.to_vec(),
            sums: vec![vec![0.0; vocab_size * hidden_dim]; layers.len()],
            counts: vec![0; vocab_size],
            total: 0,
        }
    }

    fn slot(&self, layer: usize) -> Result<usize> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .ok_or(Error::Index {
                what: "captured layer",
                index: layer,
                bound: self.num_layers,
            })
    }

    /// `[vocab, hidden]` sums for `layer`.
    pub fn layer_sums(&self, layer: usize) -> Result<&[f64]> {
        Ok(&self.sums[self.slot(layer)?])
    }

    /// Adds one position: `hidden` is the captured state of each layer in
    /// `self.layers` order.
    fn add_position(&mut self, token: usize, hidden: &[&[f32]]) {
        let d = self.hidden_dim;
        for (sum, h) in self.sums.iter_mut().zip(hidden) {
            let row = &mut sum[token * d..(token + 1) * d];
            for (s, &v) in row.iter_mut().zip(h.iter()) {
                *s += v as f64;
            }
        }
        self.counts[token] += 1;
        self.total += 1;
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if (self.num_layers, self.hidden_dim, self.vocab_size, &self.layers)
            != (other.num_layers, other.hidden_dim, other.vocab_size, &other.layers)
        {
            return Err(Error::config("cannot merge stats with different shapes"));
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.total += other.total;
        Ok(())
    }

    /// Eq.-style mean: activation sum over occurrences of each token divided
    /// by the total number of positions `N`. With `occurrence_mean`, divides
    /// by the token's own count instead (tokens never seen give 0).
    pub fn mu(&self, layer: usize, neuron: usize, occurrence_mean: bool) -> Result<Vec<f64>> {
        let sums = self.layer_sums(layer)?;
        self.check_neuron(neuron)?;
        let d = self.hidden_dim;
        Ok((0..self.vocab_size)
            .map(|t| {
                let s = sums[t * d + neuron];
                if occurrence_mean {
                    if self.counts[t] == 0 {
                        0.0
                    } else {
                        s / self.counts[t] as f64
                    }
                } else if self.total == 0 {
                    0.0
                } else {
                    s / self.total as f64
                }
            })
            .collect())
    }

    /// Occurrence-mean activation `A[d][k]` for every observed token `d`
    /// (`None` when the token never occurred).
    pub fn occurrence_means(&self, layer: usize) -> Result<Vec<Option<Vec<f64>>>> {
        let sums = self.layer_sums(layer)?;
        let d = self.hidden_dim;
        Ok((0..self.vocab_size)
            .map(|t| {
                let c = self.counts[t];
                (c > 0).then(|| sums[t * d..(t + 1) * d].iter().map(|s| s / c as f64).collect())
            })
            .collect())
    }

    fn check_neuron(&self, neuron: usize) -> Result<()> {
        if neuron >= self.hidden_dim {
            return Err(Error::Index {
                what: "neuron",
                index: neuron,
                bound: self.hidden_dim,
            });
        }
        Ok(())
    }

    fn sidecar(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes `sum_l{ℓ}` `[vocab, hidden]` and `count_l{ℓ}` `[vocab]` tensors
    /// (f32) plus a `.json` metadata sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut owned = Vec::new();
        for (l, sum) in self.layers.iter().zip(&self.sums) {
            owned.push((
                format!("sum_l{l}"),
                Tensor::new(
                    vec![self.vocab_size, self.hidden_dim],
                    sum.iter().map(|&v| v as f32).collect(),
                )?,
            ));
            owned.push((
                format!("count_l{l}"),
                Tensor::new(
                    vec![self.vocab_size],
                    self.counts.iter().map(|&c| c as f32).collect(),
                )?,
            ));
        }
        let refs: Vec<(&str, &Tensor)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save_tensors(path, &refs)?;
        let meta = StatsMeta {
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            vocab_size: self.vocab_size,
            layers: self.layers.clone(),
            total: self.total,
        };
        write_atomic(&Self::sidecar(path), serde_json::to_string_pretty(&meta)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: StatsMeta = serde_json::from_str(&std::fs::read_to_string(Self::sidecar(path))?)?;
        let tensors = load_tensors(path)?;
        let find = |name: String| {
            tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("stats file lacks '{name}'")))
        };
        let mut stats = Self::empty(meta.num_layers, meta.hidden_dim, meta.vocab_size, &meta.layers);
        for (i, &l) in meta.layers.iter().enumerate() {
            let sum = find(format!("sum_l{l}"))?;
            if sum.shape() != [meta.vocab_size, meta.hidden_dim] {
                return Err(Error::Format(format!("sum_l{l} has shape {:?}", sum.shape())));
            }
            stats.sums[i] = sum.data().iter().map(|&v| v as f64).collect();
            let count = find(format!("count_l{l}"))?;
            if count.shape() != [meta.vocab_size] {
                return Err(Error::Format(format!("count_l{l} has shape {:?}", count.shape())));
            }
            if i == 0 {
                stats.counts = count.data().iter().map(|&c| c as u64).collect();
            }
        }
        stats.total = meta.total;
        Ok(stats)
    }
}

/// Streams `tokens` through `model` in non-overlapping windows of `seq_len`
/// and accumulates post-block hidden states of `layers` per input token.
pub fn collect_token_stats(
    model: &Model,
    tokens: &[usize],
    layers: &[usize],
    seq_len: usize,
    alpha: f32,
) -> Result<NeuronTokenStats> {
    let cfg = &model.config;
    if tokens.is_empty() {
        return Err(Error::input("probe corpus is empty"));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l >= cfg.num_layers) {
        return Err(Error::Index {
            what: "layer",
            index: bad,
            bound: cfg.num_layers,
        });
    }
    let seq_len = seq_len.clamp(1, cfg.max_seq_len);
    let d = cfg.hidden_dim;
    let mut stats = NeuronTokenStats::empty(cfg.num_layers, d, cfg.vocab_size, layers);
    let windows: Vec<&[usize]> = tokens.chunks(seq_len).collect();
    let mut run = |group: &[&[usize]]| -> Result<()> {
        let len = group[0].len();
        let flat: Vec<usize> = group.iter().flat_map(|w| w.iter().copied()).collect();
        let out = model.forward(&flat, group.len(), alpha, &[], layers)?;
        let captured: Vec<&[f32]> = layers.iter().map(|l| out.hidden[l].data()).collect();
        for (pos, &tok) in flat.iter().enumerate() {
            let rows: Vec<&[f32]> = captured.iter().map(|h| &h[pos * d..(pos + 1) * d]).collect();
            stats.add_position(tok, &rows);
        }
        debug_assert_eq!(flat.len(), group.len() * len);
        Ok(())
    };
    let (full, tail): (Vec<_>, Vec<_>) = windows.into_iter().partition(|w| w.len() == seq_len);
    for group in full.chunks(8) {
        run(group)?;
    }
    for w in tail {
        run(&[w])?;
    }
    Ok(stats)
}

/// Hex SHA-256 of a token stream (as bytes), used to key analysis caches.
pub fn corpus_hash(tokens: &[usize]) -> String {
    let mut h = Sha256::new();
    for &t in tokens {
        h.update((t as u32).to_le_bytes());
    }
    hex::encode(h.finalize())
}
