//! Request and response types plus the operations behind them. The CLI and
//! the HTTP service both call these, so identical requests give identical
//! results.

use serde::{Deserialize, Serialize};
use topklm::analysis::{trace_from_stats, LayerSummary, NeuronTokenStats, TraceMap};
use topklm::steering::{
    generate as core_generate, steering_effect_score, EffectScore, GenerationParams,
    SteeringSite, SteeringSpec,
};

use crate::error::ServiceError;
use crate::registry::{Registry, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// One steering intervention; `site` defaults to `pre_topk` on TopK layers
/// and `hidden` elsewhere.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteerRequest {
    pub layer: usize,
    pub neuron: usize,
    pub delta: f32,
    #[serde(default)]
    pub site: Option<SteeringSite>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub run: String,
    #[serde(default)]
    pub ckpt: Option<usize>,
    pub prompt: String,
    #[serde(default)]
    pub steering: Vec<SteerRequest>,
    #[serde(default)]
    pub params: GenerationParams,
    /// Overrides `params.seed` when present.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl GenerateRequest {
    pub fn effective_params(&self) -> GenerationParams {
        GenerationParams {
            seed: self.seed.unwrap_or(self.params.seed),
            ..self.params
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub run: String,
    pub ckpt: usize,
    pub seed: u64,
    pub text: String,
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
    /// Model log-probability (temperature 1, unfiltered) of each sampled token.
    pub logprobs: Vec<f64>,
}

fn resolve_specs(reg: &Registry, run: &str, step: usize, steering: &[SteerRequest]) -> Result<Vec<SteeringSpec>> {
    let loaded = reg.model(run, step)?;
    let (cfg, policy) = (&loaded.model.config, &loaded.model.policy);
    steering
        .iter()
        .map(|s| {
            let mut spec = SteeringSpec::auto(s.layer, s.neuron, s.delta, cfg, policy);
            if let Some(site) = s.site {
                spec.site = site;
            }
            spec.validate(cfg, policy)?;
            Ok(spec)
        })
        .collect()
}

pub fn generate(reg: &Registry, req: &GenerateRequest) -> Result<GenerateResponse> {
    let step = reg.resolve_step(&req.run, req.ckpt)?;
    let specs = resolve_specs(reg, &req.run, step, &req.steering)?;
    let loaded = reg.model(&req.run, step)?;
    let params = req.effective_params();
    let g = core_generate(&loaded.model, loaded.meta.alpha, &req.prompt, &specs, &params)?;
    Ok(GenerateResponse {
        run: req.run.clone(),
        ckpt: step,
        seed: params.seed,
        text: g.text,
        tokens: g.tokens,
        prompt_len: g.prompt_len,
        logprobs: g.logprobs,
    })
}

/// Paired-seed steering effect; concept tokens default to the neuron's
/// selected vocabulary subset from the cached analysis.
pub fn effect(
    reg: &Registry,
    req: &GenerateRequest,
    n_samples: usize,
    concept: Option<Vec<usize>>,
) -> Result<EffectScore> {
    let [steer] = req.steering.as_slice() else {
        return Err(ServiceError::bad_request(
            "effect scoring needs exactly one steering intervention",
        ));
    };
    let step = reg.resolve_step(&req.run, req.ckpt)?;
    let spec = resolve_specs(reg, &req.run, step, std::slice::from_ref(steer))?[0];
    let concept = match concept {
        Some(c) => c,
        None => {
            let a = reg.analysis(&req.run, step)?;
            a.report
                .get(spec.layer, spec.neuron)
                .map(|n| n.subset.clone())
                .unwrap_or_default()
        }
    };
    let loaded = reg.model(&req.run, step)?;
    Ok(steering_effect_score(
        &loaded.model,
        loaded.meta.alpha,
        &req.prompt,
        &spec,
        &req.effective_params(),
        n_samples,
        &concept,
    )?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortKey {
    #[default]
    HSem,
    HToken,
    Index,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronRow {
    pub layer: usize,
    pub neuron: usize,
    pub h_token: Option<f64>,
    pub h_sem: Option<f64>,
    pub subset_size: usize,
    pub topk_layer: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronList {
    pub run: String,
    pub ckpt: usize,
    pub sort: SortKey,
    pub neurons: Vec<NeuronRow>,
}

/// Neurons of one layer (or all layers) in ascending order of `sort`;
/// neurons whose key is undefined come last.
pub fn neurons(
    reg: &Registry,
    run: &str,
    ckpt: Option<usize>,
    layer: Option<usize>,
    sort: SortKey,
    limit: Option<usize>,
) -> Result<NeuronList> {
    let step = reg.resolve_step(run, ckpt)?;
    let a = reg.analysis(run, step)?;
    let loaded = reg.model(run, step)?;
    let n_layers = loaded.model.config.num_layers;
    if let Some(l) = layer.filter(|&l| l >= n_layers) {
        return Err(ServiceError::bad_request(format!(
            "layer {l} out of range (model has {n_layers})"
        )));
    }
    let mut rows: Vec<NeuronRow> = a
        .report
        .neurons
        .iter()
        .filter(|n| layer.is_none_or(|l| n.layer == l))
        .map(|n| NeuronRow {
            layer: n.layer,
            neuron: n.neuron,
            h_token: n.h_token,
            h_sem: n.h_sem,
            subset_size: n.subset.len(),
            topk_layer: loaded.model.policy.is_topk_layer(n.layer, n_layers),
        })
        .collect();
    let key = |r: &NeuronRow| match sort {
        SortKey::HSem => r.h_sem,
        SortKey::HToken => r.h_token,
        SortKey::Index => Some(0.0),
    };
    rows.sort_by(|a, b| match (key(a), key(b)) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    }
    .then((a.layer, a.neuron).cmp(&(b.layer, b.neuron))));
    if let Some(n) = limit {
        rows.truncate(n);
    }
    Ok(NeuronList {
        run: run.to_string(),
        ckpt: step,
        sort,
        neurons: rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopToken {
    pub token: usize,
    /// The byte as text when printable.
    pub text: Option<String>,
    /// Mean activation over the token's occurrences.
    pub value: f64,
    pub count: u64,
    pub in_subset: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopTokens {
    pub run: String,
    pub ckpt: usize,
    pub layer: usize,
    pub neuron: usize,
    pub theta: f64,
    pub h_token: Option<f64>,
    pub h_sem: Option<f64>,
    pub tokens: Vec<TopToken>,
}

fn printable(token: usize) -> Option<String> {
    let b = u8::try_from(token).ok()?;
    (b.is_ascii_graphic() || b == b' ').then(|| (b as char).to_string())
}

pub fn top_tokens(
    reg: &Registry,
    run: &str,
    ckpt: Option<usize>,
    layer: usize,
    neuron: usize,
    limit: usize,
) -> Result<TopTokens> {
    let step = reg.resolve_step(run, ckpt)?;
    let a = reg.analysis(run, step)?;
    let entry = a.report.get(layer, neuron).ok_or_else(|| {
        ServiceError::bad_request(format!("no neuron {neuron} on layer {layer}"))
    })?;
    let theta = a
        .report
        .thresholds
        .iter()
        .find(|t| t.0 == layer)
        .map(|t| t.1)
        .unwrap_or(f64::INFINITY);
    let means = a.stats.occurrence_means(layer)?;
    let mut tokens: Vec<TopToken> = means
        .iter()
        .enumerate()
        .filter_map(|(t, row)| {
            row.as_ref().map(|r| TopToken {
                token: t,
                text: printable(t),
                value: r[neuron],
                count: a.stats.counts[t],
                in_subset: entry.subset.contains(&t),
            })
        })
        .collect();
    tokens.sort_by(|x, y| y.value.total_cmp(&x.value).then(x.token.cmp(&y.token)));
    tokens.truncate(limit);
    Ok(TopTokens {
        run: run.to_string(),
        ckpt: step,
        layer,
        neuron,
        theta,
        h_token: entry.h_token,
        h_sem: entry.h_sem,
        tokens,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub run: String,
    pub ckpt: usize,
    pub n_bins: usize,
    pub thresholds: Vec<(usize, f64)>,
    pub layers: Vec<LayerSummary>,
}

pub fn entropy_summary(reg: &Registry, run: &str, ckpt: Option<usize>) -> Result<EntropySummary> {
    let step = reg.resolve_step(run, ckpt)?;
    let a = reg.analysis(run, step)?;
    Ok(EntropySummary {
        run: run.to_string(),
        ckpt: step,
        n_bins: a.report.n_bins,
        thresholds: a.report.thresholds.clone(),
        layers: a.report.summary(),
    })
}

/// Traces one dimension across every checkpoint of a run. With
/// `compute_missing`, unanalyzed checkpoints are analyzed first; otherwise
/// they produce `NotAnalyzed`.
pub fn trace(reg: &Registry, run: &str, dim: usize, token: usize, compute_missing: bool) -> Result<TraceMap> {
    let steps = reg.run_dir(run)?.steps()?;
    if steps.is_empty() {
        return Err(ServiceError::NoCheckpoints { run: run.to_string() });
    }
    let analyses = steps
        .iter()
        .map(|&s| {
            if compute_missing {
                reg.analyze(run, s)
            } else {
                reg.analysis(run, s)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(usize, &NeuronTokenStats)> = analyses.iter().map(|a| (a.step, &a.stats)).collect();
    Ok(trace_from_stats(&refs, dim, token)?)
}

