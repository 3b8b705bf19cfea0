use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{write_atomic, Checkpoint, CheckpointMeta, RunConfig, RunDir};
use super::corpus::Corpus;
use super::optim::{clip_grad_norm, lr_schedule, AdamW, AdamWConfig};
use super::tokenizer;
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{Model, ModelParams};
use crate::topk;

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub grad_clip: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Gradient-accumulation chunks per step; must divide `batch_size`.
    #[serde(default = "one")]
    pub micro_batches: usize,
    pub seq_len: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            lr: 3e-4,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.1,
            warmup_ratio: 0.1,
            grad_clip: 10.0,
            total_steps: 2000,
            batch_size: 8,
            micro_batches: 1,
            seq_len: 64,
            checkpoint_every: 200,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(Error::config("warmup_ratio must lie in (0, 1)"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be finite and non-negative"));
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::config("total_steps, batch_size and seq_len must be positive"));
        }
        if self.micro_batches == 0 || self.batch_size % self.micro_batches != 0 {
            return Err(Error::config(format!(
                "micro_batches {} must divide batch_size {}",
                self.micro_batches, self.batch_size
            )));
        }
        if self.checkpoint_every == 0 || self.total_steps / self.checkpoint_every < 2 {
            return Err(Error::config(
                "checkpoint_every must yield at least 3 checkpoints (step 0, one interior, final)",
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        lr_schedule(step, self.total_steps, self.lr, self.warmup_ratio)
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One row of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f32,
    pub lr: f64,
    pub alpha: f32,
}

pub fn write_loss_csv(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in curve {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<LossRecord>,
    /// Every checkpoint taken, in step order.
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainOutcome {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints.last().expect("training always checkpoints")
    }
}

fn sample_batch(
    rng: &mut ChaCha8Rng,
    data: &[usize],
    batch: usize,
    seq: usize,
) -> (Vec<usize>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(batch * seq);
    let mut targets = Vec::with_capacity(batch * seq);
    for _ in 0..batch {
        let start = rng.random_range(0..data.len() - seq);
        inputs.extend_from_slice(&data[start..start + seq]);
        targets.extend_from_slice(&data[start + 1..start + seq + 1]);
    }
    (inputs, targets)
}

/// Trains from scratch. Checkpoints (step 0, every `checkpoint_every`, and
/// the final step) are kept in memory and, when `out` is given, written to
/// disk together with `config.json`, `loss.csv` and `val.bin`.
pub fn train(
    cfg: &RunConfig,
    corpus: &Corpus,
    out: Option<&RunDir>,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    if corpus.train.len() <= tc.seq_len {
        return Err(Error::input(format!(
            "training stream has {} tokens, need more than seq_len {}",
            corpus.train.len(),
            tc.seq_len
        )));
    }
    if let Some(&bad) = corpus.train.iter().find(|&&t| t >= cfg.model.vocab_size) {
        return Err(Error::Index {
            what: "token",
            index: bad,
            bound: cfg.model.vocab_size,
        });
    }
    if let Some(dir) = out {
        fs::create_dir_all(&dir.root)?;
        dir.write_config(cfg)?;
        write_atomic(&dir.val_path(), &tokenizer::decode(&corpus.val))?;
    }

    let params = ModelParams::init(&cfg.model, tc.seed);
    let mut model = Model::new(cfg.model.clone(), cfg.policy.clone(), params)?;
    let sizes: Vec<usize> = model.params.tensors().iter().map(|t| t.numel()).collect();
    let mut opt = AdamW::new(tc.adamw(), &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(1);

    let mut loss_file = match out {
        Some(dir) => {
            let mut f = fs::File::create(dir.loss_path())?;
            writeln!(f, "step,loss,lr,alpha")?;
            Some(f)
        }
        None => None,
    };

    let micro = tc.batch_size / tc.micro_batches;
    let mut curve = Vec::with_capacity(tc.total_steps);
    let mut checkpoints = Vec::new();
    let snapshot = |model: &Model, step: usize, alpha: f32, rng: &ChaCha8Rng, loss: Option<f32>| {
        Checkpoint {
            config: cfg.clone(),
            meta: CheckpointMeta {
                step,
                alpha,
                rng_word_pos: rng.get_word_pos(),
                train_loss: loss,
            },
            params: model.params.clone(),
        }
    };

    for step in 0..tc.total_steps {
        let alpha = topk::anneal_alpha(step, tc.total_steps, cfg.policy.anneal_step_ratio)? as f32;
        if step % tc.checkpoint_every == 0 {
            let ck = snapshot(&model, step, alpha, &rng, curve.last().map(|r: &LossRecord| r.loss));
            if let Some(dir) = out {
                dir.save(&ck)?;
            }
            checkpoints.push(ck);
        }
        let lr = tc.lr_at(step);
        let (inputs, targets) = sample_batch(&mut rng, &corpus.train, tc.batch_size, tc.seq_len);
        let chunk = micro * tc.seq_len;
        let scale = 1.0 / tc.micro_batches as f32;
        let mut acc: Vec<Vec<f32>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        let mut loss_sum = 0.0f64;
        for (inp, tgt) in inputs.chunks(chunk).zip(targets.chunks(chunk)) {
            let (loss, grads) = model.loss_and_grads(inp, tgt, micro, alpha)?;
            loss_sum += loss as f64;
            for (a, g) in acc.iter_mut().zip(&grads) {
                a.iter_mut().zip(g).for_each(|(a, g)| *a += g * scale);
            }
        }
        let loss = (loss_sum / tc.micro_batches as f64) as f32;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("loss is {loss}"),
            });
        }
        clip_grad_norm(&mut acc, tc.grad_clip, step)?;
        {
            let mut slices: Vec<&mut [f32]> = model
                .params
                .tensors_mut()
                .into_iter()
                .map(|t| t.data_mut())
                .collect();
            opt.step(&mut slices, &acc, lr).map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence { step, detail },
                other => other,
            })?;
        }
        let rec = LossRecord {
            step,
            loss,
            lr,
            alpha,
        };
        if let Some(f) = loss_file.as_mut() {
            writeln!(f, "{},{},{},{}", rec.step, rec.loss, rec.lr, rec.alpha)?;
        }
        if step % 100 == 0 {
            log::info!("step {step} loss {loss:.4} lr {lr:.2e} alpha {alpha:.3}");
        }
        on_step(&rec);
        curve.push(rec);
    }
    let end = tc.total_steps;
    let alpha = topk::anneal_alpha(end, end, cfg.policy.anneal_step_ratio)? as f32;
    let ck = snapshot(&model, end, alpha, &rng, curve.last().map(|r| r.loss));
    if let Some(dir) = out {
        dir.save(&ck)?;
    }
    checkpoints.push(ck);
    Ok(TrainOutcome {
        model,
        curve,
        checkpoints,
    })
}

/// Mean next-token cross-entropy (nats) over windows of `seq_len + 1`
/// tokens advancing by `seq_len`, so every token after the first is
/// predicted exactly once.
pub fn mean_loss(model: &Model, tokens: &[usize], seq_len: usize, alpha: f32) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::input("evaluation needs at least 2 tokens"));
    }
    if seq_len == 0 {
        return Err(Error::config("seq_len must be positive"));
    }
    let seq_len = seq_len.min(model.config.max_seq_len);
    let vocab = model.config.vocab_size;
    let mut total = 0.0f64;
    let mut count = 0usize;
    let starts: Vec<usize> = (0..tokens.len() - 1).step_by(seq_len).collect();
    let full: Vec<usize> = starts
        .iter()
        .copied()
        .filter(|&s| s + seq_len < tokens.len())
        .collect();
    let mut score = |windows: &[usize], len: usize| -> Result<()> {
        let mut inputs = Vec::with_capacity(windows.len() * len);
        for &s in windows {
            inputs.extend_from_slice(&tokens[s..s + len]);
        }
        let out = model.forward(&inputs, windows.len(), alpha, &[], &[])?;
        for (b, &s) in windows.iter().enumerate() {
            for t in 0..len {
                let row = &out.logits.data()[(b * len + t) * vocab..(b * len + t + 1) * vocab];
                total -= kernels::log_softmax_at(row, tokens[s + t + 1]);
                count += 1;
            }
        }
        Ok(())
    };
    for batch in full.chunks(8) {
        score(batch, seq_len)?;
    }
    if let Some(&last) = starts.last() {
        let len = tokens.len() - 1 - last;
        if len < seq_len {
            score(&[last], len)?;
        }
    }
    Ok(total / count as f64)
}

pub fn perplexity(model: &Model, tokens: &[usize], seq_len: usize, alpha: f32) -> Result<f64> {
    Ok(mean_loss(model, tokens, seq_len, alpha)?.exp())
}
