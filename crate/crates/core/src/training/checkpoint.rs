//! On-disk formats: the tensor container, run configuration, and
//! checkpoint directories.
//!
//! Container layout (little-endian): magic `TOPKLM1\0`, then per tensor
//! `u32` name length, UTF-8 name, `u8` dtype (0 = f32), `u8` rank, `rank`
//! `u64` dims, raw payload; finally a `u32` tensor count.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams, TopKPolicy};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TOPKLM1\0";
const DTYPE_F32: u8 = 0;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in tensors {
        let name = name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[DTYPE_F32, t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format("truncated tensor file".into()));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn take_u32(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().unwrap()))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_tensors(&bytes)
}

pub fn parse_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut buf = bytes;
    if take(&mut buf, 8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut out = Vec::new();
    while buf.len() > 4 {
        let name_len = take_u32(&mut buf)? as usize;
        let name = String::from_utf8(take(&mut buf, name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let head = take(&mut buf, 2)?;
        if head[0] != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype {}", head[0])));
        }
        let rank = head[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(take(&mut buf, 8)?.try_into().unwrap());
            shape.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("dimension overflow".into()))?;
        let payload = take(&mut buf, numel.checked_mul(4).ok_or_else(|| Error::Format("dimension overflow".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    let count = take_u32(&mut buf)? as usize;
    if count != out.len() {
        return Err(Error::Format(format!(
            "trailer says {count} tensors, found {}",
            out.len()
        )));
    }
    Ok(out)
}

/// Writes `bytes` to `path` through a temporary file and a rename, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_tensors(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors)?;
    write_atomic(path, &buf)
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    parse_tensors(&fs::read(path)?)
}

/// Everything needed to rebuild a run: flat keys in `config.json`/`.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub policy: TopKPolicy,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            policy: TopKPolicy::desk(),
            train: TrainConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.policy.validate(&self.model)?;
        self.train.validate()?;
        if self.train.seq_len > self.model.max_seq_len {
            return Err(Error::config(format!(
                "seq_len {} exceeds max_seq_len {}",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        Ok(())
    }

    /// Reads `.json` or `.toml` depending on the extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| Error::Toml(e.to_string()))?,
            _ => serde_json::from_str(&text)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Sidecar metadata saved next to each checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub alpha: f32,
    /// Data-sampler RNG position (ChaCha word offset) at save time.
    pub rng_word_pos: u128,
    pub train_loss: Option<f32>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub meta: CheckpointMeta,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn step(&self) -> usize {
        self.meta.step
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(
            self.config.model.clone(),
            self.config.policy.clone(),
            self.params.clone(),
        )
    }

    pub fn save_params(&self, path: &Path) -> Result<()> {
        let named = self.params.named();
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        save_tensors(path, &refs)
    }

    pub fn load_params(cfg: &ModelConfig, path: &Path) -> Result<ModelParams> {
        let named: BTreeMap<String, Tensor> = load_tensors(path)?.into_iter().collect();
        ModelParams::from_named(cfg, named)
    }
}

/// A directory holding `config.json`, `step_<N>.ckpt` files with
/// `step_<N>.meta.json` sidecars, the loss curve and validation bytes.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn loss_path(&self) -> PathBuf {
        self.root.join("loss.csv")
    }

    pub fn val_path(&self) -> PathBuf {
        self.root.join("val.bin")
    }

    pub fn ckpt_path(&self, step: usize) -> PathBuf {
        self.root.join(format!("step_{step}.ckpt"))
    }

    pub fn meta_path(&self, step: usize) -> PathBuf {
        self.root.join(format!("step_{step}.meta.json"))
    }

    pub fn analysis_dir(&self) -> PathBuf {
        self.root.join("analysis")
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        write_atomic(&self.config_path(), cfg.to_json()?.as_bytes())
    }

    pub fn config(&self) -> Result<RunConfig> {
        let path = self.config_path();
        if !path.exists() {
            return Err(Error::input(format!("no config.json in {}", self.root.display())));
        }
        RunConfig::load(&path)
    }

    pub fn save(&self, ckpt: &Checkpoint) -> Result<()> {
        let step = ckpt.step();
        ckpt.save_params(&self.ckpt_path(step))?;
        write_atomic(
            &self.meta_path(step),
            serde_json::to_string_pretty(&ckpt.meta)?.as_bytes(),
        )
    }

    /// Checkpoint steps present on disk, ascending.
    pub fn steps(&self) -> Result<Vec<usize>> {
        let mut steps = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let name = entry?.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(n) = name
                .strip_prefix("step_")
                .and_then(|s| s.strip_suffix(".ckpt"))
                .and_then(|s| s.parse().ok())
            {
                steps.push(n);
            }
        }
        steps.sort_unstable();
        Ok(steps)
    }

    pub fn load(&self, step: usize) -> Result<Checkpoint> {
        let config = self.config()?;
        let path = self.ckpt_path(step);
        if !path.exists() {
            return Err(Error::input(format!(
                "checkpoint step {step} not found in {}",
                self.root.display()
            )));
        }
        let params = Checkpoint::load_params(&config.model, &path)?;
        let meta = self.meta_for(step, &config)?;
        Ok(Checkpoint {
            config,
            meta,
            params,
        })
    }

    /// Sidecar metadata of a checkpoint, reconstructed from the schedule
    /// when the sidecar is missing.
    pub fn meta(&self, step: usize) -> Result<CheckpointMeta> {
        self.meta_for(step, &self.config()?)
    }

    fn meta_for(&self, step: usize, config: &RunConfig) -> Result<CheckpointMeta> {
        let meta_path = self.meta_path(step);
        if meta_path.exists() {
            return Ok(serde_json::from_str(&fs::read_to_string(meta_path)?)?);
        }
        Ok(CheckpointMeta {
            step,
            alpha: crate::topk::anneal_alpha(
                step,
                config.train.total_steps,
                config.policy.anneal_step_ratio,
            )? as f32,
            rng_word_pos: 0,
            train_loss: None,
        })
    }

    pub fn load_latest(&self) -> Result<Checkpoint> {
        let steps = self.steps()?;
        let last = *steps
            .last()
            .ok_or_else(|| Error::input(format!("no checkpoints in {}", self.root.display())))?;
        self.load(last)
    }

    pub fn val_tokens(&self) -> Result<Vec<usize>> {
        Ok(super::tokenizer::encode(&fs::read(self.val_path())?))
    }
}
