#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use tempfile::TempDir;
use topklm::model::{ModelConfig, TopKPolicy};
use topklm::topk::Nonlinearity;
use topklm::training::{synthetic_stories, train, Corpus, RunConfig, RunDir};

pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.model = ModelConfig {
        hidden_dim: 16,
        num_layers: 3,
        num_heads: 2,
        ffn_dim: 32,
        vocab_size: 256,
        max_seq_len: 64,
    };
    cfg.policy = TopKPolicy {
        k: 4,
        n_nontopk: 1,
        anneal_step_ratio: 0.2,
        nonlinearity: Nonlinearity::Relu,
    };
    cfg.train.total_steps = 30;
    cfg.train.checkpoint_every = 10;
    cfg.train.batch_size = 4;
    cfg.train.seq_len = 32;
    cfg.train.lr = 3e-3;
    cfg
}

pub fn tiny_corpus() -> Corpus {
    Corpus::from_bytes(synthetic_stories(60_000, 3).as_bytes(), 0.05).unwrap()
}

/// A trained tiny run, built once per test binary.
pub fn source_run() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path().join("tiny"));
        train(&tiny_config(), &tiny_corpus(), Some(&run), |_| {}).unwrap();
        dir
    })
    .path()
    .join("tiny")
    .leak()
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let target = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &target);
        } else {
            fs::copy(e.path(), target).unwrap();
        }
    }
}

/// A private registry root holding a copy of the tiny run under `name`.
pub fn fresh_root(name: &str) -> (TempDir, PathBuf) {
    let root = tempfile::tempdir().unwrap();
    let run = root.path().join(name);
    copy_dir(source_run(), &run);
    (root, run)
}
