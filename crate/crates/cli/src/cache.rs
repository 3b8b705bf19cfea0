//! Analysis artifacts cached under `<run>/analysis/step_<N>/<corpus hash>/`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use topklm::analysis::{
    collect_token_stats, frequency_weights, summary_csv, EntropyReport, NeuronTokenStats,
    ReportOptions,
};
use topklm::model::Model;
use topklm::training::{write_atomic, RunDir};

use crate::error::ServiceError;

const STATS_FILE: &str = "stats.bin";
const REPORT_FILE: &str = "report.json";

/// Statistics and entropy report of one checkpoint over one probe corpus.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub step: usize,
    pub corpus_hash: String,
    pub stats: NeuronTokenStats,
    pub report: EntropyReport,
}

pub fn cache_dir(run: &RunDir, step: usize, corpus_hash: &str) -> PathBuf {
    run.analysis_dir()
        .join(format!("step_{step}"))
        .join(corpus_hash)
}

pub fn is_cached(run: &RunDir, step: usize, corpus_hash: &str) -> bool {
    cache_dir(run, step, corpus_hash).join(REPORT_FILE).exists()
}

pub fn load(run: &RunDir, step: usize, corpus_hash: &str) -> Result<Option<Analysis>, ServiceError> {
    let dir = cache_dir(run, step, corpus_hash);
    if !dir.join(REPORT_FILE).exists() {
        return Ok(None);
    }
    let stats = NeuronTokenStats::load(&dir.join(STATS_FILE))?;
    let report: EntropyReport =
        serde_json::from_str(&fs::read_to_string(dir.join(REPORT_FILE))?).map_err(topklm::Error::from)?;
    Ok(Some(Analysis {
        step,
        corpus_hash: corpus_hash.to_string(),
        stats,
        report,
    }))
}

/// Every layer of `model` over `probe` in windows of `seq_len`.
pub fn compute(
    model: &Model,
    alpha: f32,
    seq_len: usize,
    probe: &[usize],
    step: usize,
    corpus_hash: &str,
) -> Result<Analysis, ServiceError> {
    let layers: Vec<usize> = (0..model.config.num_layers).collect();
    let stats = collect_token_stats(model, probe, &layers, seq_len, alpha)?;
    let freqs = frequency_weights(probe, model.config.vocab_size);
    let report = EntropyReport::compute(
        &stats,
        &model.params.tok_embeddings,
        &freqs,
        ReportOptions::default(),
    )?;
    Ok(Analysis {
        step,
        corpus_hash: corpus_hash.to_string(),
        stats,
        report,
    })
}

static TMP_SEQ: AtomicU64 = AtomicU64::new(0);

/// Writes into a private directory and renames it into place, so readers
/// see either nothing or a complete set of files.
pub fn store(run: &RunDir, analysis: &Analysis) -> Result<PathBuf, ServiceError> {
    let dir = cache_dir(run, analysis.step, &analysis.corpus_hash);
    let parent = dir.parent().expect("cache dir has a parent");
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".tmp-{}-{}-{}",
        analysis.corpus_hash,
        std::process::id(),
        TMP_SEQ.fetch_add(1, Ordering::Relaxed)
    ));
    fs::create_dir_all(&tmp)?;
    let written = write_files(&tmp, analysis);
    if let Err(e) = written {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if fs::rename(&tmp, &dir).is_err() {
        // Another writer finished first; its files are equivalent.
        let _ = fs::remove_dir_all(&tmp);
        if !dir.join(REPORT_FILE).exists() {
            return Err(ServiceError::Io(std::io::Error::other(format!(
                "could not move analysis into {}",
                dir.display()
            ))));
        }
    }
    Ok(dir)
}

fn write_files(dir: &Path, a: &Analysis) -> Result<(), ServiceError> {
    a.stats.save(&dir.join(STATS_FILE))?;
    let json = serde_json::to_string(&a.report).map_err(topklm::Error::from)?;
    write_atomic(&dir.join(REPORT_FILE), json.as_bytes())?;
    write_atomic(&dir.join("entropy.csv"), a.report.to_csv().as_bytes())?;
    write_atomic(&dir.join("summary.csv"), summary_csv(&a.report.summary()).as_bytes())?;
    Ok(())
}
