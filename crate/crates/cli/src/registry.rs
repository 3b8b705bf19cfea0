//! Discovery of training runs under a root directory, with in-memory caches
//! of loaded checkpoints and analyses and a per-run analysis queue.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::Serialize;
use topklm::analysis::corpus_hash;
use topklm::model::Model;
use topklm::training::{CheckpointMeta, RunConfig, RunDir};

use crate::cache::{self, Analysis};
use crate::error::ServiceError;

pub type Result<T> = std::result::Result<T, ServiceError>;

#[derive(Clone, Debug, Serialize)]
pub struct RunInfo {
    pub name: String,
    pub steps: Vec<usize>,
    pub config: RunConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckpointInfo {
    pub step: usize,
    pub alpha: f32,
    pub train_loss: Option<f32>,
    pub analyzed: bool,
}

/// A checkpoint ready for inference.
pub struct Loaded {
    pub config: RunConfig,
    pub meta: CheckpointMeta,
    pub model: Model,
}

/// The validation split of a run, used as the probe corpus for analysis.
pub struct Probe {
    pub tokens: Vec<usize>,
    pub hash: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Done,
    Running,
    Queued,
    Failed,
    NotStarted,
}

#[derive(Clone, Debug, Serialize)]
pub struct JobStatus {
    pub run: String,
    pub ckpt: usize,
    pub state: JobState,
    /// Zero-based place in the run's queue when `queued`.
    pub position: Option<usize>,
    /// Checkpoint currently being analyzed for this run, if any.
    pub in_flight: Option<usize>,
    pub elapsed_s: Option<f64>,
    pub error: Option<String>,
}

#[derive(Default)]
struct RunJobs {
    current: Option<(usize, Instant)>,
    queue: VecDeque<usize>,
    failed: HashMap<usize, String>,
}

pub struct Registry {
    root: PathBuf,
    models: Mutex<HashMap<(String, usize), Arc<Loaded>>>,
    analyses: Mutex<HashMap<(String, usize), Arc<Analysis>>>,
    probes: Mutex<HashMap<String, Arc<Probe>>>,
    jobs: Mutex<HashMap<String, RunJobs>>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && !name.contains(['/', '\\'])
        && Path::new(name).file_name().map(|n| n == name).unwrap_or(false)
}

impl Registry {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            models: Mutex::default(),
            analyses: Mutex::default(),
            probes: Mutex::default(),
            jobs: Mutex::default(),
        }
    }

    /// Registry holding the single run at `path`, named by its last
    /// component.
    pub fn for_run_path(path: &Path) -> Result<(Self, String)> {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| ServiceError::bad_request(format!("bad run path {}", path.display())))?
            .to_string();
        let parent = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        Ok((Self::new(parent), name))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Rescans the root; directories without a readable config are skipped.
    pub fn runs(&self) -> Result<Vec<RunInfo>> {
        let mut out = Vec::new();
        let mut names: Vec<String> = fs::read_dir(&self.root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().to_str().map(str::to_string))
            .filter(|n| valid_name(n))
            .collect();
        names.sort();
        for name in names {
            let dir = RunDir::new(self.root.join(&name));
            if !dir.config_path().exists() {
                continue;
            }
            match (dir.config(), dir.steps()) {
                (Ok(config), Ok(steps)) => out.push(RunInfo {
                    name,
                    steps,
                    config,
                }),
                (Err(e), _) | (_, Err(e)) => log::warn!("skipping run '{name}': {e}"),
            }
        }
        Ok(out)
    }

    pub fn run_dir(&self, name: &str) -> Result<RunDir> {
        if !valid_name(name) {
            return Err(ServiceError::UnknownRun(name.to_string()));
        }
        let dir = RunDir::new(self.root.join(name));
        if !dir.config_path().exists() {
            return Err(ServiceError::UnknownRun(name.to_string()));
        }
        Ok(dir)
    }

    /// `step`, or the latest checkpoint when `None`.
    pub fn resolve_step(&self, name: &str, step: Option<usize>) -> Result<usize> {
        let steps = self.run_dir(name)?.steps()?;
        match step {
            Some(s) if steps.contains(&s) => Ok(s),
            Some(s) => Err(ServiceError::UnknownCheckpoint {
                run: name.to_string(),
                step: s,
            }),
            None => steps.last().copied().ok_or_else(|| ServiceError::NoCheckpoints {
                run: name.to_string(),
            }),
        }
    }

    pub fn checkpoints(&self, name: &str) -> Result<Vec<CheckpointInfo>> {
        let dir = self.run_dir(name)?;
        let probe = self.probe(name).ok();
        dir.steps()?
            .into_iter()
            .map(|step| {
                let meta = dir.meta(step)?;
                Ok(CheckpointInfo {
                    step,
                    alpha: meta.alpha,
                    train_loss: meta.train_loss,
                    analyzed: probe
                        .as_ref()
                        .map(|p| cache::is_cached(&dir, step, &p.hash))
                        .unwrap_or(false),
                })
            })
            .collect()
    }

    pub fn model(&self, name: &str, step: usize) -> Result<Arc<Loaded>> {
        let key = (name.to_string(), step);
        if let Some(m) = self.models.lock().unwrap().get(&key) {
            return Ok(m.clone());
        }
        let dir = self.run_dir(name)?;
        if !dir.ckpt_path(step).exists() {
            return Err(ServiceError::UnknownCheckpoint {
                run: name.to_string(),
                step,
            });
        }
        let ck = dir.load(step)?;
        let loaded = Arc::new(Loaded {
            model: ck.model()?,
            config: ck.config,
            meta: ck.meta,
        });
        Ok(self
            .models
            .lock()
            .unwrap()
            .entry(key)
            .or_insert(loaded)
            .clone())
    }

    pub fn probe(&self, name: &str) -> Result<Arc<Probe>> {
        if let Some(p) = self.probes.lock().unwrap().get(name) {
            return Ok(p.clone());
        }
        let dir = self.run_dir(name)?;
        let tokens = dir.val_tokens()?;
        if tokens.is_empty() {
            return Err(ServiceError::bad_request(format!(
                "run '{name}' has an empty validation split"
            )));
        }
        let probe = Arc::new(Probe {
            hash: corpus_hash(&tokens),
            tokens,
        });
        self.probes
            .lock()
            .unwrap()
            .insert(name.to_string(), probe.clone());
        Ok(probe)
    }

    /// A cached analysis, or `NotAnalyzed`.
    pub fn analysis(&self, name: &str, step: usize) -> Result<Arc<Analysis>> {
        let key = (name.to_string(), step);
        if let Some(a) = self.analyses.lock().unwrap().get(&key) {
            return Ok(a.clone());
        }
        let dir = self.run_dir(name)?;
        if !dir.ckpt_path(step).exists() {
            return Err(ServiceError::UnknownCheckpoint {
                run: name.to_string(),
                step,
            });
        }
        let probe = self.probe(name)?;
        match cache::load(&dir, step, &probe.hash)? {
            Some(a) => {
                let a = Arc::new(a);
                self.analyses.lock().unwrap().insert(key, a.clone());
                Ok(a)
            }
            None => Err(ServiceError::NotAnalyzed {
                run: name.to_string(),
                step,
            }),
        }
    }

    /// Returns the cached analysis or computes and stores it (blocking).
    pub fn analyze(&self, name: &str, step: usize) -> Result<Arc<Analysis>> {
        match self.analysis(name, step) {
            Err(ServiceError::NotAnalyzed { .. }) => {}
            other => return other,
        }
        let loaded = self.model(name, step)?;
        let probe = self.probe(name)?;
        let started = Instant::now();
        let a = cache::compute(
            &loaded.model,
            loaded.meta.alpha,
            loaded.config.train.seq_len,
            &probe.tokens,
            step,
            &probe.hash,
        )?;
        let path = cache::store(&self.run_dir(name)?, &a)?;
        log::info!(
            "analyzed {name} step {step} in {:.1}s -> {}",
            started.elapsed().as_secs_f64(),
            path.display()
        );
        let a = Arc::new(a);
        self.analyses
            .lock()
            .unwrap()
            .insert((name.to_string(), step), a.clone());
        Ok(a)
    }

    pub fn job_status(&self, name: &str, step: usize) -> Result<JobStatus> {
        self.resolve_step(name, Some(step))?;
        let analyzed = matches!(self.analysis(name, step), Ok(_));
        let jobs = self.jobs.lock().unwrap();
        let run_jobs = jobs.get(name);
        let mut status = JobStatus {
            run: name.to_string(),
            ckpt: step,
            state: JobState::NotStarted,
            position: None,
            in_flight: run_jobs.and_then(|j| j.current.map(|c| c.0)),
            elapsed_s: None,
            error: None,
        };
        if analyzed {
            status.state = JobState::Done;
        } else if let Some(j) = run_jobs {
            if let Some((_, t)) = j.current.filter(|c| c.0 == step) {
                status.state = JobState::Running;
                status.elapsed_s = Some(t.elapsed().as_secs_f64());
            } else if let Some(pos) = j.queue.iter().position(|&s| s == step) {
                status.state = JobState::Queued;
                status.position = Some(pos);
            } else if let Some(e) = j.failed.get(&step) {
                status.state = JobState::Failed;
                status.error = Some(e.clone());
            }
        }
        Ok(status)
    }

    /// Queues an analysis in the background. At most one job per run runs
    /// at a time; later requests wait in that run's queue.
    pub fn enqueue_analysis(self: &Arc<Self>, name: &str, step: usize) -> Result<JobStatus> {
        let status = self.job_status(name, step)?;
        if matches!(status.state, JobState::Done | JobState::Running | JobState::Queued) {
            return Ok(status);
        }
        let first = {
            let mut jobs = self.jobs.lock().unwrap();
            let j = jobs.entry(name.to_string()).or_default();
            j.failed.remove(&step);
            if j.current.is_none() {
                j.current = Some((step, Instant::now()));
                true
            } else {
                j.queue.push_back(step);
                false
            }
        };
        if first {
            let reg = Arc::clone(self);
            let name = name.to_string();
            std::thread::spawn(move || reg.work(&name, step));
        }
        self.job_status(name, step)
    }

    fn work(&self, name: &str, mut step: usize) {
        loop {
            let result = self.analyze(name, step);
            let mut jobs = self.jobs.lock().unwrap();
            let j = jobs.entry(name.to_string()).or_default();
            if let Err(e) = result {
                log::error!("analysis of {name} step {step} failed: {e}");
                j.failed.insert(step, e.to_string());
            }
            match j.queue.pop_front() {
                Some(next) => {
                    j.current = Some((next, Instant::now()));
                    step = next;
                }
                None => {
                    j.current = None;
                    return;
                }
            }
        }
    }
}
