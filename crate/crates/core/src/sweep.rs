//! Ablation grids over `k`, `n_nontopk` and model width.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{mean_loss, train, Corpus, RunConfig, RunDir};

/// Axis values; an empty axis keeps the base configuration's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub k: Vec<usize>,
    pub n_nontopk: Vec<usize>,
    pub hidden_dim: Vec<usize>,
}

impl SweepGrid {
    /// Parses one `name=v1,v2,...` axis into the grid.
    pub fn add_axis(&mut self, spec: &str) -> Result<()> {
        let (name, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("grid axis '{spec}' is not name=v1,v2,...")))?;
        let values = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config(format!("bad grid value '{v}' in '{spec}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let axis = match name.trim() {
            "k" => &mut self.k,
            "n_nontopk" => &mut self.n_nontopk,
            "hidden_dim" | "d" | "D" => &mut self.hidden_dim,
            other => return Err(Error::config(format!("unknown grid axis '{other}'"))),
        };
        *axis = values;
        Ok(())
    }

    /// Cartesian product in `hidden_dim`, `n_nontopk`, `k` nesting order.
    pub fn cells(&self, base: &RunConfig) -> Vec<(usize, usize, usize)> {
        let or = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
        let ds = or(&self.hidden_dim, base.model.hidden_dim);
        let ns = or(&self.n_nontopk, base.policy.n_nontopk);
        let ks = or(&self.k, base.policy.k);
        let mut out = Vec::new();
        for &d in &ds {
            for &n in &ns {
                for &k in &ks {
                    out.push((k, n, d));
                }
            }
        }
        out
    }
}

impl FromStr for SweepGrid {
    type Err = Error;

    /// `k=8,16;n_nontopk=0,1` (axes separated by `;` or whitespace).
    fn from_str(s: &str) -> Result<Self> {
        let mut g = Self::default();
        for axis in s.split([';', ' ']).filter(|a| !a.trim().is_empty()) {
            g.add_axis(axis)?;
        }
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub k: usize,
    pub n_nontopk: usize,
    pub hidden_dim: usize,
    pub val_loss: Option<f64>,
    pub val_ppl: Option<f64>,
    pub final_train_loss: Option<f32>,
    pub status: String,
}

/// `base` with one cell's values substituted. Head width and FFN width stay
/// fixed when the model width changes.
pub fn cell_config(base: &RunConfig, k: usize, n_nontopk: usize, hidden_dim: usize) -> Result<RunConfig> {
    let mut cfg = base.clone();
    let head_dim = base.model.head_dim();
    if hidden_dim % head_dim != 0 {
        return Err(Error::config(format!(
            "hidden_dim {hidden_dim} is not a multiple of head width {head_dim}"
        )));
    }
    cfg.model.hidden_dim = hidden_dim;
    cfg.model.num_heads = hidden_dim / head_dim;
    cfg.policy.k = k;
    cfg.policy.n_nontopk = n_nontopk;
    cfg.validate()?;
    Ok(cfg)
}

/// Trains and evaluates every cell. Invalid cells are reported with a
/// `skipped:` status instead of aborting the sweep.
pub fn run_sweep(
    base: &RunConfig,
    grid: &SweepGrid,
    corpus: &Corpus,
    eval_tokens: &[usize],
    out_root: Option<&Path>,
    mut on_cell: impl FnMut(&SweepCell),
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for (k, n, d) in grid.cells(base) {
        let mut cell = SweepCell {
            k,
            n_nontopk: n,
            hidden_dim: d,
            val_loss: None,
            val_ppl: None,
            final_train_loss: None,
            status: "ok".into(),
        };
        match cell_config(base, k, n, d) {
            Err(e) => cell.status = format!("skipped: {e}"),
            Ok(cfg) => {
                let dir = out_root.map(|r| RunDir::new(r.join(format!("k{k}_n{n}_d{d}"))));
                let outcome = train(&cfg, corpus, dir.as_ref(), |_| {})?;
                let last = outcome.final_checkpoint();
                let loss = mean_loss(&outcome.model, eval_tokens, cfg.train.seq_len, last.meta.alpha)?;
                cell.val_loss = Some(loss);
                cell.val_ppl = Some(loss.exp());
                cell.final_train_loss = outcome.curve.last().map(|r| r.loss);
            }
        }
        log::info!("sweep cell k={k} n_nontopk={n} D={d}: {}", cell.status);
        on_cell(&cell);
        cells.push(cell);
    }
    Ok(cells)
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    let mut out = String::from("k,n_nontopk,hidden_dim,val_loss,val_ppl,final_train_loss,status\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.k,
            c.n_nontopk,
            c.hidden_dim,
            fmt(c.val_loss),
            fmt(c.val_ppl),
            c.final_train_loss.map(|x| x.to_string()).unwrap_or_default(),
            c.status.replace(',', ";")
        ));
    }
    out
}
