//! Experiment orchestration: sweep specification, cell execution, resumable
//! CSV results, comparison reports and plots.

mod plot;
mod report;
mod results;

pub use plot::emit_plots;
pub use report::{best_kl_lambda, report, ComparisonReport, ReportEntry};
pub use results::{read_rows, write_rows, ResultRow, RESULT_HEADER};

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, TraceRecord};
use crate::error::{Error, Result};
use crate::seed::{self, stream};
use crate::trainer::{run_episode, EvalPolicy, Trainer, TrainerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Nod,
    Il,
    KlBased,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Nod => "nod",
            PolicyKind::Il => "il",
            PolicyKind::KlBased => "kl_based",
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nod" => Ok(PolicyKind::Nod),
            "il" => Ok(PolicyKind::Il),
            "kl_based" | "kl" => Ok(PolicyKind::KlBased),
            other => Err(Error::Parse(format!("unknown policy {other:?}"))),
        }
    }
}

/// `0.0, 0.05, ..., 0.6`.
pub fn default_lambdas() -> Vec<f64> {
    (0..=12).map(|k| k as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    pub policies: Vec<PolicyKind>,
    pub episodes: u64,
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
    pub drifts: Vec<f64>,
    /// Episodes averaged at the end of each cell when reporting.
    pub final_window: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            trainer: TrainerConfig::default(),
            policies: vec![PolicyKind::Nod, PolicyKind::Il, PolicyKind::KlBased],
            episodes: 300,
            seeds: (0..5).collect(),
            lambdas: default_lambdas(),
            drifts: vec![1.0, 2.0, 4.0],
            final_window: 10,
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.policies.is_empty() || self.drifts.is_empty() {
            return Err(Error::config("policies and drifts must be nonempty"));
        }
        if self.policies.contains(&PolicyKind::KlBased) && self.lambdas.is_empty() {
            return Err(Error::config("kl_based needs at least one lambda"));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::config(format!("lambda {l} must be >= 0")));
        }
        if let Some(d) = self.drifts.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
            return Err(Error::config(format!("drift {d} must be >= 0")));
        }
        if self.episodes == 0 || self.final_window == 0 {
            return Err(Error::config("episodes and final_window must be positive"));
        }
        for &d in &self.drifts {
            self.env_for(d).validate()?;
        }
        self.trainer.validate()
    }

    pub fn env_for(&self, drift: f64) -> EnvConfig {
        EnvConfig {
            drift_step: drift,
            ..self.env.clone()
        }
    }

    /// Every cell in canonical order: drift, then policy (nod, il,
    /// kl_based), then λ, then seed. NOD ignores λ and IL runs at λ = 0;
    /// when IL is present it stands in for kl_based at λ = 0.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut policies = self.policies.clone();
        policies.sort();
        policies.dedup();
        let mut out = Vec::new();
        for &drift in &self.drifts {
            for &policy in &policies {
                let lambdas: Vec<f64> = match policy {
                    PolicyKind::Nod | PolicyKind::Il => vec![0.0],
                    PolicyKind::KlBased => self
                        .lambdas
                        .iter()
                        .copied()
                        .filter(|&l| l > 0.0 || !policies.contains(&PolicyKind::Il))
                        .collect(),
                };
                for lambda in lambdas {
                    for &seed in &self.seeds {
                        out.push(CellKey {
                            policy,
                            drift,
                            lambda,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellKey {
    pub policy: PolicyKind,
    pub drift: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl CellKey {
    /// Hashable identity; floats compared by bit pattern.
    pub fn id(&self) -> (PolicyKind, u64, u64, u64) {
        (self.policy, self.drift.to_bits(), self.lambda.to_bits(), self.seed)
    }

    pub fn of_row(row: &ResultRow) -> Self {
        Self {
            policy: row.policy,
            drift: row.drift,
            lambda: row.lambda,
            seed: row.seed,
        }
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} d={} lambda={} seed={}",
            self.policy, self.drift, self.lambda, self.seed
        )
    }
}

/// Environment seed of evaluation episode `episode`; shared by every policy
/// run with the same cell seed.
pub fn eval_seed(seed: u64, episode: u64) -> u64 {
    seed::derive(seed, &[stream::ENV_EVAL, episode])
}

/// Extra outputs a cell can produce besides its rows.
#[derive(Debug, Clone, Default)]
pub struct CellOutputs {
    /// Trace of the final evaluation episode.
    pub trace: Vec<TraceRecord>,
    pub trainer: Option<Trainer>,
}

/// Runs one cell: for learning policies a training episode followed by a
/// greedy evaluation episode per row, for NOD the evaluation episode only.
pub fn run_cell(spec: &ExperimentSpec, key: CellKey, want_trace: bool) -> Result<(Vec<ResultRow>, CellOutputs)> {
    let env = spec.env_for(key.drift);
    let mut rows = Vec::with_capacity(spec.episodes as usize);
    let mut outputs = CellOutputs::default();
    let last = spec.episodes - 1;
    match key.policy {
        PolicyKind::Nod => {
            for ep in 0..spec.episodes {
                let start = Instant::now();
                let cfg = EnvConfig {
                    seed: eval_seed(key.seed, ep),
                    ..env.clone()
                };
                let (m, trace) = run_episode(&cfg, EvalPolicy::Nod, want_trace && ep == last)?;
                if ep == last {
                    outputs.trace = trace;
                }
                rows.push(ResultRow {
                    policy: key.policy,
                    drift: key.drift,
                    lambda: key.lambda,
                    seed: key.seed,
                    episode: ep,
                    adi: m.adi,
                    orr: m.orr,
                    train_adi: m.adi,
                    train_orr: m.orr,
                    mean_loss: 0.0,
                    wall_time_s: start.elapsed().as_secs_f64(),
                });
            }
        }
        PolicyKind::Il | PolicyKind::KlBased => {
            let cfg = TrainerConfig {
                lambda: if key.policy == PolicyKind::Il { 0.0 } else { key.lambda },
                ..spec.trainer.clone()
            };
            let mut trainer = Trainer::new(&env, &cfg, key.seed)?;
            for ep in 0..spec.episodes {
                let start = Instant::now();
                let train = trainer.train_epoch()?;
                let eval_env = EnvConfig {
                    seed: eval_seed(key.seed, ep),
                    ..env.clone()
                };
                let policy = EvalPolicy::Learned {
                    net: &trainer.online,
                    mode: crate::policy::PolicyMode::Greedy,
                };
                let (m, trace) = run_episode(&eval_env, policy, want_trace && ep == last)?;
                if ep == last {
                    outputs.trace = trace;
                }
                rows.push(ResultRow {
                    policy: key.policy,
                    drift: key.drift,
                    lambda: key.lambda,
                    seed: key.seed,
                    episode: ep,
                    adi: m.adi,
                    orr: m.orr,
                    train_adi: train.metrics.adi,
                    train_orr: train.metrics.orr,
                    mean_loss: train.mean_loss,
                    wall_time_s: start.elapsed().as_secs_f64(),
                });
                log::debug!("{key} episode {ep}: adi {:.3} orr {:.4}", m.adi, m.orr);
            }
            outputs.trainer = Some(trainer);
        }
    }
    Ok((rows, outputs))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Keep complete cells already present in the output file.
    pub resume: bool,
    /// Worker threads; 0 or 1 runs cells sequentially.
    pub jobs: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub cells_total: usize,
    /// Cells taken over from an earlier run.
    pub cells_reused: usize,
    pub cells_run: usize,
    pub failures: Vec<(CellKey, String)>,
}

impl RunSummary {
    pub fn all_completed(&self) -> bool {
        self.failures.is_empty() && self.cells_reused + self.cells_run == self.cells_total
    }
}

fn complete_cells(spec: &ExperimentSpec, rows: Vec<ResultRow>) -> HashMap<(PolicyKind, u64, u64, u64), Vec<ResultRow>> {
    let mut by_cell: HashMap<_, Vec<ResultRow>> = HashMap::new();
    for row in rows {
        by_cell.entry(CellKey::of_row(&row).id()).or_default().push(row);
    }
    by_cell.retain(|_, rows| {
        rows.sort_by_key(|r| r.episode);
        rows.len() as u64 == spec.episodes && rows.iter().enumerate().all(|(k, r)| r.episode == k as u64)
    });
    by_cell
}

/// Executes every cell of `spec`, streaming rows to `out` in canonical
/// order. With `resume`, complete cells already in `out` are kept and only
/// the rest are run; incomplete ones are dropped and rerun. Cell failures
/// are collected in the summary and do not stop other cells.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path, opts: &RunOptions) -> Result<RunSummary> {
    spec.validate()?;
    let cells = spec.cells();
    let mut done = if opts.resume && out.exists() {
        complete_cells(spec, read_rows(out)?)
    } else {
        HashMap::new()
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }

    let mut summary = RunSummary {
        cells_total: cells.len(),
        ..RunSummary::default()
    };
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(File::create(out)?));
    writer.write_record(RESULT_HEADER).map_err(csv_err)?;
    let mut pending = Vec::new();
    for (k, key) in cells.iter().enumerate() {
        if let Some(rows) = done.remove(&key.id()) {
            for row in &rows {
                writer.serialize(row).map_err(csv_err)?;
            }
            summary.cells_reused += 1;
        } else {
            pending.push(k);
        }
    }
    writer.flush()?;
    drop(writer);

    // Single appender: results arrive in any order and are written back in
    // canonical order.
    let mut appender = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(OpenOptions::new().append(true).open(out)?);
    let jobs = opts.jobs.max(1).min(pending.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<Vec<ResultRow>>)>();
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..jobs {
            let tx = tx.clone();
            let (next, pending, cells) = (&next, &pending, &cells);
            scope.spawn(move || loop {
                let slot = next.fetch_add(1, Ordering::SeqCst);
                let Some(&k) = pending.get(slot) else { break };
                let result = run_cell(spec, cells[k], false).map(|(rows, _)| rows);
                if tx.send((slot, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut buffered: BTreeMap<usize, Result<Vec<ResultRow>>> = BTreeMap::new();
        let mut write_next = 0;
        for (slot, result) in rx {
            buffered.insert(slot, result);
            while let Some(result) = buffered.remove(&write_next) {
                let key = cells[pending[write_next]];
                match result {
                    Ok(rows) => {
                        let written = rows
                            .iter()
                            .try_for_each(|row| appender.serialize(row))
                            .map_err(csv_err)
                            .and_then(|()| appender.flush().map_err(Error::from));
                        match written {
                            Ok(()) => {
                                summary.cells_run += 1;
                                log::info!("finished {key}");
                            }
                            Err(e) => summary.failures.push((key, e.to_string())),
                        }
                    }
                    Err(e) => {
                        log::error!("cell {key} failed: {e}");
                        summary.failures.push((key, e.to_string()));
                    }
                }
                write_next += 1;
            }
        }
        Ok(())
    })?;
    Ok(summary)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

/// Writes trace records as JSON lines.
pub fn write_trace(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Parse(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Default location of cell checkpoints under an output directory.
pub fn checkpoint_path(dir: &Path, key: &CellKey) -> PathBuf {
    dir.join(format!(
        "{}_d{}_l{}_s{}.ckpt",
        key.policy, key.drift, key.lambda, key.seed
    ))
}
