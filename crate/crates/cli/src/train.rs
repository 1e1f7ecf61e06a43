//! `train`: run a configured job and serialise its trace.

use std::fmt;
use std::io::{self, Write};
use std::time::{Duration, Instant};

use arctopk::collective::{run_inproc, Comm, CommLedger, Primitive, Transport};
use arctopk::optimizer::{run_training, TrainRecord};
use arctopk::workload::Problem;
use arctopk::{Error, Result};

use crate::config::RunConfig;

pub const CSV_VERSION_LINE: &str = "# arctopk-train-csv v1";
pub const CSV_HEADER: &str = "t,loss,grad_norm_sq,cumulative_entries";

/// Rank 0's view of a finished (or diverged) run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub records: Vec<TrainRecord>,
    pub ledger: CommLedger,
    pub diverged_at: Option<usize>,
    pub f_star: Option<f64>,
    pub elapsed: Duration,
}

fn run_rank<T: Transport>(comm: &mut Comm<T>, problem: &dyn Problem, cfg: &RunConfig) -> Result<TrainOutput> {
    let spec = cfg.train_spec(problem);
    let start = Instant::now();
    let run = run_training(comm, problem, &spec)?;
    Ok(TrainOutput {
        records: run.records,
        ledger: run.ledger,
        diverged_at: run.diverged_at,
        f_star: problem.optimal_value(),
        elapsed: start.elapsed(),
    })
}

/// All ranks as threads of this process.
pub fn train_inproc(cfg: &RunConfig) -> Result<TrainOutput> {
    let problem = cfg.build_problem()?;
    let mut outs = run_inproc(cfg.nodes, |comm| run_rank(comm, problem.as_ref(), cfg))?;
    Ok(outs.swap_remove(0))
}

/// This process's rank of a job whose group is already connected.
pub fn train_rank<T: Transport>(cfg: &RunConfig, comm: &mut Comm<T>) -> Result<TrainOutput> {
    if comm.world_size() != cfg.nodes {
        return Err(Error::InvalidConfig(format!(
            "config has {} nodes but the group has {} ranks",
            cfg.nodes,
            comm.world_size()
        )));
    }
    let problem = cfg.build_problem()?;
    run_rank(comm, problem.as_ref(), cfg)
}

pub fn write_csv<W: Write>(mut w: W, records: &[TrainRecord]) -> io::Result<()> {
    writeln!(w, "{CSV_VERSION_LINE}")?;
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.t, r.loss, r.grad_norm_sq, r.cumulative_entries)?;
    }
    w.flush()
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub method: String,
    pub optimizer: String,
    pub iterations: usize,
    pub completed: usize,
    pub final_loss: f64,
    /// Mean of `||grad f(x_t)||^2` over `t < T` (over the single record when
    /// `T = 0`).
    pub mean_grad_norm_sq: f64,
    pub total_entries: u64,
    pub ledger: CommLedger,
    pub f_star: Option<f64>,
    pub target_gap: Option<f64>,
    /// Entries spent when the loss first dropped to `f* + target_gap`.
    pub entries_to_target: Option<u64>,
    pub diverged_at: Option<usize>,
    pub wall_clock: Option<Duration>,
}

impl Summary {
    pub fn new(cfg: &RunConfig, out: &TrainOutput, timing: bool) -> Self {
        let records = &out.records;
        let window = &records[..cfg.iterations.min(records.len().saturating_sub(1)).max(1)];
        let last = records.last().expect("a run records at least x_0");
        let entries_to_target = match (out.f_star, cfg.target_gap) {
            (Some(f), Some(gap)) => records
                .iter()
                .find(|r| r.loss <= f + gap)
                .map(|r| r.cumulative_entries),
            _ => None,
        };
        Self {
            method: cfg.method.to_string(),
            optimizer: cfg.optimizer.name().to_string(),
            iterations: cfg.iterations,
            completed: last.t,
            final_loss: last.loss,
            mean_grad_norm_sq: window.iter().map(|r| r.grad_norm_sq).sum::<f64>() / window.len() as f64,
            total_entries: last.cumulative_entries,
            ledger: out.ledger,
            f_star: out.f_star,
            target_gap: cfg.target_gap,
            entries_to_target,
            diverged_at: out.diverged_at,
            wall_clock: timing.then_some(out.elapsed),
        }
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# arctopk-train-summary v1")?;
        writeln!(f, "method={}", self.method)?;
        writeln!(f, "optimizer={}", self.optimizer)?;
        writeln!(f, "iterations={}", self.iterations)?;
        writeln!(f, "completed_iterations={}", self.completed)?;
        writeln!(f, "final_loss={}", self.final_loss)?;
        writeln!(f, "mean_grad_norm_sq={}", self.mean_grad_norm_sq)?;
        writeln!(f, "total_entries={}", self.total_entries)?;
        for p in Primitive::ALL {
            writeln!(f, "entries_{}={}", p.name(), self.ledger.entries(p))?;
        }
        if let Some(v) = self.f_star {
            writeln!(f, "f_star={v}")?;
        }
        if let Some(gap) = self.target_gap {
            writeln!(f, "target_gap={gap}")?;
            match self.entries_to_target {
                Some(e) => writeln!(f, "entries_to_target={e}")?,
                None => writeln!(f, "entries_to_target=none")?,
            }
        }
        if let Some(step) = self.diverged_at {
            writeln!(f, "diverged_at={step}")?;
        }
        if let Some(w) = self.wall_clock {
            writeln!(f, "wall_clock_seconds={}", w.as_secs_f64())?;
        }
        Ok(())
    }
}
