//! EF21M with a pluggable row compressor, plus compressed momentum SGD
//! without error feedback as a baseline.
//!
//! Both run SPMD: every rank calls the same functions in the same order with
//! its own [`GradOracle`], and the iterate stays bit-identical across ranks
//! because every cross-node quantity comes out of a collective.
//!
//! EF21M per node `i`, with the shared iterate `x`:
//!
//! ```text
//! h_i <- (1 - eta) h_i + eta * grad F_i(x, xi)
//! g_i <- g_i + C_local(h_i - g_i)
//! x   <- x - gamma * mean_i g_i
//! ```
//!
//! `mean_i g_i` is never all-reduced densely after initialisation: each rank
//! keeps a copy and adds the round's aggregated compressed difference to it.

use std::str::FromStr;

use crate::collective::{run_inproc, Comm, CommLedger, Transport};
use crate::compressor::{compress_round, CompressorConfig, Method};
use crate::error::{Error, Result};
use crate::matrix::{norm_sq, reshape_vector};
use crate::rng::SeedValue;
use crate::workload::{GradOracle, Problem};

const ROUND_TAG: u64 = 0x726f_756e_64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ef21mConfig {
    pub gamma: f64,
    pub eta: f64,
    pub b_init: usize,
}

impl Ef21mConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidConfig(format!("eta must be in (0, 1], got {}", self.eta)));
        }
        if self.b_init == 0 {
            return Err(Error::InvalidConfig("b_init must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsgdConfig {
    pub gamma: f64,
    pub beta: f64,
}

/// Pads a `d`-vector with zeros to `m * ceil(d / m)` entries so it can be
/// viewed as an `m`-row matrix. Padding rows are all-zero and never win a
/// selection over a row with signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowLayout {
    pub dim: usize,
    pub m: usize,
    pub n: usize,
}

impl RowLayout {
    pub fn new(dim: usize, m: usize) -> Result<Self> {
        if dim == 0 || m == 0 || m > dim {
            return Err(Error::InvalidConfig(format!(
                "cannot lay out dimension {dim} over {m} rows"
            )));
        }
        Ok(Self {
            dim,
            m,
            n: dim.div_ceil(m),
        })
    }

    pub fn padded_len(&self) -> usize {
        self.m * self.n
    }

    fn to_matrix(self, v: &[f64]) -> Result<crate::matrix::DenseMatrix> {
        let mut padded = v.to_vec();
        padded.resize(self.padded_len(), 0.0);
        reshape_vector(&padded, self.m)
    }
}

/// One rank's compressor: method, shape and the per-round seed schedule.
#[derive(Debug, Clone, Copy)]
pub struct RowCompressor {
    pub method: Method,
    pub config: CompressorConfig,
    pub layout: RowLayout,
    pub seed: SeedValue,
}

/// Compressed contribution of one round: this rank's `C_local(v)` and the
/// average over ranks, both as `d`-vectors.
pub struct CompressedUpdate {
    pub local: Vec<f64>,
    pub global: Vec<f64>,
}

impl RowCompressor {
    pub fn new(method: Method, dim: usize, m: usize, mu: f64, r: usize, seed: SeedValue) -> Result<Self> {
        let layout = RowLayout::new(dim, m)?;
        let config = match method {
            // Coordinate Top-K keeps ceil(mu * padded length) coordinates.
            Method::CoordTopK => {
                let len = layout.padded_len();
                let k = CompressorConfig::new(len, mu, r)?.k;
                CompressorConfig::for_method(method, m, layout.n, k, r)?
            }
            _ => CompressorConfig::new(m, mu, r)?,
        };
        Ok(Self {
            method,
            config,
            layout,
            seed,
        })
    }

    pub fn compress<T: Transport>(
        &self,
        comm: &mut Comm<T>,
        v: &[f64],
        round: u64,
    ) -> Result<CompressedUpdate> {
        let local = self.layout.to_matrix(v)?;
        let seed = self.seed.derive(ROUND_TAG, round);
        let out = compress_round(comm, self.method, &local, &self.config, seed)?;
        let mut local = out.local.into_vec();
        let mut global = out.global.into_vec();
        local.truncate(self.layout.dim);
        global.truncate(self.layout.dim);
        Ok(CompressedUpdate { local, global })
    }
}

/// EF21M trackers on one rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Ef21mNodeState {
    /// Momentum tracker `h_i`.
    pub h: Vec<f64>,
    /// Gradient tracker `g_i`.
    pub g: Vec<f64>,
    /// `mean_i g_i`, replicated on every rank.
    pub g_avg: Vec<f64>,
    /// Compression rounds performed so far.
    pub rounds: u64,
}

/// `h_0 = g_0` = average of `b_init` stochastic gradients at `x0`; the
/// initial `mean_i g_i` is obtained with one dense all-reduce.
pub fn ef21m_init<T: Transport>(
    comm: &mut Comm<T>,
    oracle: &mut GradOracle<'_>,
    x0: &[f64],
    cfg: &Ef21mConfig,
) -> Result<Ef21mNodeState> {
    cfg.validate()?;
    let h = oracle.minibatch_grad(x0, cfg.b_init);
    let g_avg = comm.all_reduce_avg(&h)?;
    Ok(Ef21mNodeState {
        g: h.clone(),
        h,
        g_avg,
        rounds: 0,
    })
}

/// Moves `x` along `-gamma * mean_i g_i`, then refreshes the trackers at the
/// new iterate:
///
/// ```text
/// x  <- x - gamma * g_avg
/// h  <- (1 - eta) h + eta * grad F_i(x)
/// c  <- C_local(h - g)          (shared selection across ranks)
/// g  <- g + c
/// g_avg <- g_avg + mean_i c_i   (all-reduce of the compressed rows)
/// ```
pub fn ef21m_step<T: Transport>(
    comm: &mut Comm<T>,
    x: &mut [f64],
    state: &mut Ef21mNodeState,
    oracle: &mut GradOracle<'_>,
    compressor: &RowCompressor,
    cfg: &Ef21mConfig,
) -> Result<()> {
    let step = state.rounds as usize + 1;
    for (xi, gi) in x.iter_mut().zip(&state.g_avg) {
        *xi -= cfg.gamma * gi;
    }
    ensure_finite(x, step)?;
    let grad = oracle.stochastic_grad(x);
    for (h, s) in state.h.iter_mut().zip(&grad) {
        *h = (1.0 - cfg.eta) * *h + cfg.eta * s;
    }
    let diff: Vec<f64> = state.h.iter().zip(&state.g).map(|(h, g)| h - g).collect();
    ensure_finite(&diff, step)?;
    let update = compressor.compress(comm, &diff, state.rounds)?;
    state.rounds += 1;
    for (g, c) in state.g.iter_mut().zip(&update.local) {
        *g += c;
    }
    for (g, c) in state.g_avg.iter_mut().zip(&update.global) {
        *g += c;
    }
    Ok(())
}

/// Compressed heavy-ball step without error feedback:
/// `u <- beta u + mean_i C_local(grad F_i(x))`, `x <- x - gamma u`.
pub fn compressed_msgd_step<T: Transport>(
    comm: &mut Comm<T>,
    x: &mut [f64],
    momentum: &mut [f64],
    oracle: &mut GradOracle<'_>,
    compressor: &RowCompressor,
    cfg: &MsgdConfig,
    round: u64,
) -> Result<()> {
    let grad = oracle.stochastic_grad(x);
    ensure_finite(&grad, round as usize + 1)?;
    let update = compressor.compress(comm, &grad, round)?;
    for ((u, c), xi) in momentum.iter_mut().zip(&update.global).zip(x.iter_mut()) {
        *u = cfg.beta * *u + c;
        *xi -= cfg.gamma * *u;
    }
    Ok(())
}

fn ensure_finite(v: &[f64], step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteIterate { step })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Ef21m,
    Msgd,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Ef21m => "ef21m",
            OptimizerKind::Msgd => "msgd",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ef21m" => Ok(OptimizerKind::Ef21m),
            "msgd" => Ok(OptimizerKind::Msgd),
            other => Err(Error::InvalidConfig(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Everything a training run needs besides the problem and the transport.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub method: Method,
    pub optimizer: OptimizerKind,
    pub m: usize,
    pub mu: f64,
    pub r: usize,
    pub gamma: f64,
    pub eta: f64,
    pub beta: f64,
    pub b_init: usize,
    pub iterations: usize,
    pub seed: SeedValue,
    /// Starting point; the origin when `None`.
    pub x0: Option<Vec<f64>>,
}

impl TrainSpec {
    pub fn new(method: Method, m: usize, mu: f64, gamma: f64, iterations: usize, seed: u64) -> Self {
        Self {
            method,
            optimizer: OptimizerKind::Ef21m,
            m,
            mu,
            r: 1,
            gamma,
            eta: 1.0,
            beta: 0.9,
            b_init: 1,
            iterations,
            seed: SeedValue(seed),
            x0: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub t: usize,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub cumulative_entries: u64,
}

/// Outcome of a run on one rank.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    /// One record per iterate `x_0 ..= x_T`, or up to the last finite one.
    pub records: Vec<TrainRecord>,
    pub ledger: CommLedger,
    pub final_x: Vec<f64>,
    /// Step at which the iterate became non-finite, if it did.
    pub diverged_at: Option<usize>,
}

impl TrainRun {
    pub fn into_result(self) -> Result<Self> {
        match self.diverged_at {
            Some(step) => Err(Error::NonFiniteIterate { step }),
            None => Ok(self),
        }
    }
}

fn record(problem: &dyn Problem, x: &[f64], t: usize, ledger: &CommLedger) -> TrainRecord {
    TrainRecord {
        t,
        loss: problem.loss(x),
        grad_norm_sq: norm_sq(&problem.grad(x)),
        cumulative_entries: ledger.total(),
    }
}

/// Runs `spec.iterations` steps on this rank. A non-finite iterate stops the
/// run; the records up to that point are kept and `diverged_at` is set.
pub fn run_training<T: Transport>(
    comm: &mut Comm<T>,
    problem: &dyn Problem,
    spec: &TrainSpec,
) -> Result<TrainRun> {
    if problem.num_nodes() != comm.world_size() {
        return Err(Error::InvalidConfig(format!(
            "problem has {} nodes but the group has {} ranks",
            problem.num_nodes(),
            comm.world_size()
        )));
    }
    let dim = problem.dim();
    let mut x = match &spec.x0 {
        Some(x0) if x0.len() == dim => x0.clone(),
        Some(x0) => {
            return Err(Error::DimensionMismatch(format!(
                "starting point has {} entries, problem has {dim}",
                x0.len()
            )))
        }
        None => vec![0.0; dim],
    };
    let compressor = RowCompressor::new(spec.method, dim, spec.m, spec.mu, spec.r, spec.seed)?;
    let mut oracle = GradOracle::new(problem, comm.rank(), spec.seed);
    let mut records = Vec::with_capacity(spec.iterations + 1);
    let mut diverged_at = None;

    match spec.optimizer {
        OptimizerKind::Ef21m => {
            let cfg = Ef21mConfig {
                gamma: spec.gamma,
                eta: spec.eta,
                b_init: spec.b_init,
            };
            let mut state = ef21m_init(comm, &mut oracle, &x, &cfg)?;
            records.push(record(problem, &x, 0, comm.ledger()));
            for t in 1..=spec.iterations {
                if let Err(e) = ef21m_step(comm, &mut x, &mut state, &mut oracle, &compressor, &cfg) {
                    diverged_at = Some(divergence_step(e)?);
                    break;
                }
                if let Some(step) = check_finite(&x, t, &mut records, problem, comm.ledger()) {
                    diverged_at = Some(step);
                    break;
                }
            }
        }
        OptimizerKind::Msgd => {
            if !(spec.gamma > 0.0) || !(0.0..1.0).contains(&spec.beta) {
                return Err(Error::InvalidConfig(format!(
                    "msgd needs gamma > 0 and beta in [0, 1), got {} and {}",
                    spec.gamma, spec.beta
                )));
            }
            let cfg = MsgdConfig {
                gamma: spec.gamma,
                beta: spec.beta,
            };
            let mut momentum = vec![0.0; dim];
            records.push(record(problem, &x, 0, comm.ledger()));
            for t in 1..=spec.iterations {
                let round = (t - 1) as u64;
                if let Err(e) =
                    compressed_msgd_step(comm, &mut x, &mut momentum, &mut oracle, &compressor, &cfg, round)
                {
                    diverged_at = Some(divergence_step(e)?);
                    break;
                }
                if let Some(step) = check_finite(&x, t, &mut records, problem, comm.ledger()) {
                    diverged_at = Some(step);
                    break;
                }
            }
        }
    }
    Ok(TrainRun {
        records,
        ledger: *comm.ledger(),
        final_x: x,
        diverged_at,
    })
}

fn divergence_step(e: Error) -> Result<usize> {
    match e {
        Error::NonFiniteIterate { step } => Ok(step),
        other => Err(other),
    }
}

fn check_finite(
    x: &[f64],
    t: usize,
    records: &mut Vec<TrainRecord>,
    problem: &dyn Problem,
    ledger: &CommLedger,
) -> Option<usize> {
    if x.iter().any(|v| !v.is_finite()) {
        return Some(t);
    }
    let rec = record(problem, x, t, ledger);
    if !rec.loss.is_finite() || !rec.grad_norm_sq.is_finite() {
        return Some(t);
    }
    records.push(rec);
    None
}

/// Runs a training job with one in-process rank per node of `problem` and
/// returns rank 0's run.
pub fn train_inproc(problem: &dyn Problem, spec: &TrainSpec) -> Result<TrainRun> {
    let mut runs = run_inproc(problem.num_nodes(), |comm| run_training(comm, problem, spec))?;
    Ok(runs.swap_remove(0))
}
