//! Diagnostic commands. Each returns a report that renders as `key=value`
//! lines and knows whether its check passed.

use std::fmt;

use arctopk::collective::{
    expected_entries, run_inproc, run_tcp_loopback, AuditDims, Comm, CommLedger, SoloTransport, TcpOptions, Transport,
};
use arctopk::compressor::{
    compress_round, compression_error_sq, simulate_round, sketch_local, CompressorConfig, Method,
};
use arctopk::matrix::{frobenius_norm_sq, norm_sq, row_norms_sq, DenseMatrix};
use arctopk::rng::{gaussian_matrix, SeedValue, SeededStream};
use arctopk::{Error, Result};

use crate::config::TransportKind;

pub trait Report: fmt::Display {
    fn passed(&self) -> bool;
}

fn status(passed: bool) -> &'static str {
    if passed {
        "pass"
    } else {
        "fail"
    }
}

fn fmt_list<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

const INPUT_TAG: u64 = 0x696e_7075_74;
const TRIAL_TAG: u64 = 0x7472_6961_6c;
const SPREAD_TAG: u64 = 0x7370_7265_6164;

/// `m x n` Gaussian matrix whose rows are scaled by `1 / (k + 1)` for a
/// random ranking `k`, so a few rows carry most of the energy.
pub fn skewed_matrix(seed: SeedValue, m: usize, n: usize) -> DenseMatrix {
    let mut g = gaussian_matrix(seed.derive(INPUT_TAG, 0), m, n);
    let mut rng = SeededStream::new(seed.derive(INPUT_TAG, 1));
    let mut order: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        order.swap(i, rng.next_index(i + 1));
    }
    for (rank, &row) in order.iter().enumerate() {
        let scale = 1.0 / (rank as f64 + 1.0);
        g.row_mut(row).iter_mut().for_each(|v| *v *= scale);
    }
    g
}

/// Splits `g` into `world` local matrices whose average is `g` (up to
/// rounding), each perturbed by zero-mean noise of the same scale as `g`.
fn spread(g: &DenseMatrix, world: usize, seed: SeedValue) -> Result<Vec<DenseMatrix>> {
    if world == 1 {
        return Ok(vec![g.clone()]);
    }
    let (m, n) = g.shape();
    let scale = (frobenius_norm_sq(g) / (m * n) as f64).sqrt();
    let noise: Vec<DenseMatrix> = (0..world)
        .map(|i| gaussian_matrix(seed.derive(SPREAD_TAG, i as u64), m, n))
        .collect();
    let mut mean = vec![0.0; m * n];
    for d in &noise {
        for (a, v) in mean.iter_mut().zip(d.as_slice()) {
            *a += v / world as f64;
        }
    }
    noise
        .iter()
        .map(|d| {
            let data = g
                .as_slice()
                .iter()
                .zip(d.as_slice())
                .zip(&mean)
                .map(|((x, e), c)| x + scale * (e - c))
                .collect();
            DenseMatrix::new(m, n, data)
        })
        .collect()
}

/// Elementwise average in rank order, the same way the collectives reduce.
fn average(locals: &[DenseMatrix]) -> Result<DenseMatrix> {
    let (m, n) = locals[0].shape();
    let mut sum = vec![0.0; m * n];
    for l in locals {
        for (a, v) in sum.iter_mut().zip(l.as_slice()) {
            *a += v;
        }
    }
    let inv = locals.len() as f64;
    DenseMatrix::new(m, n, sum.into_iter().map(|v| v / inv).collect())
}

#[derive(Debug, Clone)]
pub struct Prop1Report {
    /// `C(g)` for per-node coordinate Top-1.
    pub topk_update: Vec<f64>,
    pub g_norm_sq: f64,
    pub topk_ratio: f64,
    pub arc_ratio: f64,
    pub arc_selection: Vec<usize>,
    pub arc_aligned: bool,
    pub full_ratio: f64,
}

/// Two nodes, `g1 = [-1, 0.1]`, `g2 = [1, 0.1]`, one coordinate kept.
pub fn prop1(seed: u64) -> Result<Prop1Report> {
    let g1 = [-1.0, 0.1];
    let g2 = [1.0, 0.1];
    let coords = [DenseMatrix::new(1, 2, g1.to_vec())?, DenseMatrix::new(1, 2, g2.to_vec())?];
    let g = average(&coords)?;
    let g_norm_sq = frobenius_norm_sq(&g);

    let topk = simulate_round(Method::CoordTopK, &coords, &CompressorConfig::for_method(Method::CoordTopK, 1, 2, 1, 1)?, SeedValue(seed))?;
    let topk_ratio = compression_error_sq(&g, &topk.global)? / g_norm_sq;

    let full = simulate_round(Method::CoordTopK, &coords, &CompressorConfig::for_method(Method::CoordTopK, 1, 2, 2, 1)?, SeedValue(seed))?;
    let full_ratio = compression_error_sq(&g, &full.global)? / g_norm_sq;

    // The same vectors as 2 x 1 matrices: rows are coordinates.
    let rows = [DenseMatrix::new(2, 1, g1.to_vec())?, DenseMatrix::new(2, 1, g2.to_vec())?];
    let arc = simulate_round(Method::Arc, &rows, &CompressorConfig::with_k(2, 1, 8)?, SeedValue(seed))?;
    let arc_ratio = compression_error_sq(&average(&rows)?, &arc.global)? / g_norm_sq;
    let arc_aligned = arc.selections.windows(2).all(|w| w[0] == w[1]);
    let arc_selection = arc.selections[0]
        .as_ref()
        .map(|s| s.indices().to_vec())
        .unwrap_or_default();

    Ok(Prop1Report {
        topk_update: topk.global.into_vec(),
        g_norm_sq,
        topk_ratio,
        arc_ratio,
        arc_selection,
        arc_aligned,
        full_ratio,
    })
}

impl Report for Prop1Report {
    // 0.1 has no exact binary form, so its square lands one ulp above 0.01.
    fn passed(&self) -> bool {
        self.topk_ratio == 1.0
            && (self.g_norm_sq - 0.01).abs() <= 2.0 * f64::EPSILON * 0.01
            && self.arc_ratio <= 1.0
            && self.arc_aligned
            && self.full_ratio == 0.0
    }
}

impl fmt::Display for Prop1Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "command=prop1")?;
        writeln!(f, "g_norm_sq={}", self.g_norm_sq)?;
        writeln!(f, "topk_update={}", fmt_list(&self.topk_update))?;
        writeln!(f, "topk_ratio={}", self.topk_ratio)?;
        writeln!(f, "arc_ratio={}", self.arc_ratio)?;
        writeln!(f, "arc_selection={}", fmt_list(&self.arc_selection))?;
        writeln!(f, "arc_aligned={}", self.arc_aligned)?;
        writeln!(f, "full_ratio={}", self.full_ratio)?;
        writeln!(f, "status={}", status(self.passed()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractArgs {
    pub method: Method,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub r: usize,
    pub world: usize,
    pub trials: usize,
    pub seed: u64,
}

impl ContractArgs {
    pub fn new(m: usize, n: usize, k: usize, r: usize, trials: usize) -> Self {
        Self {
            method: Method::Arc,
            m,
            n,
            k,
            r,
            world: 1,
            trials,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContractReport {
    pub args: ContractArgs,
    pub mean: f64,
    pub stderr: f64,
    /// `1 - K/m`.
    pub bound: f64,
}

pub const MIN_TRIALS: usize = 1000;

/// Monte Carlo estimate of `E ||C(G) - G||^2 / ||G||^2` over independent
/// round seeds for one fixed skewed input.
pub fn contract(args: ContractArgs) -> Result<ContractReport> {
    if args.trials < MIN_TRIALS {
        return Err(Error::InvalidConfig(format!(
            "need at least {MIN_TRIALS} trials, got {}",
            args.trials
        )));
    }
    if args.world == 0 {
        return Err(Error::InvalidConfig("world size must be positive".into()));
    }
    let cfg = CompressorConfig::for_method(args.method, args.m, args.n, args.k, args.r)?;
    let master = SeedValue(args.seed);
    let g = skewed_matrix(master, args.m, args.n);
    let locals = spread(&g, args.world, master)?;
    let target = average(&locals)?;
    let denom = frobenius_norm_sq(&target);

    let mut stats = Moments::default();
    let mut solo = Comm::new(SoloTransport);
    for t in 0..args.trials {
        let seed = master.derive(TRIAL_TAG, t as u64);
        let global = if args.world == 1 {
            compress_round(&mut solo, args.method, &locals[0], &cfg, seed)?.global
        } else {
            simulate_round(args.method, &locals, &cfg, seed)?.global
        };
        stats.push(compression_error_sq(&target, &global)? / denom);
    }
    Ok(ContractReport {
        args,
        mean: stats.mean(),
        stderr: stats.stderr(),
        bound: 1.0 - args.k as f64 / args.m as f64,
    })
}

impl Report for ContractReport {
    fn passed(&self) -> bool {
        self.mean <= self.bound + 3.0 * self.stderr
    }
}

impl fmt::Display for ContractReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = &self.args;
        writeln!(f, "command=contract")?;
        writeln!(f, "method={}", a.method)?;
        writeln!(f, "m={}\nn={}\nk={}\nr={}\nworld={}\ntrials={}\nseed={}", a.m, a.n, a.k, a.r, a.world, a.trials, a.seed)?;
        writeln!(f, "mean_ratio={}", self.mean)?;
        writeln!(f, "stderr={}", self.stderr)?;
        writeln!(f, "bound={}", self.bound)?;
        writeln!(f, "status={}", status(self.passed()))
    }
}

/// Running mean and variance.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    count: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn mean(&self) -> f64 {
        self.mean
    }

    fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    fn stderr(&self) -> f64 {
        (self.variance() / self.count as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditArgs {
    pub method: Method,
    pub m: usize,
    pub n: usize,
    pub world: usize,
    pub k: usize,
    pub r: usize,
    pub transport: TransportKind,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct CommAuditReport {
    pub args: AuditArgs,
    pub expected: u64,
    /// Entries charged on each rank during the round.
    pub observed: Vec<u64>,
    pub ledgers: Vec<CommLedger>,
}

/// Runs one round of `method` on random inputs and compares every rank's
/// ledger with the closed-form per-node cost.
pub fn comm_audit(args: AuditArgs) -> Result<CommAuditReport> {
    let cfg = CompressorConfig::for_method(args.method, args.m, args.n, args.k, args.r)?;
    let master = SeedValue(args.seed);
    let locals: Vec<DenseMatrix> = (0..args.world)
        .map(|i| gaussian_matrix(master.derive(INPUT_TAG, i as u64), args.m, args.n))
        .collect();
    fn one_round<T: Transport>(
        comm: &mut Comm<T>,
        method: Method,
        local: &DenseMatrix,
        cfg: &CompressorConfig,
        seed: SeedValue,
    ) -> Result<CommLedger> {
        let before = *comm.ledger();
        compress_round(comm, method, local, cfg, seed)?;
        Ok(comm.ledger().since(&before))
    }
    let ledgers = match args.transport {
        TransportKind::InProc => run_inproc(args.world, |c| {
            one_round(c, args.method, &locals[c.rank()], &cfg, master)
        })?,
        TransportKind::Tcp => run_tcp_loopback(args.world, TcpOptions::default(), |c| {
            one_round(c, args.method, &locals[c.rank()], &cfg, master)
        })?,
    };
    let dims = AuditDims {
        m: args.m,
        n: args.n,
        world_size: args.world,
        k: args.k,
        r: args.r,
    };
    Ok(CommAuditReport {
        args,
        expected: expected_entries(args.method, dims),
        observed: ledgers.iter().map(CommLedger::total).collect(),
        ledgers,
    })
}

impl CommAuditReport {
    /// The first rank whose ledger disagrees with the closed form.
    pub fn mismatch(&self) -> Option<Error> {
        self.observed.iter().enumerate().find(|(_, &o)| o != self.expected).map(|(rank, &o)| {
            Error::AuditMismatch {
                method: self.args.method.to_string(),
                rank,
                expected: self.expected,
                observed: o,
            }
        })
    }
}

impl Report for CommAuditReport {
    fn passed(&self) -> bool {
        self.mismatch().is_none()
    }
}

impl fmt::Display for CommAuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = &self.args;
        writeln!(f, "command=comm-audit")?;
        writeln!(f, "method={}", a.method)?;
        writeln!(f, "m={}\nn={}\nworld={}\nk={}\nr={}", a.m, a.n, a.world, a.k, a.r)?;
        let transport = match a.transport {
            TransportKind::InProc => "inproc",
            TransportKind::Tcp => "tcp",
        };
        writeln!(f, "transport={transport}")?;
        writeln!(f, "expected_entries={}", self.expected)?;
        writeln!(f, "observed_entries={}", fmt_list(&self.observed))?;
        if let Some(e) = self.mismatch() {
            writeln!(f, "error={e}")?;
        }
        writeln!(f, "status={}", status(self.passed()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchArgs {
    /// Explicit input; a seeded skewed `m x n` matrix when `None`.
    pub matrix: Option<DenseMatrix>,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    /// Sketch width the variance is compared against; `4 r` by default.
    pub compare_r: Option<usize>,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowStats {
    pub true_norm_sq: f64,
    pub mean: f64,
    pub variance: f64,
    pub compare_variance: f64,
}

impl RowStats {
    pub fn relative_bias(&self) -> f64 {
        if self.true_norm_sq == 0.0 {
            self.mean.abs()
        } else {
            (self.mean - self.true_norm_sq).abs() / self.true_norm_sq
        }
    }
}

#[derive(Debug, Clone)]
pub struct SketchReport {
    pub r: usize,
    pub compare_r: usize,
    pub trials: usize,
    pub rows: Vec<RowStats>,
}

pub const BIAS_TOLERANCE: f64 = 0.05;

/// Mean and variance of the sketched row importance at widths `r` and
/// `compare_r`, over independent projections.
pub fn sketch_stats(args: &SketchArgs) -> Result<SketchReport> {
    if args.trials < MIN_TRIALS {
        return Err(Error::InvalidConfig(format!(
            "need at least {MIN_TRIALS} trials, got {}",
            args.trials
        )));
    }
    let master = SeedValue(args.seed);
    let g = match &args.matrix {
        Some(g) => g.clone(),
        None => skewed_matrix(master, args.m, args.n),
    };
    let compare_r = args.compare_r.unwrap_or(4 * args.r);
    let run = |r: usize, tag: u64| -> Result<Vec<Moments>> {
        let mut stats = vec![Moments::default(); g.rows()];
        for t in 0..args.trials {
            let v = gaussian_matrix(master.derive(tag, t as u64), g.cols(), r);
            let sigma = row_norms_sq(&sketch_local(&g, &v)?);
            for (s, x) in stats.iter_mut().zip(sigma) {
                s.push(x);
            }
        }
        Ok(stats)
    };
    let base = run(args.r, TRIAL_TAG)?;
    let cmp = run(compare_r, TRIAL_TAG + 1)?;
    let rows = g
        .row_iter()
        .zip(base.iter().zip(&cmp))
        .map(|(row, (b, c))| RowStats {
            true_norm_sq: norm_sq(row),
            mean: b.mean(),
            variance: b.variance(),
            compare_variance: c.variance(),
        })
        .collect();
    Ok(SketchReport {
        r: args.r,
        compare_r,
        trials: args.trials,
        rows,
    })
}

impl SketchReport {
    pub fn bias_ok(&self) -> bool {
        self.rows.iter().all(|s| {
            if s.true_norm_sq == 0.0 {
                s.mean == 0.0
            } else {
                s.relative_bias() <= BIAS_TOLERANCE
            }
        })
    }

    pub fn variance_ok(&self) -> bool {
        self.rows
            .iter()
            .filter(|s| s.true_norm_sq > 0.0)
            .all(|s| s.compare_variance < s.variance)
    }
}

impl Report for SketchReport {
    fn passed(&self) -> bool {
        // Widening the sketch only helps when the comparison is actually wider.
        self.bias_ok() && (self.compare_r <= self.r || self.variance_ok())
    }
}

impl fmt::Display for SketchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let col = |g: fn(&RowStats) -> f64| fmt_list(&self.rows.iter().map(g).collect::<Vec<_>>());
        writeln!(f, "command=sketch-stats")?;
        writeln!(f, "r={}\ncompare_r={}\ntrials={}", self.r, self.compare_r, self.trials)?;
        writeln!(f, "true_norm_sq={}", col(|s| s.true_norm_sq))?;
        writeln!(f, "mean_sigma={}", col(|s| s.mean))?;
        writeln!(f, "relative_bias={}", col(RowStats::relative_bias))?;
        writeln!(f, "variance={}", col(|s| s.variance))?;
        writeln!(f, "compare_variance={}", col(|s| s.compare_variance))?;
        writeln!(f, "bias_ok={}", self.bias_ok())?;
        writeln!(f, "variance_ok={}", self.variance_ok())?;
        writeln!(f, "status={}", status(self.passed()))
    }
}

/// Parses `"3,4;0,0;1,0"` (rows separated by `;`).
pub fn parse_matrix(text: &str) -> Result<DenseMatrix> {
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|row| {
            row.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidConfig(format!("bad matrix entry '{v}'")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    DenseMatrix::from_rows(&rows)
}
