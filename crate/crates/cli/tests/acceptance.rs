//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness)
//! so the per-criterion lines are always printed:
//!
//! ```text
//! cargo test -p arctopk-cli --test acceptance
//! cargo test -p arctopk-cli --test acceptance -- 5 10   # selected checks
//! ```
//!
//! Each check also has a wall-clock budget; going over it fails the check.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use arctopk::collective::{run_inproc, Primitive};
use arctopk::compressor::Method;
use arctopk::optimizer::{ef21m_init, ef21m_step, Ef21mConfig, RowCompressor};
use arctopk::rng::SeedValue;
use arctopk::workload::{make_row_structured_quadratic, GradOracle, Problem};
use arctopk_cli::commands::{self, AuditArgs, ContractArgs, Report, SketchArgs};
use arctopk_cli::config::{RunConfig, TransportKind};
use arctopk_cli::train;

type Check = Result<(bool, String), String>;

struct Outcome {
    passed: bool,
    line: String,
}

fn run(id: u32, name: &str, budget: Duration, check: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let result = check();
    let elapsed = start.elapsed();
    let (ok, detail) = match result {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    let in_time = elapsed <= budget;
    let passed = ok && in_time;
    let timing = format!("{:.2}s of {}s", elapsed.as_secs_f64(), budget.as_secs());
    let over = if in_time { "" } else { " OVER BUDGET" };
    let line = format!(
        "{} {:>2} {name} [{timing}{over}] {detail}",
        if passed { "PASS" } else { "FAIL" },
        id
    );
    println!("{line}");
    Outcome { passed, line }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn config(lines: &str) -> Result<RunConfig, String> {
    RunConfig::parse_str(lines).map_err(|e| e.to_string())
}

fn prop1() -> Check {
    let r = commands::prop1(0).map_err(|e| e.to_string())?;
    let ok = r.topk_ratio == 1.0 && r.topk_update == [0.0, 0.0] && r.passed();
    Ok((ok, format!("ratio={} g_norm_sq={} arc_ratio={}", r.topk_ratio, r.g_norm_sq, r.arc_ratio)))
}

fn contraction() -> Check {
    let mut ok = true;
    let mut detail = Vec::new();
    for (m, n, k, r) in [(8, 4, 2, 2), (16, 8, 4, 1), (32, 16, 8, 4)] {
        for world in [1, 4] {
            let mut args = ContractArgs::new(m, n, k, r, 10_000);
            args.world = world;
            args.seed = 11;
            let rep = commands::contract(args).map_err(|e| e.to_string())?;
            ok &= rep.mean <= rep.bound + 3.0 * rep.stderr;
            detail.push(format!(
                "({m},{n},{k},{r})xN{world}: {:.4}<={:.4}",
                rep.mean,
                rep.bound + 3.0 * rep.stderr
            ));
        }
    }
    Ok((ok, detail.join(" ")))
}

fn sketch() -> Check {
    let literal = commands::parse_matrix("3,4;0,0;1,0").map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut detail = Vec::new();
    for (matrix, seed) in [(Some(literal), 1), (None, 2)] {
        let args = SketchArgs {
            matrix,
            m: 8,
            n: 4,
            r: 1,
            compare_r: Some(16),
            trials: 10_000,
            seed,
        };
        let rep = commands::sketch_stats(&args).map_err(|e| e.to_string())?;
        ok &= rep.bias_ok() && rep.variance_ok();
        let worst = rep
            .rows
            .iter()
            .filter(|s| s.true_norm_sq > 0.0)
            .map(|s| s.relative_bias())
            .fold(0.0, f64::max);
        detail.push(format!(
            "{}x{} worst_bias={worst:.4} variance_drops={}",
            rep.rows.len(),
            args.n,
            rep.variance_ok()
        ));
    }
    Ok((ok, detail.join(" ")))
}

fn audit() -> Check {
    let mut rounds = 0;
    let mut failures = Vec::new();
    for method in [Method::Dense, Method::TopK, Method::RandK, Method::Arc] {
        for world in [2, 4, 8] {
            for (m, n) in [(4, 3), (8, 5), (16, 2)] {
                for k in [1, m / 2, m] {
                    for r in [1, 3] {
                        let args = AuditArgs {
                            method,
                            m,
                            n,
                            world,
                            k,
                            r,
                            transport: TransportKind::InProc,
                            seed: rounds,
                        };
                        let rep = commands::comm_audit(args).map_err(|e| e.to_string())?;
                        let (m64, n64, k64, r64, w64) = (m as u64, n as u64, k as u64, r as u64, world as u64);
                        let closed = match method {
                            Method::Dense => 2 * m64 * n64,
                            Method::TopK => (w64 - 1) * (n64 * k64 + k64),
                            Method::RandK => 2 * k64 * n64,
                            Method::Arc if r == 1 => 2 * k64 * n64 + 2 * m64,
                            _ => 2 * k64 * n64 + 2 * m64 * r64,
                        };
                        if rep.observed.iter().any(|&o| o != closed) || rep.expected != closed {
                            failures.push(format!("{method} m{m} n{n} N{world} K{k} r{r}: {:?} vs {closed}", rep.observed));
                        }
                        rounds += 1;
                    }
                }
            }
        }
    }
    // A few rounds over real sockets.
    for method in [Method::Dense, Method::TopK, Method::RandK, Method::Arc] {
        let args = AuditArgs {
            method,
            m: 8,
            n: 5,
            world: 4,
            k: 3,
            r: 2,
            transport: TransportKind::Tcp,
            seed: 99,
        };
        let rep = commands::comm_audit(args).map_err(|e| e.to_string())?;
        if !rep.passed() {
            failures.push(format!("tcp {method}: {:?} vs {}", rep.observed, rep.expected));
        }
        rounds += 1;
    }
    let detail = if failures.is_empty() {
        format!("{rounds} rounds, all ranks exact")
    } else {
        failures.join("; ")
    };
    Ok((failures.is_empty(), detail))
}

const TRANSPORT_CONFIG: &str = "\
# transport equivalence job
d = 64
m = 8
nodes = 4
method = arc
sigma = 0.1
heterogeneity = 0.5
iterations = 100
seed = 21
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_arctopk"))
}

fn run_bin(cmd: &mut Command) -> Result<Vec<u8>, String> {
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "{:?} exited with {}: {}",
            cmd,
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out.stdout)
}

/// Exit code and stdout, whatever the outcome.
fn capture(cmd: &mut Command) -> Result<(Option<i32>, Vec<u8>), String> {
    let out = cmd.output().map_err(|e| e.to_string())?;
    Ok((out.status.code(), out.stdout))
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn transport_equivalence(dir: &Path) -> Check {
    let cfg = dir.join("job.cfg");
    std::fs::write(&cfg, TRANSPORT_CONFIG).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for transport in ["inproc", "tcp"] {
        let csv = dir.join(format!("{transport}.csv"));
        let summary = dir.join(format!("{transport}.summary"));
        let mut cmd = bin();
        cmd.arg("train").arg("--config").arg(&cfg).arg("--out").arg(&csv).arg("--summary").arg(&summary);
        cmd.args(["--transport", transport]);
        if transport == "tcp" {
            cmd.arg("--spawn");
        }
        run_bin(&mut cmd)?;
        outputs.push((read(&csv)?, read(&summary)?));
    }
    let rows = outputs[0].0.iter().filter(|&&b| b == b'\n').count();
    let same = outputs[0] == outputs[1];
    Ok((
        same && rows == 103,
        format!("csv {} bytes, {rows} lines, identical={same}", outputs[0].0.len()),
    ))
}

fn gradient_descent_limit() -> Check {
    let problem = make_row_structured_quadratic(SeedValue(5), 48, 8, 3, 6.0, 0.7).map_err(|e| e.to_string())?;
    let gamma = 1.0 / (4.0 * problem.smoothness());
    let steps = 100;
    let mut reference = vec![vec![0.0; 48]];
    for t in 0..steps {
        let x = &reference[t];
        let g = problem.grad(x);
        reference.push(x.iter().zip(g).map(|(a, b)| a - gamma * b).collect());
    }
    let deviations = run_inproc(3, |comm| {
        let cfg = Ef21mConfig {
            gamma,
            eta: 1.0,
            b_init: 1,
        };
        let compressor = RowCompressor::new(Method::Arc, 48, 8, 1.0, 2, SeedValue(1))?;
        let mut oracle = GradOracle::new(&problem, comm.rank(), SeedValue(1));
        let mut x = vec![0.0; 48];
        let mut state = ef21m_init(comm, &mut oracle, &x, &cfg)?;
        let mut worst = 0.0f64;
        for want in &reference[1..] {
            ef21m_step(comm, &mut x, &mut state, &mut oracle, &compressor, &cfg)?;
            for (a, b) in x.iter().zip(want) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    })
    .map_err(|e| e.to_string())?;
    let worst = deviations.iter().copied().fold(0.0, f64::max);
    Ok((worst <= 1e-12, format!("N=3, {steps} steps, max |x - x_gd| = {worst:e}")))
}

fn convergence_smoke() -> Check {
    let cfg = config(
        "d = 64\nm = 16\nnodes = 4\ncondition = 10\nheterogeneity = 0.5\nsigma = 0\n\
         method = arc\nmu = 0.25\neta = 0.9\ngamma = auto\niterations = 50000\nseed = 3\n",
    )?;
    let out = train::train_inproc(&cfg).map_err(|e| e.to_string())?;
    let last = out.records.last().ok_or("no records")?;
    let first = out.records.iter().find(|r| r.grad_norm_sq <= 1e-6).map(|r| r.t);
    Ok((
        last.t == 50_000 && last.grad_norm_sq <= 1e-6,
        format!("final ||grad||^2 = {:e}, first <= 1e-6 at t = {first:?}", last.grad_norm_sq),
    ))
}

fn communication_to_target() -> Check {
    let mut arc_vs_dense = 0;
    let mut arc_vs_randk = 0;
    let mut rows = Vec::new();
    for seed in 0..10u64 {
        let mut entries = Vec::new();
        for method in ["arc", "dense", "randk"] {
            let cfg = config(&format!(
                "d = 512\nm = 8\nnodes = 4\ncondition = 1\nheterogeneity = 0.5\nsigma = 0.1\n\
                 method = {method}\nmu = 0.2\nr = 1\neta = 0.9\ngamma = auto\niterations = 300\n\
                 seed = {seed}\ntarget_gap = 0.01\n"
            ))?;
            let out = train::train_inproc(&cfg).map_err(|e| e.to_string())?;
            let summary = train::Summary::new(&cfg, &out, false);
            entries.push(summary.entries_to_target);
        }
        let beats = |a: Option<u64>, b: Option<u64>| match (a, b) {
            (Some(a), Some(b)) => a < b,
            (Some(_), None) => true,
            _ => false,
        };
        arc_vs_dense += beats(entries[0], entries[1]) as u32;
        arc_vs_randk += beats(entries[0], entries[2]) as u32;
        let show = |e: Option<u64>| e.map_or("-".to_string(), |v| v.to_string());
        rows.push(format!("{}/{}/{}", show(entries[0]), show(entries[1]), show(entries[2])));
    }
    Ok((
        arc_vs_dense >= 8 && arc_vs_randk >= 8,
        format!(
            "arc<dense {arc_vs_dense}/10, arc<randk {arc_vs_randk}/10; entries arc/dense/randk: {}",
            rows.join(" ")
        ),
    ))
}

fn linear_speedup() -> Check {
    let iterations = 20_000;
    let tail_start = iterations - iterations / 4;
    let mut ordered = 0;
    let mut ratios = Vec::new();
    for trial in 0..20u64 {
        let mut tails = Vec::new();
        for nodes in [1, 2, 4] {
            let cfg = config(&format!(
                "d = 64\nm = 8\nnodes = {nodes}\ncondition = 2\nheterogeneity = 0.5\nsigma = 0.5\n\
                 problem_seed = 100\nmethod = arc\nmu = 0.25\neta = 0.9\ngamma = auto\n\
                 iterations = {iterations}\nseed = {trial}\n"
            ))?;
            let out = train::train_inproc(&cfg).map_err(|e| e.to_string())?;
            let tail = &out.records[tail_start..iterations];
            tails.push(tail.iter().map(|r| r.grad_norm_sq).sum::<f64>() / tail.len() as f64);
        }
        if tails[0] >= tails[1] && tails[1] >= tails[2] {
            ordered += 1;
        }
        ratios.push(format!("{:.2}", tails[0] / tails[2]));
    }
    Ok((ordered >= 15, format!("ordered in {ordered}/20; N1/N4 tail ratios {}", ratios.join(","))))
}

fn determinism(dir: &Path) -> Check {
    let cfg = dir.join("det.cfg");
    std::fs::write(&cfg, "d = 32\nm = 4\nnodes = 3\nsigma = 0.3\nmethod = randk\niterations = 50\nseed = 9\n")
        .map_err(|e| e.to_string())?;
    let commands: Vec<Vec<String>> = vec![
        vec!["prop1".into(), "--seed".into(), "4".into()],
        "contract --m 8 --n 4 --k 2 --r 2 --trials 1000 --world 2 --seed 6"
            .split(' ')
            .map(String::from)
            .collect(),
        "comm-audit --method topk --m 6 --n 4 --world 3 --k 2 --r 1"
            .split(' ')
            .map(String::from)
            .collect(),
        "sketch-stats --m 6 --n 5 --r 2 --trials 1000 --seed 8"
            .split(' ')
            .map(String::from)
            .collect(),
        vec!["train".into(), "--config".into(), cfg.display().to_string()],
        vec![
            "train".into(),
            "--config".into(),
            cfg.display().to_string(),
            "--set".into(),
            "optimizer=msgd".into(),
        ],
    ];
    let mut checked = 0;
    for args in &commands {
        let a = capture(bin().args(args))?;
        let b = capture(bin().args(args))?;
        if a != b || a.1.is_empty() {
            return Ok((false, format!("'{}' differs between runs", args.join(" "))));
        }
        checked += 1;
    }
    // The library path as well, including the per-primitive ledger.
    let c = config("d = 32\nm = 4\nnodes = 2\nsigma = 0.5\nmethod = topk\niterations = 200\nseed = 1\n")?;
    let x = train::train_inproc(&c).map_err(|e| e.to_string())?;
    let y = train::train_inproc(&c).map_err(|e| e.to_string())?;
    let same = x.records == y.records
        && Primitive::ALL.iter().all(|&p| x.ledger.entries(p) == y.ledger.entries(p));
    Ok((same, format!("{checked} commands byte-identical across repeats")))
}

fn main() -> ExitCode {
    let dir = std::env::temp_dir().join(format!("arctopk-acceptance-{}", std::process::id()));
    if let Err(e) = std::fs::create_dir_all(&dir) {
        eprintln!("cannot create {}: {e}", dir.display());
        return ExitCode::FAILURE;
    }
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: u32| only.is_empty() || only.contains(&id);
    let dir = dir.as_path();
    let checks: Vec<(u32, &str, u64, Box<dyn Fn() -> Check + '_>)> = vec![
        (1, "two-node Top-K counterexample", 1, Box::new(prop1)),
        (2, "ARC-Top-K contraction", 30, Box::new(contraction)),
        (3, "sketch bias and variance", 30, Box::new(sketch)),
        (4, "per-node communication audit", 10, Box::new(audit)),
        (5, "in-process vs TCP training", 120, Box::new(|| transport_equivalence(dir))),
        (6, "EF21M full-support equals GD", 5, Box::new(gradient_descent_limit)),
        (7, "noiseless convergence", 120, Box::new(convergence_smoke)),
        (8, "entries to reach f* + 0.01", 600, Box::new(communication_to_target)),
        (9, "noise floor shrinks with N", 900, Box::new(linear_speedup)),
        (10, "repeatable outputs", 10, Box::new(|| determinism(dir))),
    ];
    let outcomes: Vec<Outcome> = checks
        .iter()
        .filter(|(id, ..)| wanted(*id))
        .map(|(id, name, budget, check)| run(*id, name, secs(*budget), check))
        .collect();
    let _ = std::fs::remove_dir_all(&dir);
    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.passed).collect();
    println!("{} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        for o in failed {
            eprintln!("{}", o.line);
        }
        ExitCode::FAILURE
    }
}
