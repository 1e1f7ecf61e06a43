use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::{Child, Command, ExitCode, Stdio};

use clap::{Args, Parser, Subcommand, ValueEnum};

use arctopk::collective::{Comm, TcpOptions, TcpTransport};
use arctopk::compressor::Method;
use arctopk_cli::commands::{self, AuditArgs, ContractArgs, Report, SketchArgs};
use arctopk_cli::config::{RunConfig, TransportKind};
use arctopk_cli::train::{self, Summary, TrainOutput};

#[derive(Parser)]
#[command(name = "arctopk", version, about = "Row-sparse gradient compression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Two-node counterexample where averaged local Top-K loses the gradient.
    Prop1 {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Monte Carlo contraction ratio of a compressor on a skewed input.
    Contract {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        r: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        world: usize,
        #[arg(long, default_value = "arc")]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Checks the entries charged by one round against the closed form.
    CommAudit {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        world: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        r: usize,
        #[arg(long, value_enum, default_value_t = TransportArg::Inproc)]
        transport: TransportArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Bias and variance of the sketched row norms.
    SketchStats {
        #[arg(long, default_value_t = 8)]
        m: usize,
        #[arg(long, default_value_t = 4)]
        n: usize,
        /// Explicit input, rows separated by ';', e.g. "3,4;0,0;1,0".
        #[arg(long)]
        matrix: Option<String>,
        #[arg(long, default_value_t = 1)]
        r: usize,
        /// Sketch width to compare variance against [default: 4r].
        #[arg(long)]
        compare_r: Option<usize>,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Trains on a synthetic problem and writes a CSV trace and a summary.
    Train(TrainArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inproc,
    Tcp,
}

impl From<TransportArg> for TransportKind {
    fn from(t: TransportArg) -> Self {
        match t {
            TransportArg::Inproc => TransportKind::InProc,
            TransportArg::Tcp => TransportKind::Tcp,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// key=value run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// CSV destination [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Summary destination [default: stdout, or stderr when the CSV goes to stdout].
    #[arg(long)]
    summary: Option<PathBuf>,
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
    /// Number of TCP ranks [default: the config's node count].
    #[arg(long)]
    world: Option<usize>,
    #[arg(long, default_value_t = 0)]
    rank: usize,
    /// Rendezvous address of rank 0.
    #[arg(long)]
    addr: Option<String>,
    /// Launch ranks 1..N-1 as child processes of rank 0.
    #[arg(long)]
    spawn: bool,
    /// Seconds to wait for peers before giving up.
    #[arg(long, default_value_t = 60)]
    timeout: u64,
    /// Adds wall-clock time to the summary (makes it non-reproducible).
    #[arg(long)]
    timing: bool,
}

enum Failure {
    Check,
    Error(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Error(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check) => ExitCode::from(1),
        Err(Failure::Error(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn emit(report: &dyn Report) -> Result<(), Failure> {
    print!("{report}");
    io::stdout().flush()?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Prop1 { seed } => emit(&commands::prop1(seed)?),
        Cmd::Contract {
            m,
            n,
            k,
            r,
            trials,
            world,
            method,
            seed,
        } => emit(&commands::contract(ContractArgs {
            method,
            m,
            n,
            k,
            r,
            world,
            trials,
            seed,
        })?),
        Cmd::CommAudit {
            method,
            m,
            n,
            world,
            k,
            r,
            transport,
            seed,
        } => emit(&commands::comm_audit(AuditArgs {
            method,
            m,
            n,
            world,
            k,
            r,
            transport: transport.into(),
            seed,
        })?),
        Cmd::SketchStats {
            m,
            n,
            matrix,
            r,
            compare_r,
            trials,
            seed,
        } => {
            let matrix = matrix.as_deref().map(commands::parse_matrix).transpose()?;
            let (m, n) = matrix.as_ref().map_or((m, n), |g| g.shape());
            emit(&commands::sketch_stats(&SketchArgs {
                matrix,
                m,
                n,
                r,
                compare_r,
                trials,
                seed,
            })?)
        }
        Cmd::Train(args) => train_cmd(args),
    }
}

fn load_config(args: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)
            .map_err(|e| Failure::Error(format!("{}: {e}", path.display())))?,
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Error(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())
            .map_err(|e| Failure::Error(format!("--set {kv}: {e}")))?;
    }
    if let Some(t) = args.transport {
        cfg.transport = t.into();
    }
    if args.out.is_some() {
        cfg.output = args.out.clone();
    }
    if args.summary.is_some() {
        cfg.summary = args.summary.clone();
    }
    cfg.validate().map_err(Failure::Error)?;
    Ok(cfg)
}

/// Children still running when rank 0 bails out are killed.
struct Children(Vec<Child>);

impl Children {
    fn wait_all(mut self) -> Result<(), Failure> {
        for (i, mut child) in std::mem::take(&mut self.0).into_iter().enumerate() {
            let status = child.wait()?;
            if !status.success() {
                return Err(Failure::Error(format!("rank {} exited with {status}", i + 1)));
            }
        }
        Ok(())
    }
}

impl Drop for Children {
    fn drop(&mut self) {
        for child in &mut self.0 {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn spawn_ranks(args: &TrainArgs, world: usize, addr: &str) -> Result<Children, Failure> {
    let exe = std::env::current_exe()?;
    let mut children = Children(Vec::with_capacity(world.saturating_sub(1)));
    for rank in 1..world {
        let mut cmd = Command::new(&exe);
        cmd.arg("train");
        if let Some(c) = &args.config {
            cmd.arg("--config").arg(c);
        }
        for kv in &args.overrides {
            cmd.arg("--set").arg(kv);
        }
        cmd.args(["--transport", "tcp", "--world", &world.to_string(), "--rank", &rank.to_string()])
            .args(["--addr", addr, "--timeout", &args.timeout.to_string()])
            .stdin(Stdio::null())
            .stdout(Stdio::null());
        children.0.push(cmd.spawn()?);
    }
    Ok(children)
}

fn train_cmd(args: TrainArgs) -> Result<(), Failure> {
    let cfg = load_config(&args)?;
    let out = match cfg.transport {
        TransportKind::InProc => train::train_inproc(&cfg)?,
        TransportKind::Tcp => {
            let world = args.world.unwrap_or(cfg.nodes);
            let opts = TcpOptions {
                timeout: std::time::Duration::from_secs(args.timeout),
            };
            if args.rank == 0 {
                let bind = match (&args.addr, args.spawn) {
                    (Some(a), _) => a.clone(),
                    (None, true) => "127.0.0.1:0".to_string(),
                    (None, false) => return Err(Failure::Error("tcp transport needs --addr or --spawn".into())),
                };
                let listener = TcpListener::bind(&bind)?;
                let children = if args.spawn {
                    spawn_ranks(&args, world, &listener.local_addr()?.to_string())?
                } else {
                    Children(Vec::new())
                };
                let mut comm = Comm::new(TcpTransport::root(listener, world, opts)?);
                let out = train::train_rank(&cfg, &mut comm)?;
                drop(comm);
                children.wait_all()?;
                out
            } else {
                let addr = args
                    .addr
                    .as_deref()
                    .ok_or_else(|| Failure::Error("ranks other than 0 need --addr".into()))?;
                let mut comm = Comm::new(TcpTransport::connect(addr, world, args.rank, opts)?);
                let out = train::train_rank(&cfg, &mut comm)?;
                // Only rank 0 reports.
                return match out.diverged_at {
                    Some(_) => Err(Failure::Check),
                    None => Ok(()),
                };
            }
        }
    };
    write_outputs(&cfg, &out, args.timing)?;
    match out.diverged_at {
        Some(step) => {
            eprintln!("error: iterate became non-finite at step {step}");
            Err(Failure::Check)
        }
        None => Ok(()),
    }
}

fn write_outputs(cfg: &RunConfig, out: &TrainOutput, timing: bool) -> Result<(), Failure> {
    let summary = Summary::new(cfg, out, timing);
    match &cfg.output {
        Some(path) => train::write_csv(BufWriter::new(File::create(path)?), &out.records)?,
        None => train::write_csv(io::stdout().lock(), &out.records)?,
    }
    match (&cfg.summary, &cfg.output) {
        (Some(path), _) => {
            let mut f = BufWriter::new(File::create(path)?);
            write!(f, "{summary}")?;
            f.flush()?;
        }
        (None, Some(_)) => print!("{summary}"),
        (None, None) => eprint!("{summary}"),
    }
    Ok(())
}
