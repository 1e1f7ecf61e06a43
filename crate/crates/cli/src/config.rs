//! `key = value` run configuration.
//!
//! ```text
//! # row-structured quadratic, four nodes
//! problem = quadratic
//! d = 256
//! m = 16
//! nodes = 4
//! method = arc
//! gamma = auto      # 1 / (4 L)
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use arctopk::compressor::Method;
use arctopk::optimizer::{OptimizerKind, TrainSpec};
use arctopk::rng::SeedValue;
use arctopk::workload::{make_logistic, make_row_structured_quadratic, Problem};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self {
            line: Some(line),
            message: message.into(),
        }
    }

    fn general(message: impl Into<String>) -> Self {
        Self {
            line: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Quadratic,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    InProc,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    /// `1 / (4 L)`.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: ProblemKind,
    pub d: usize,
    pub nodes: usize,
    pub condition: f64,
    pub heterogeneity: f64,
    pub sigma: f64,
    pub samples: usize,
    pub lambda: f64,
    pub problem_seed: Option<u64>,
    pub method: Method,
    pub optimizer: OptimizerKind,
    pub m: usize,
    pub mu: f64,
    pub r: usize,
    pub gamma: StepSize,
    pub eta: f64,
    pub beta: f64,
    pub b_init: usize,
    pub iterations: usize,
    pub seed: u64,
    pub transport: TransportKind,
    pub output: Option<PathBuf>,
    pub summary: Option<PathBuf>,
    /// Report the entries spent to first reach `f* + target_gap`.
    pub target_gap: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: ProblemKind::Quadratic,
            d: 64,
            nodes: 1,
            condition: 10.0,
            heterogeneity: 0.5,
            sigma: 0.0,
            samples: 64,
            lambda: 0.01,
            problem_seed: None,
            method: Method::Arc,
            optimizer: OptimizerKind::Ef21m,
            m: 8,
            mu: 0.25,
            r: 1,
            gamma: StepSize::Auto,
            eta: 0.9,
            beta: 0.9,
            b_init: 1,
            iterations: 100,
            seed: 0,
            transport: TransportKind::InProc,
            output: None,
            summary: None,
            target_gap: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "problem",
    "d",
    "nodes",
    "condition",
    "heterogeneity",
    "sigma",
    "samples",
    "lambda",
    "problem_seed",
    "method",
    "optimizer",
    "m",
    "mu",
    "r",
    "gamma",
    "eta",
    "beta",
    "b_init",
    "iterations",
    "seed",
    "transport",
    "output",
    "summary",
    "target_gap",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value '{value}' for '{key}'"))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::general(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::at(line_no, format!("expected key = value, got '{line}'")))?;
            let key = key.trim();
            let value = value.trim();
            let known = KEYS
                .iter()
                .find(|k| **k == key)
                .ok_or_else(|| ConfigError::at(line_no, format!("unknown key '{key}'")))?;
            if seen.contains(known) {
                return Err(ConfigError::at(line_no, format!("duplicate key '{key}'")));
            }
            seen.push(known);
            cfg.set(key, value).map_err(|m| ConfigError::at(line_no, m))?;
        }
        cfg.validate().map_err(ConfigError::general)?;
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "problem" => {
                self.problem = match value {
                    "quadratic" => ProblemKind::Quadratic,
                    "logistic" => ProblemKind::Logistic,
                    _ => return Err(format!("unknown problem '{value}'")),
                }
            }
            "d" => self.d = parse(key, value)?,
            "nodes" => self.nodes = parse(key, value)?,
            "condition" => self.condition = parse(key, value)?,
            "heterogeneity" => self.heterogeneity = parse(key, value)?,
            "sigma" => self.sigma = parse(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "problem_seed" => self.problem_seed = Some(parse(key, value)?),
            "method" => self.method = value.parse().map_err(|e| format!("{e}"))?,
            "optimizer" => self.optimizer = value.parse().map_err(|e| format!("{e}"))?,
            "m" => self.m = parse(key, value)?,
            "mu" => self.mu = parse(key, value)?,
            "r" => self.r = parse(key, value)?,
            "gamma" => {
                self.gamma = if value == "auto" {
                    StepSize::Auto
                } else {
                    StepSize::Fixed(parse(key, value)?)
                }
            }
            "eta" => self.eta = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "b_init" => self.b_init = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "transport" => {
                self.transport = match value {
                    "inproc" => TransportKind::InProc,
                    "tcp" => TransportKind::Tcp,
                    _ => return Err(format!("unknown transport '{value}'")),
                }
            }
            "output" => self.output = Some(PathBuf::from(value)),
            "summary" => self.summary = Some(PathBuf::from(value)),
            "target_gap" => self.target_gap = Some(parse(key, value)?),
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("d", self.d),
            ("nodes", self.nodes),
            ("m", self.m),
            ("r", self.r),
            ("b_init", self.b_init),
            ("samples", self.samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(format!("'{name}' must be at least 1"));
            }
        }
        if self.m > self.d {
            return Err(format!("m = {} exceeds d = {}", self.m, self.d));
        }
        if self.problem == ProblemKind::Quadratic && self.d % self.m != 0 {
            return Err(format!("quadratic problem needs m to divide d ({} % {})", self.d, self.m));
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(format!("mu must be in (0, 1], got {}", self.mu));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(format!("eta must be in (0, 1], got {}", self.eta));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(format!("beta must be in [0, 1), got {}", self.beta));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(format!("sigma must be finite and >= 0, got {}", self.sigma));
        }
        if let StepSize::Fixed(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(format!("gamma must be positive, got {g}"));
            }
        }
        if let Some(gap) = self.target_gap {
            if !(gap > 0.0) {
                return Err(format!("target_gap must be positive, got {gap}"));
            }
        }
        Ok(())
    }

    pub fn build_problem(&self) -> arctopk::Result<Box<dyn Problem>> {
        let seed = SeedValue(self.problem_seed.unwrap_or(self.seed));
        Ok(match self.problem {
            ProblemKind::Quadratic => Box::new(
                make_row_structured_quadratic(seed, self.d, self.m, self.nodes, self.condition, self.heterogeneity)?
                    .with_sigma(self.sigma),
            ),
            ProblemKind::Logistic => Box::new(
                make_logistic(seed, self.d, self.samples, self.nodes, self.lambda, self.heterogeneity)?
                    .with_sigma(self.sigma),
            ),
        })
    }

    pub fn train_spec(&self, problem: &dyn Problem) -> TrainSpec {
        let gamma = match self.gamma {
            StepSize::Auto => 1.0 / (4.0 * problem.smoothness()),
            StepSize::Fixed(g) => g,
        };
        let mut spec = TrainSpec::new(self.method, self.m, self.mu, gamma, self.iterations, self.seed);
        spec.optimizer = self.optimizer;
        spec.r = self.r;
        spec.eta = self.eta;
        spec.beta = self.beta;
        spec.b_init = self.b_init;
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let cfg = RunConfig::parse_str(
            "# header\n\nmethod = randk\nd=32 # trailing\nm = 4\ngamma = 0.05\ntarget_gap=0.01\n",
        )
        .unwrap();
        assert_eq!(cfg.method, Method::RandK);
        assert_eq!(cfg.d, 32);
        assert_eq!(cfg.gamma, StepSize::Fixed(0.05));
        assert_eq!(cfg.target_gap, Some(0.01));
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::parse_str("d = 8\n\nlearning_rate = 1\n").unwrap_err();
        assert_eq!(err.line, Some(3));
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn duplicate_and_malformed_lines_fail() {
        assert_eq!(RunConfig::parse_str("d=8\nd=16\n").unwrap_err().line, Some(2));
        assert_eq!(RunConfig::parse_str("d 8\n").unwrap_err().line, Some(1));
        assert_eq!(RunConfig::parse_str("mu = lots\n").unwrap_err().line, Some(1));
    }

    #[test]
    fn range_checks() {
        assert!(RunConfig::parse_str("mu = 0\n").is_err());
        assert!(RunConfig::parse_str("d = 10\nm = 4\n").is_err());
        assert!(RunConfig::parse_str("problem = logistic\nd = 10\nm = 4\n").is_ok());
        assert!(RunConfig::parse_str("eta = 1.5\n").is_err());
    }

    #[test]
    fn auto_step_uses_smoothness() {
        let cfg = RunConfig::parse_str("condition = 8\n").unwrap();
        let p = cfg.build_problem().unwrap();
        assert_eq!(cfg.train_spec(p.as_ref()).gamma, 1.0 / 32.0);
    }
}
