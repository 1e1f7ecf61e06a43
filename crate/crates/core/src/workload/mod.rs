//! Synthetic distributed objectives `f(x) = (1/N) sum_i f_i(x)` and their
//! stochastic gradient oracles.

mod logistic;
mod quadratic;

pub use logistic::{make_logistic, LogisticProblem};
pub use quadratic::{make_row_structured_quadratic, QuadraticProblem, ROW_STRUCTURED_INITIAL_GAP};

use crate::rng::{SeedValue, SeededStream};

/// A finite-sum objective split across `num_nodes` nodes.
pub trait Problem: Send + Sync {
    fn dim(&self) -> usize;

    fn num_nodes(&self) -> usize;

    /// Standard deviation of the oracle noise: `E||noise||^2 = sigma^2`.
    fn sigma(&self) -> f64;

    /// Exact local gradient `grad f_i(x)`.
    ///
    /// # Panics
    /// If `x.len() != self.dim()` or `rank >= self.num_nodes()`.
    fn local_grad(&self, rank: usize, x: &[f64]) -> Vec<f64>;

    /// Global objective `f(x)`.
    fn loss(&self, x: &[f64]) -> f64;

    /// Global gradient `grad f(x)`.
    fn grad(&self, x: &[f64]) -> Vec<f64>;

    /// Smoothness constant `L` of `f` (an upper bound where not exact).
    fn smoothness(&self) -> f64;

    /// Optimal value `f*`, when known.
    fn optimal_value(&self) -> Option<f64>;
}

/// Exact local gradient of node `rank`.
pub fn full_grad(problem: &dyn Problem, rank: usize, x: &[f64]) -> Vec<f64> {
    problem.local_grad(rank, x)
}

const NOISE_TAG: u64 = 0x6e6f_6973_65;

/// Per-node stochastic gradient oracle: exact local gradient plus i.i.d.
/// Gaussian noise of variance `sigma^2 / d` per coordinate.
pub struct GradOracle<'a> {
    problem: &'a dyn Problem,
    rank: usize,
    noise: SeededStream,
}

impl<'a> GradOracle<'a> {
    /// The node's noise stream is derived from `(master, rank)`, so nodes are
    /// independent and runs are reproducible.
    pub fn new(problem: &'a dyn Problem, rank: usize, master: SeedValue) -> Self {
        assert!(rank < problem.num_nodes(), "rank {rank} has no local objective");
        Self {
            problem,
            rank,
            noise: SeededStream::new(master.derive(NOISE_TAG, rank as u64)),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn problem(&self) -> &'a dyn Problem {
        self.problem
    }

    pub fn stochastic_grad(&mut self, x: &[f64]) -> Vec<f64> {
        let mut g = self.problem.local_grad(self.rank, x);
        let sigma = self.problem.sigma();
        if sigma > 0.0 {
            let scale = sigma / (g.len() as f64).sqrt();
            for v in &mut g {
                *v += scale * self.noise.next_normal();
            }
        }
        g
    }

    /// Average of `batch` independent stochastic gradients at `x`.
    pub fn minibatch_grad(&mut self, x: &[f64], batch: usize) -> Vec<f64> {
        assert!(batch >= 1, "batch size must be at least 1");
        let mut acc = self.stochastic_grad(x);
        for _ in 1..batch {
            for (a, v) in acc.iter_mut().zip(self.stochastic_grad(x)) {
                *a += v;
            }
        }
        let denom = batch as f64;
        for a in &mut acc {
            *a /= denom;
        }
        acc
    }
}
