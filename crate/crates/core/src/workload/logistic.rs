use super::Problem;
use crate::error::{Error, Result};
use crate::matrix::{dot, norm_sq, DenseMatrix};
use crate::rng::{SeedValue, SeededStream};

/// Ridge-regularised logistic regression, one synthetic data shard per node:
/// `f_i(x) = mean_j log(1 + exp(-y_j a_j^T x)) + (lambda / 2) ||x||^2`.
#[derive(Debug, Clone)]
pub struct LogisticProblem {
    features: Vec<DenseMatrix>,
    labels: Vec<Vec<f64>>,
    lambda: f64,
    sigma: f64,
    smoothness: f64,
}

impl LogisticProblem {
    pub fn new(features: Vec<DenseMatrix>, labels: Vec<Vec<f64>>, lambda: f64, sigma: f64) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::InvalidConfig("one feature matrix and label set per node".into()));
        }
        let d = features[0].cols();
        for (i, (a, y)) in features.iter().zip(&labels).enumerate() {
            if a.cols() != d || a.rows() != y.len() {
                return Err(Error::DimensionMismatch(format!(
                    "node {i}: {} samples of width {}, {} labels",
                    a.rows(),
                    a.cols(),
                    y.len()
                )));
            }
            if y.iter().any(|&l| l != 1.0 && l != -1.0) {
                return Err(Error::InvalidConfig(format!("node {i}: labels must be +1 or -1")));
            }
        }
        if !(lambda >= 0.0) {
            return Err(Error::InvalidConfig("ridge term must be non-negative".into()));
        }
        // The logistic loss has curvature at most 1/4, so the Hessian of f is
        // bounded by (1/4) * mean over nodes of mean_j ||a_j||^2, plus lambda.
        let curvature = features
            .iter()
            .map(|a| a.row_iter().map(norm_sq).sum::<f64>() / a.rows() as f64)
            .sum::<f64>()
            / features.len() as f64;
        Ok(Self {
            features,
            labels,
            lambda,
            sigma,
            smoothness: 0.25 * curvature + lambda,
        })
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        assert!(sigma >= 0.0 && sigma.is_finite(), "sigma must be finite and non-negative");
        self.sigma = sigma;
        self
    }

    fn local_loss(&self, rank: usize, x: &[f64]) -> f64 {
        let a = &self.features[rank];
        let y = &self.labels[rank];
        let data: f64 = a
            .row_iter()
            .zip(y)
            .map(|(row, &label)| softplus(-label * dot(row, x)))
            .sum::<f64>()
            / a.rows() as f64;
        data + 0.5 * self.lambda * norm_sq(x)
    }

    /// Approximates `min f` with `iters` gradient steps of size `1/L` from the
    /// origin.
    pub fn estimate_optimal_value(&self, iters: usize) -> f64 {
        let step = 1.0 / self.smoothness;
        let mut x = vec![0.0; self.dim()];
        for _ in 0..iters {
            let g = self.grad(&x);
            for (xi, gi) in x.iter_mut().zip(g) {
                *xi -= step * gi;
            }
        }
        self.loss(&x)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Problem for LogisticProblem {
    fn dim(&self) -> usize {
        self.features[0].cols()
    }

    fn num_nodes(&self) -> usize {
        self.features.len()
    }

    fn sigma(&self) -> f64 {
        self.sigma
    }

    fn local_grad(&self, rank: usize, x: &[f64]) -> Vec<f64> {
        let a = &self.features[rank];
        assert_eq!(x.len(), a.cols(), "iterate dimension matches the problem");
        let mut g: Vec<f64> = x.iter().map(|v| self.lambda * v).collect();
        let inv = 1.0 / a.rows() as f64;
        for (row, &label) in a.row_iter().zip(&self.labels[rank]) {
            let coeff = -label * sigmoid(-label * dot(row, x)) * inv;
            for (gi, ai) in g.iter_mut().zip(row) {
                *gi += coeff * ai;
            }
        }
        g
    }

    fn loss(&self, x: &[f64]) -> f64 {
        (0..self.num_nodes()).map(|r| self.local_loss(r, x)).sum::<f64>() / self.num_nodes() as f64
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let n = self.num_nodes() as f64;
        let mut g = vec![0.0; self.dim()];
        for r in 0..self.num_nodes() {
            for (acc, v) in g.iter_mut().zip(self.local_grad(r, x)) {
                *acc += v;
            }
        }
        g.iter_mut().for_each(|v| *v /= n);
        g
    }

    fn smoothness(&self) -> f64 {
        self.smoothness
    }

    fn optimal_value(&self) -> Option<f64> {
        None
    }
}

/// Seeded synthetic classification data. Features are `N(shift_i, I / d)`
/// where the node shift has norm `heterogeneity`; labels follow a planted
/// linear model with logistic noise.
pub fn make_logistic(
    seed: SeedValue,
    d: usize,
    samples_per_node: usize,
    num_nodes: usize,
    lambda: f64,
    heterogeneity: f64,
) -> Result<LogisticProblem> {
    if d == 0 || samples_per_node == 0 || num_nodes == 0 {
        return Err(Error::InvalidConfig(
            "dimension, samples and nodes must all be positive".into(),
        ));
    }
    let mut rng = SeededStream::new(seed.derive(0x6c6f_6769_74, 0));
    let planted: Vec<f64> = (0..d).map(|_| 3.0 * rng.next_normal()).collect();
    let feature_scale = 1.0 / (d as f64).sqrt();
    let mut features = Vec::with_capacity(num_nodes);
    let mut labels = Vec::with_capacity(num_nodes);
    for _ in 0..num_nodes {
        let shift: Vec<f64> = (0..d).map(|_| heterogeneity * feature_scale * rng.next_normal()).collect();
        let mut data = Vec::with_capacity(samples_per_node * d);
        let mut y = Vec::with_capacity(samples_per_node);
        for _ in 0..samples_per_node {
            let row: Vec<f64> = shift.iter().map(|s| s + feature_scale * rng.next_normal()).collect();
            let p = sigmoid(dot(&row, &planted));
            y.push(if rng.next_f64() < p { 1.0 } else { -1.0 });
            data.extend(row);
        }
        features.push(DenseMatrix::new(samples_per_node, d, data)?);
        labels.push(y);
    }
    LogisticProblem::new(features, labels, lambda, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_matrix;

    #[test]
    fn finite_difference_gradient() {
        let p = make_logistic(SeedValue(1), 12, 40, 3, 0.01, 0.5).unwrap();
        let x = gaussian_matrix(SeedValue(2), 1, 12).into_vec();
        let v = gaussian_matrix(SeedValue(3), 1, 12).into_vec();
        let h = 1e-5;
        for rank in 0..3 {
            let plus: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
            let minus: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
            let fd = (p.local_loss(rank, &plus) - p.local_loss(rank, &minus)) / (2.0 * h);
            let analytic = dot(&p.local_grad(rank, &x), &v);
            assert!((fd - analytic).abs() <= 1e-6, "{fd} vs {analytic}");
        }
    }

    #[test]
    fn smoothness_bound_holds() {
        let p = make_logistic(SeedValue(4), 8, 30, 2, 0.1, 1.0).unwrap();
        let mut s = SeededStream::new(SeedValue(5));
        for _ in 0..1000 {
            let x: Vec<f64> = (0..8).map(|_| 3.0 * s.next_normal()).collect();
            let y: Vec<f64> = (0..8).map(|_| 3.0 * s.next_normal()).collect();
            let dg: Vec<f64> = p.grad(&x).iter().zip(p.grad(&y)).map(|(a, b)| a - b).collect();
            let dx: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            assert!(norm_sq(&dg).sqrt() <= p.smoothness() * norm_sq(&dx).sqrt() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn gradient_descent_reduces_loss() {
        let p = make_logistic(SeedValue(6), 10, 50, 2, 0.05, 0.3).unwrap();
        let start = p.loss(&[0.0; 10]);
        let best = p.estimate_optimal_value(2000);
        assert!(best < start);
        assert!((start - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_labels() {
        let a = DenseMatrix::zeros(2, 2);
        assert!(LogisticProblem::new(vec![a.clone()], vec![vec![1.0, 0.0]], 0.0, 0.0).is_err());
        assert!(LogisticProblem::new(vec![a], vec![vec![1.0]], 0.0, 0.0).is_err());
    }
}
