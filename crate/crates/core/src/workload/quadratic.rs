use super::Problem;
use crate::error::{Error, Result};
use crate::matrix::{cholesky_solve, dot, symmetric_eigenvalues, DenseMatrix};
use crate::rng::{SeedValue, SeededStream};

/// `f_i(x) = 0.5 x^T A_i x - b_i^T x` on node `i`.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    a_local: Vec<DenseMatrix>,
    b_local: Vec<Vec<f64>>,
    a_global: DenseMatrix,
    b_global: Vec<f64>,
    sigma: f64,
    smoothness: f64,
    minimizer: Vec<f64>,
    optimal_value: f64,
}

impl QuadraticProblem {
    /// Validates that every `A_i` is symmetric PSD and that their average is
    /// positive definite, then solves for the minimizer.
    pub fn new(a_local: Vec<DenseMatrix>, b_local: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        if a_local.is_empty() || a_local.len() != b_local.len() {
            return Err(Error::InvalidConfig(format!(
                "{} matrices for {} vectors",
                a_local.len(),
                b_local.len()
            )));
        }
        let d = a_local[0].rows();
        for (i, (a, b)) in a_local.iter().zip(&b_local).enumerate() {
            if a.shape() != (d, d) || b.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "node {i}: A is {:?}, b has {} entries, expected dimension {d}",
                    a.shape(),
                    b.len()
                )));
            }
            if a.transpose() != *a {
                return Err(Error::InvalidConfig(format!("A_{i} is not symmetric")));
            }
            let eig = symmetric_eigenvalues(a)?;
            let tol = 1e-12 * eig.last().unwrap().abs().max(1.0);
            if eig[0] < -tol {
                return Err(Error::InvalidConfig(format!(
                    "A_{i} is not positive semi-definite (eigenvalue {})",
                    eig[0]
                )));
            }
        }
        let (a_global, b_global) = average_parts(&a_local, &b_local);
        let eig = symmetric_eigenvalues(&a_global)?;
        if eig[0] <= 0.0 {
            return Err(Error::InvalidConfig(
                "average of A_i is not positive definite".into(),
            ));
        }
        let minimizer = cholesky_solve(&a_global, &b_global)?;
        Ok(Self::assemble(
            a_local,
            b_local,
            a_global,
            b_global,
            sigma,
            *eig.last().unwrap(),
            minimizer,
        ))
    }

    fn assemble(
        a_local: Vec<DenseMatrix>,
        b_local: Vec<Vec<f64>>,
        a_global: DenseMatrix,
        b_global: Vec<f64>,
        sigma: f64,
        smoothness: f64,
        minimizer: Vec<f64>,
    ) -> Self {
        // f(x*) = -0.5 b^T x* at the stationary point.
        let optimal_value = -0.5 * dot(&b_global, &minimizer);
        Self {
            a_local,
            b_local,
            a_global,
            b_global,
            sigma,
            smoothness,
            minimizer,
            optimal_value,
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        assert!(sigma >= 0.0 && sigma.is_finite(), "sigma must be finite and non-negative");
        self.sigma = sigma;
        self
    }

    pub fn minimizer(&self) -> &[f64] {
        &self.minimizer
    }

    pub fn local_matrix(&self, rank: usize) -> &DenseMatrix {
        &self.a_local[rank]
    }

    pub fn local_vector(&self, rank: usize) -> &[f64] {
        &self.b_local[rank]
    }

    pub fn global_matrix(&self) -> &DenseMatrix {
        &self.a_global
    }

    pub fn global_vector(&self) -> &[f64] {
        &self.b_global
    }
}

fn average_parts(a_local: &[DenseMatrix], b_local: &[Vec<f64>]) -> (DenseMatrix, Vec<f64>) {
    let n = a_local.len() as f64;
    let d = a_local[0].rows();
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    for (ai, bi) in a_local.iter().zip(b_local) {
        for (acc, v) in a.iter_mut().zip(ai.as_slice()) {
            *acc += v;
        }
        for (acc, v) in b.iter_mut().zip(bi) {
            *acc += v;
        }
    }
    a.iter_mut().for_each(|v| *v /= n);
    b.iter_mut().for_each(|v| *v /= n);
    (DenseMatrix::from_raw(d, d, a), b)
}

impl Problem for QuadraticProblem {
    fn dim(&self) -> usize {
        self.b_global.len()
    }

    fn num_nodes(&self) -> usize {
        self.a_local.len()
    }

    fn sigma(&self) -> f64 {
        self.sigma
    }

    fn local_grad(&self, rank: usize, x: &[f64]) -> Vec<f64> {
        let mut g = self.a_local[rank]
            .matvec(x)
            .expect("iterate dimension matches the problem");
        for (gi, bi) in g.iter_mut().zip(&self.b_local[rank]) {
            *gi -= bi;
        }
        g
    }

    fn loss(&self, x: &[f64]) -> f64 {
        let ax = self.a_global.matvec(x).expect("iterate dimension matches the problem");
        0.5 * dot(x, &ax) - dot(&self.b_global, x)
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = self.a_global.matvec(x).expect("iterate dimension matches the problem");
        for (gi, bi) in g.iter_mut().zip(&self.b_global) {
            *gi -= bi;
        }
        g
    }

    fn smoothness(&self) -> f64 {
        self.smoothness
    }

    fn optimal_value(&self) -> Option<f64> {
        Some(self.optimal_value)
    }
}

/// `f(0) - f*` of every row-structured quadratic.
pub const ROW_STRUCTURED_INITIAL_GAP: f64 = 10.0;

/// Decay exponent of the row magnitudes of the minimizer: the row ranked `k`
/// (in a random order) has scale `(k + 1)^-ROW_DECAY`.
const ROW_DECAY: f64 = 1.5;

/// Builds a quadratic whose gradients, reshaped to `m` rows, are dominated by
/// a few rows.
///
/// * The average Hessian is diagonal with entries in `[1, condition]` (both
///   ends attained when `d >= 2`), so `L = condition` exactly and
///   `x* = b / diag(A)`.
/// * Rows of `x*` follow a power-law magnitude profile, so the gradient at
///   `x_0 = 0`, `-A x*`, has skewed row norms. `x*` is scaled so that
///   `f(0) - f* = ROW_STRUCTURED_INITIAL_GAP`.
/// * `heterogeneity` in `[0, 1]` adds zero-mean symmetric perturbations of
///   spectral norm at most `heterogeneity` to each `A_i` (keeping it PSD), and
///   zero-mean offsets to each `b_i`. The global objective does not depend on
///   it.
pub fn make_row_structured_quadratic(
    seed: SeedValue,
    d: usize,
    m: usize,
    num_nodes: usize,
    condition: f64,
    heterogeneity: f64,
) -> Result<QuadraticProblem> {
    if m == 0 || d == 0 || d % m != 0 {
        return Err(Error::NonDivisibleDimension { len: d, rows: m });
    }
    if num_nodes == 0 {
        return Err(Error::InvalidConfig("need at least one node".into()));
    }
    if !(condition >= 1.0 && condition.is_finite()) {
        return Err(Error::InvalidConfig(format!("condition must be >= 1, got {condition}")));
    }
    if !(0.0..=1.0).contains(&heterogeneity) {
        return Err(Error::InvalidConfig(format!(
            "heterogeneity must be in [0, 1], got {heterogeneity}"
        )));
    }
    let n = d / m;
    let mut rng = SeededStream::new(seed.derive(0x7175_6164, 0));

    let mut diag: Vec<f64> = (0..d).map(|_| condition.powf(rng.next_f64())).collect();
    if d >= 2 {
        let hi = rng.next_index(d);
        let lo = (hi + 1 + rng.next_index(d - 1)) % d;
        diag[hi] = condition;
        diag[lo] = 1.0;
    } else {
        diag[0] = condition;
    }

    let mut order: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        order.swap(i, rng.next_index(i + 1));
    }
    let mut x_star = vec![0.0; d];
    for (rank, &row) in order.iter().enumerate() {
        let scale = (rank as f64 + 1.0).powf(-ROW_DECAY);
        for v in &mut x_star[row * n..(row + 1) * n] {
            *v = scale * rng.next_normal();
        }
    }
    let gap: f64 = 0.5 * x_star.iter().zip(&diag).map(|(x, l)| l * x * x).sum::<f64>();
    let rescale = (ROW_STRUCTURED_INITIAL_GAP / gap).sqrt();
    x_star.iter_mut().for_each(|v| *v *= rescale);
    let b: Vec<f64> = x_star.iter().zip(&diag).map(|(x, l)| l * x).collect();

    let mut a_global = DenseMatrix::zeros(d, d);
    for (i, &l) in diag.iter().enumerate() {
        a_global.set(i, i, l);
    }

    let (a_local, b_local) = if heterogeneity == 0.0 || num_nodes == 1 {
        (vec![a_global.clone(); num_nodes], vec![b.clone(); num_nodes])
    } else {
        perturb(&mut rng, &a_global, &b, num_nodes, heterogeneity)
    };

    Ok(QuadraticProblem::assemble(
        a_local, b_local, a_global, b, 0.0, condition, x_star,
    ))
}

fn perturb(
    rng: &mut SeededStream,
    a: &DenseMatrix,
    b: &[f64],
    num_nodes: usize,
    heterogeneity: f64,
) -> (Vec<DenseMatrix>, Vec<Vec<f64>>) {
    let d = b.len();
    let raw: Vec<DenseMatrix> = (0..num_nodes)
        .map(|_| {
            let mut f = DenseMatrix::zeros(d, d);
            for i in 0..d {
                for j in i..d {
                    let v = rng.next_normal();
                    f.set(i, j, v);
                    f.set(j, i, v);
                }
            }
            f
        })
        .collect();
    let raw_b: Vec<Vec<f64>> = (0..num_nodes)
        .map(|_| (0..d).map(|_| rng.next_normal()).collect())
        .collect();
    let (mean_f, mean_c) = average_parts(&raw, &raw_b);

    let centered: Vec<Vec<f64>> = raw
        .iter()
        .map(|f| f.as_slice().iter().zip(mean_f.as_slice()).map(|(v, m)| v - m).collect())
        .collect();
    // Frobenius norm bounds the spectral norm.
    let worst = centered
        .iter()
        .map(|e| e.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    // A >= I, so a perturbation of spectral norm <= heterogeneity keeps A_i PSD.
    let a_scale = if worst > 0.0 { heterogeneity / worst } else { 0.0 };
    let b_rms = (b.iter().map(|v| v * v).sum::<f64>() / d as f64).sqrt();

    let a_local = centered
        .iter()
        .map(|e| {
            let data = a.as_slice().iter().zip(e).map(|(av, ev)| av + a_scale * ev).collect();
            DenseMatrix::from_raw(d, d, data)
        })
        .collect();
    let b_local = raw_b
        .iter()
        .map(|c| {
            b.iter()
                .zip(c.iter().zip(&mean_c))
                .map(|(bv, (cv, mv))| bv + heterogeneity * b_rms * (cv - mv))
                .collect()
        })
        .collect();
    (a_local, b_local)
}
