//! Entropy lower bound for attention rows whose entries are all at least ε.
//!
//! The minimizing row puts `1 − (n−1)ε` on one entry and ε on the rest;
//! its entropy `H_min(n, ε)` grows strictly with `n`.

use crate::attention::row_entropy;
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundQuery {
    pub n: usize,
    pub epsilon: f64,
}

impl BoundQuery {
    pub fn new(n: usize, epsilon: f64) -> Result<Self> {
        let q = BoundQuery { n, epsilon };
        q.validate()?;
        Ok(q)
    }

    fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::param(format!("bound needs n >= 2, got {}", self.n)));
        }
        // allow ε = 1/n despite rounding in the caller's division
        let cap = 1.0 / self.n as f64 * (1.0 + 4.0 * f64::EPSILON);
        if !(self.epsilon > 0.0 && self.epsilon <= cap) {
            return Err(Error::param(format!(
                "epsilon {} outside (0, 1/{}]",
                self.epsilon, self.n
            )));
        }
        Ok(())
    }

    /// Weight on the dominant entry of the extremal row.
    fn head(&self) -> f64 {
        (1.0 - (self.n - 1) as f64 * self.epsilon).max(0.0)
    }

    /// The row `(1 − (n−1)ε, ε, …, ε)` that attains the bound.
    pub fn extremal_row(&self) -> Vec<f64> {
        let mut row = vec![self.epsilon; self.n];
        row[0] = self.head();
        row
    }
}

fn xlnx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// `H_min(n, ε) = −(1−(n−1)ε) ln(1−(n−1)ε) − (n−1) ε ln ε`, in nats.
pub fn entropy_lower_bound(q: BoundQuery) -> Result<f64> {
    q.validate()?;
    Ok(-xlnx(q.head()) - (q.n - 1) as f64 * xlnx(q.epsilon))
}

/// `dH_min/dn = ε ln((1−(n−1)ε)/ε) + ε`, treating `n` as real.
pub fn lower_bound_derivative(q: BoundQuery) -> Result<f64> {
    q.validate()?;
    let eps = q.epsilon;
    Ok(eps * (q.head() / eps).ln() + eps)
}

#[derive(Clone, Debug)]
pub struct MonotoneReport {
    pub epsilon: f64,
    pub n_values: Vec<usize>,
    pub bounds: Vec<f64>,
    /// First consecutive pair `(n_a, n_b)` where the bound failed to grow.
    pub monotone_violation: Option<(usize, usize)>,
    pub draws: usize,
    /// Smallest `H(p) − H_min` seen over the random draws.
    pub min_slack: f64,
    pub draw_violations: usize,
    /// Largest `|H(extremal) − H_min|` over `n_values`.
    pub extremal_gap: f64,
}

impl MonotoneReport {
    pub fn passed(&self) -> bool {
        self.monotone_violation.is_none() && self.draw_violations == 0 && self.extremal_gap <= 1e-12
    }
}

/// Draws a point uniformly from `{p : p_i ≥ ε, Σ p = 1}`.
pub fn sample_constrained_simplex(rng: &mut Rng, n: usize, epsilon: f64) -> Vec<f64> {
    let free = (1.0 - n as f64 * epsilon).max(0.0);
    let mut e: Vec<f64> = (0..n).map(|_| rng.exponential()).collect();
    let z: f64 = e.iter().sum();
    e.iter_mut().for_each(|x| *x = epsilon + free * *x / z);
    e
}

/// Checks strict growth of the bound over `n_values` and that `draws`
/// random constrained rows (cycled across `n_values`) never undercut it.
pub fn verify_monotone_bound(epsilon: f64, n_values: &[usize], draws: usize, seed: u64) -> Result<MonotoneReport> {
    if n_values.is_empty() {
        return Err(Error::param("empty n range"));
    }
    let queries = n_values
        .iter()
        .map(|&n| BoundQuery::new(n, epsilon))
        .collect::<Result<Vec<_>>>()?;
    let bounds = queries
        .iter()
        .map(|&q| entropy_lower_bound(q))
        .collect::<Result<Vec<_>>>()?;
    let monotone_violation = n_values
        .windows(2)
        .zip(bounds.windows(2))
        .find(|(ns, hs)| ns[1] > ns[0] && hs[1] <= hs[0])
        .map(|(ns, _)| (ns[0], ns[1]));

    let extremal_gap = queries
        .iter()
        .zip(&bounds)
        .map(|(q, &b)| (row_entropy(&q.extremal_row()) - b).abs())
        .fold(0.0, f64::max);

    let mut rng = Rng::new(seed);
    let mut min_slack = f64::INFINITY;
    let mut draw_violations = 0;
    for d in 0..draws {
        let k = d % queries.len();
        let row = sample_constrained_simplex(&mut rng, queries[k].n, epsilon);
        let slack = row_entropy(&row) - bounds[k];
        min_slack = min_slack.min(slack);
        if slack < -1e-12 {
            draw_violations += 1;
        }
    }

    Ok(MonotoneReport {
        epsilon,
        n_values: n_values.to_vec(),
        bounds,
        monotone_violation,
        draws,
        min_slack,
        draw_violations,
        extremal_gap,
    })
}
