//! Empirical measures on R^d with moments and exact Wasserstein-2 distances
//! at desk scale.
//!
//! The engine works with uniformly weighted replica clouds; weighted atoms are
//! supported here for generality. Measures are immutable after construction
//! and all summations run in fixed atom order, so results do not depend on
//! worker count.

use crate::error::{Error, Result};
use crate::linalg::Vect;

const WEIGHT_TOL: f64 = 1e-12;

/// Maximum atom count accepted by the assignment-based exact W2 solver.
pub const W2_EXACT_LIMIT: usize = 12;

/// Maximum atom count accepted by the exhaustive-coupling oracle.
pub const W2_ENUM_LIMIT: usize = 8;

/// A finitely supported probability measure with finite second moment.
#[derive(Clone, Debug)]
pub struct EmpiricalMeasure {
    atoms: Vec<Vect>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Uniformly weighted measure on the given atoms.
    pub fn uniform(atoms: Vec<Vect>) -> Result<Self> {
        let n = atoms.len();
        if n == 0 {
            return Err(Error::Config("empirical measure needs at least one atom".into()));
        }
        let w = 1.0 / n as f64;
        Self::weighted(atoms, vec![w; n])
    }

    pub fn weighted(atoms: Vec<Vect>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(Error::Config("atoms and weights must be nonempty and equal length".into()));
        }
        let d = atoms[0].dim();
        for (i, a) in atoms.iter().enumerate() {
            if a.dim() != d {
                return Err(Error::DimensionMismatch {
                    context: "empirical measure atoms",
                    expected: d,
                    got: a.dim(),
                });
            }
            if !a.is_finite() {
                return Err(Error::MeasureCorruption { atom: i });
            }
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::Config(format!(
                "weights must be nonnegative and sum to 1 within {WEIGHT_TOL} (sum = {sum})"
            )));
        }
        Ok(EmpiricalMeasure { atoms, weights })
    }

    /// 1-d measure from raw samples.
    pub fn from_samples_1d(samples: &[f64]) -> Result<Self> {
        Self::uniform(samples.iter().map(|&x| Vect::scalar(x)).collect())
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].dim()
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn atoms(&self) -> &[Vect] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// m_j = sum_i w_i h_j(z_i), in fixed atom order.
    pub fn moments(&self, stats: &[impl Fn(&Vect) -> f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(stats.len());
        for h in stats {
            let mut m = 0.0;
            for (i, (z, w)) in self.atoms.iter().zip(&self.weights).enumerate() {
                let v = h(z);
                if !v.is_finite() {
                    return Err(Error::MeasureCorruption { atom: i });
                }
                m += w * v;
            }
            out.push(m);
        }
        Ok(out)
    }

    pub fn mean(&self) -> Vect {
        let mut m = Vect::zeros(self.dim());
        for (z, w) in self.atoms.iter().zip(&self.weights) {
            m.axpy(*w, z);
        }
        m
    }

    pub fn second_moment(&self) -> f64 {
        self.atoms
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| w * z.dot(z))
            .sum()
    }
}

/// Exact W2 between 1-d measures via the quantile coupling.
///
/// For equal atom counts with uniform weights this is the sorted pairing
/// sqrt((1/N) sum (x_(i) - y_(i))^2); general weights are handled by walking
/// the merged quantile breakpoints.
pub fn w2_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim() != 1 {
        return Err(Error::WrongMethod { got: mu.dim() });
    }
    if nu.dim() != 1 {
        return Err(Error::WrongMethod { got: nu.dim() });
    }
    let mut a: Vec<(f64, f64)> = mu.atoms.iter().map(|z| z.x()).zip(mu.weights.iter().copied()).collect();
    let mut b: Vec<(f64, f64)> = nu.atoms.iter().map(|z| z.x()).zip(nu.weights.iter().copied()).collect();
    a.sort_by(|p, q| p.0.total_cmp(&q.0));
    b.sort_by(|p, q| p.0.total_cmp(&q.0));

    let mut cost = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    loop {
        let seg = ra.min(rb);
        let diff = a[i].0 - b[j].0;
        cost += seg * diff * diff;
        ra -= seg;
        rb -= seg;
        if ra <= WEIGHT_TOL {
            i += 1;
            if i == a.len() {
                break;
            }
            ra = a[i].1;
        }
        if rb <= WEIGHT_TOL {
            j += 1;
            if j == b.len() {
                break;
            }
            rb = b[j].1;
        }
    }
    Ok(cost.max(0.0).sqrt())
}

fn pair_cost(x: &Vect, y: &Vect) -> f64 {
    let d = x.sub(y);
    d.dot(&d)
}

/// Exact W2 for equal-count uniformly weighted measures in any dimension,
/// via a minimum-cost perfect matching solved by subset dynamic programming.
pub fn w2_exact_small(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    let n = mu.len();
    if n != nu.len() {
        return Err(Error::DimensionMismatch {
            context: "w2_exact_small atom counts",
            expected: n,
            got: nu.len(),
        });
    }
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            context: "w2_exact_small state dimension",
            expected: mu.dim(),
            got: nu.dim(),
        });
    }
    if n > W2_EXACT_LIMIT {
        return Err(Error::SizeLimit {
            context: "w2_exact_small",
            got: n,
            limit: W2_EXACT_LIMIT,
        });
    }
    require_uniform(mu, "w2_exact_small")?;
    require_uniform(nu, "w2_exact_small")?;

    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = pair_cost(&mu.atoms[i], &nu.atoms[j]);
        }
    }
    // dp[mask] = cheapest assignment of nu-atoms in `mask` to the first
    // popcount(mask) mu-atoms.
    let full = 1usize << n;
    let mut dp = vec![f64::INFINITY; full];
    dp[0] = 0.0;
    for mask in 0..full {
        if !dp[mask].is_finite() {
            continue;
        }
        let i = mask.count_ones() as usize;
        if i == n {
            continue;
        }
        for j in 0..n {
            if mask & (1 << j) == 0 {
                let next = mask | (1 << j);
                let c = dp[mask] + cost[i * n + j];
                if c < dp[next] {
                    dp[next] = c;
                }
            }
        }
    }
    Ok((dp[full - 1] / n as f64).max(0.0).sqrt())
}

/// Exhaustive-coupling oracle: minimizes over all N! pairings.
/// Kept as the independent cross-check for `w2_exact_small`.
pub fn w2_brute_force(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    let n = mu.len();
    if n != nu.len() || mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            context: "w2_brute_force atom counts",
            expected: n,
            got: nu.len(),
        });
    }
    if n > W2_ENUM_LIMIT {
        return Err(Error::SizeLimit {
            context: "w2_brute_force",
            got: n,
            limit: W2_ENUM_LIMIT,
        });
    }
    require_uniform(mu, "w2_brute_force")?;
    require_uniform(nu, "w2_brute_force")?;

    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute_for_min(&mut perm, 0, &mut |p| {
        let mut c = 0.0;
        for (i, &j) in p.iter().enumerate() {
            c += pair_cost(&mu.atoms[i], &nu.atoms[j]);
        }
        if c < best {
            best = c;
        }
    });
    Ok((best / n as f64).max(0.0).sqrt())
}

fn require_uniform(m: &EmpiricalMeasure, context: &str) -> Result<()> {
    let w = 1.0 / m.len() as f64;
    if m.weights.iter().any(|v| (v - w).abs() > WEIGHT_TOL) {
        return Err(Error::Config(format!("{context} requires uniform weights")));
    }
    Ok(())
}

fn permute_for_min(perm: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == perm.len() {
        visit(perm);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute_for_min(perm, k + 1, visit);
        perm.swap(k, i);
    }
}

/// Index-paired coupling bound: W2(mu, nu)^2 <= (1/N) sum |x_i - y_i|^2.
pub fn paired_coupling_bound(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    let n = mu.len().min(nu.len());
    let mut s = 0.0;
    for i in 0..n {
        s += pair_cost(&mu.atoms[i], &nu.atoms[i]);
    }
    (s / n as f64).sqrt()
}
