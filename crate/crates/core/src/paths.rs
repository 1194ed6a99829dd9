//! Time grids and Brownian driver paths with counter-based seeding.
//!
//! Every increment is a pure function of (seed, stream, replica, step,
//! driver), so regeneration is bit-identical and independent of generation
//! order or worker count. Refinement inserts Brownian-bridge midpoints drawn
//! from a level-tagged stream, leaving all coarse-knot values untouched.

use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_BASE: u64 = 0;
const STREAM_REFINE: u64 = 1_000;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless keyed generator: each output is a hash of (seed, key words).
#[derive(Clone, Copy, Debug)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    fn raw(&self, a: u64, b: u64, c: u64, d: u64) -> u64 {
        let mut z = splitmix(self.seed);
        z = splitmix(z ^ a);
        z = splitmix(z ^ b);
        z = splitmix(z ^ c);
        z = splitmix(z ^ d);
        z
    }

    /// Uniform draw in (0, 1], keyed.
    #[inline]
    pub fn uniform4(&self, a: u64, b: u64, c: u64, d: u64) -> f64 {
        1.0 - ((self.raw(a, b, c, d) >> 11) as f64) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal via Box-Muller, keyed by four words.
    #[inline]
    pub fn normal4(&self, a: u64, b: u64, c: u64, d: u64) -> f64 {
        let u1 = self.uniform4(a, b, c, 2 * d);
        let u2 = self.uniform4(a, b, c, 2 * d + 1);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Two-word convenience forms for test and probe code.
    pub fn index(&self, a: u64, b: u64) -> u64 {
        self.raw(a, b, 0, 0)
    }

    pub fn normal(&self, a: u64, b: u64) -> f64 {
        self.normal4(u64::MAX, a, b, 0)
    }

    pub fn uniform(&self, a: u64, b: u64) -> f64 {
        self.uniform4(u64::MAX - 1, a, b, 0)
    }
}

/// Uniform time grid on [s, T].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    s: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(s: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end > s) || n_steps == 0 {
            return Err(Error::Config(format!(
                "time grid needs t_end > s and n_steps > 0 (got s = {s}, t_end = {t_end}, n_steps = {n_steps})"
            )));
        }
        Ok(TimeGrid { s, t_end, n_steps })
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_knots(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.s) / self.n_steps as f64
    }

    pub fn knot(&self, i: usize) -> f64 {
        if i >= self.n_steps {
            self.t_end
        } else {
            self.s + self.dt() * i as f64
        }
    }

    pub fn halved(&self) -> TimeGrid {
        TimeGrid {
            s: self.s,
            t_end: self.t_end,
            n_steps: self.n_steps * 2,
        }
    }
}

/// Gaussian increments for all replicas, steps, and drivers.
#[derive(Clone, Debug)]
pub struct BrownianPaths {
    grid: TimeGrid,
    n_replicas: usize,
    dim_noise: usize,
    seed: u64,
    level: u32,
    inc: Vec<f64>, // [replica][step][driver]
}

/// Splits a coarse increment into the bridge halves dw/2 + xi and dw - w1.
/// The fix-up absorbs the subtraction rounding whenever w2's grid can express
/// it, which makes the pair sum bit-exact for the bulk of draws. When
/// |xi| >> |dw| no representable pair sums exactly to dw; the sum is then
/// within half an ulp of the bridge scale (|error| <= eps * max(|w1|, |w2|)),
/// which telescopes to O(1e-16) on unit paths.
fn split_increment(dw: f64, xi: f64) -> (f64, f64) {
    let w1 = 0.5 * dw + xi;
    let mut w2 = dw - w1;
    for _ in 0..2 {
        let s = w1 + w2;
        if s == dw {
            break;
        }
        w2 += dw - s;
    }
    (w1, w2)
}

impl BrownianPaths {
    /// Independent draws per (replica, step, driver) with variance dt.
    pub fn sample(grid: TimeGrid, n_replicas: usize, dim_noise: usize, seed: u64) -> Result<Self> {
        if n_replicas == 0 || dim_noise == 0 {
            return Err(Error::Config("need n_replicas >= 1 and dim_noise >= 1".into()));
        }
        let rng = CounterRng::new(seed);
        let sqrt_dt = grid.dt().sqrt();
        let n = grid.n_steps();
        let mut inc = vec![0.0; n_replicas * n * dim_noise];
        for r in 0..n_replicas {
            for i in 0..n {
                for k in 0..dim_noise {
                    inc[(r * n + i) * dim_noise + k] =
                        sqrt_dt * rng.normal4(STREAM_BASE, r as u64, i as u64, k as u64);
                }
            }
        }
        Ok(BrownianPaths {
            grid,
            n_replicas,
            dim_noise,
            seed,
            level: 0,
            inc,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_replicas(&self) -> usize {
        self.n_replicas
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    #[inline]
    pub fn increment(&self, replica: usize, step: usize, driver: usize) -> f64 {
        self.inc[(replica * self.grid.n_steps() + step) * self.dim_noise + driver]
    }

    /// All drivers of one replica at one step.
    #[inline]
    pub fn increments_at(&self, replica: usize, step: usize) -> &[f64] {
        let base = (replica * self.grid.n_steps() + step) * self.dim_noise;
        &self.inc[base..base + self.dim_noise]
    }

    /// Brownian-bridge midpoint refinement. Each coarse increment splits into
    /// dw/2 + xi and dw/2 - xi with xi ~ N(0, dt/4); pair sums reproduce the
    /// coarse increments bit-exactly except in the Gaussian tail |xi| >> |dw|,
    /// where they hold to one ulp of the bridge scale (see split_increment).
    pub fn refine_halve(&self) -> BrownianPaths {
        let rng = CounterRng::new(self.seed);
        let fine_grid = self.grid.halved();
        let n = self.grid.n_steps();
        let half_sd = (self.grid.dt() / 4.0).sqrt();
        let stream = STREAM_REFINE + (self.level as u64 + 1);
        let mut inc = vec![0.0; self.n_replicas * 2 * n * self.dim_noise];
        for r in 0..self.n_replicas {
            for i in 0..n {
                for k in 0..self.dim_noise {
                    let dw = self.increment(r, i, k);
                    let xi = half_sd * rng.normal4(stream, r as u64, i as u64, k as u64);
                    let (w1, w2) = split_increment(dw, xi);
                    inc[(r * 2 * n + 2 * i) * self.dim_noise + k] = w1;
                    inc[(r * 2 * n + 2 * i + 1) * self.dim_noise + k] = w2;
                }
            }
        }
        BrownianPaths {
            grid: fine_grid,
            n_replicas: self.n_replicas,
            dim_noise: self.dim_noise,
            seed: self.seed,
            level: self.level + 1,
            inc,
        }
    }

    /// Same realization with replica rows reordered: replica r of the result
    /// carries the increments of replica perm[r]. Exchangeability checks
    /// permute indices and path addressing together.
    pub fn permuted_replicas(&self, perm: &[usize]) -> BrownianPaths {
        assert_eq!(perm.len(), self.n_replicas);
        let n = self.grid.n_steps();
        let mut inc = vec![0.0; self.inc.len()];
        for (r, &src) in perm.iter().enumerate() {
            let a = r * n * self.dim_noise;
            let b = src * n * self.dim_noise;
            inc[a..a + n * self.dim_noise].copy_from_slice(&self.inc[b..b + n * self.dim_noise]);
        }
        BrownianPaths { inc, ..self.clone() }
    }

    /// Cumulative path values W_{t_i} (starting at 0) for one replica/driver.
    pub fn path_values(&self, replica: usize, driver: usize) -> Vec<f64> {
        let n = self.grid.n_steps();
        let mut w = Vec::with_capacity(n + 1);
        w.push(0.0);
        let mut acc = 0.0;
        for i in 0..n {
            acc += self.increment(replica, i, driver);
            w.push(acc);
        }
        w
    }

    /// Sample-moment sanity gate over all increments.
    pub fn moment_sanity(&self) -> MomentSanity {
        let n = self.inc.len() as f64;
        let mean = self.inc.iter().sum::<f64>() / n;
        let var = self.inc.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let dt = self.grid.dt();
        let mean_bound = 5.0 * (dt / n).sqrt();
        let var_tol = 5.0 * (2.0 / n).sqrt();
        MomentSanity {
            mean,
            var,
            dt,
            pass: mean.abs() <= mean_bound && (var / dt - 1.0).abs() <= var_tol,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MomentSanity {
    pub mean: f64,
    pub var: f64,
    pub dt: f64,
    pub pass: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = BrownianPaths::sample(grid(64), 5, 2, 99).unwrap();
        let b = BrownianPaths::sample(grid(64), 5, 2, 99).unwrap();
        assert_eq!(a.inc, b.inc);
    }

    #[test]
    fn single_draw_shape() {
        let p = BrownianPaths::sample(grid(1), 1, 1, 7).unwrap();
        assert_eq!(p.inc.len(), 1);
        assert!(p.increment(0, 0, 0).is_finite());
    }

    #[test]
    fn different_seeds_decorrelated() {
        let n = 200;
        let a = BrownianPaths::sample(grid(n), 50, 1, 1).unwrap();
        let b = BrownianPaths::sample(grid(n), 50, 1, 2).unwrap();
        let count = a.inc.len() as f64;
        let dt = a.grid.dt();
        let corr: f64 = a
            .inc
            .iter()
            .zip(&b.inc)
            .map(|(x, y)| x * y)
            .sum::<f64>()
            / (count * dt);
        assert!(corr.abs() <= 4.0 / count.sqrt(), "corr = {corr}");
    }

    #[test]
    fn refine_preserves_pair_sums() {
        let p = BrownianPaths::sample(grid(128), 20, 2, 5).unwrap();
        let f = p.refine_halve();
        let mut exact = 0usize;
        let mut total = 0usize;
        for r in 0..20 {
            for i in 0..128 {
                for k in 0..2 {
                    let coarse = p.increment(r, i, k);
                    let w1 = f.increment(r, 2 * i, k);
                    let w2 = f.increment(r, 2 * i + 1, k);
                    let sum = w1 + w2;
                    let ulp = f64::EPSILON * w1.abs().max(w2.abs());
                    assert!(
                        (sum - coarse).abs() <= ulp,
                        "pair sum off by more than one ulp at (r={r}, i={i}, k={k})"
                    );
                    total += 1;
                    if sum == coarse {
                        exact += 1;
                    }
                }
            }
        }
        // The fix-up makes the bulk of splits bit-exact; only tail draws
        // with |xi| well above |dw| are limited to the ulp bound.
        assert!(exact * 10 >= total * 7, "exact fraction too low: {exact}/{total}");
    }

    #[test]
    fn double_refine_preserves_endpoint() {
        let p = BrownianPaths::sample(grid(2), 3, 1, 11).unwrap();
        let ff = p.refine_halve().refine_halve();
        assert_eq!(ff.grid.n_steps(), 8);
        for r in 0..3 {
            let w_end: f64 = *p.path_values(r, 0).last().unwrap();
            let w_end_fine: f64 = *ff.path_values(r, 0).last().unwrap();
            // Endpoints telescope through two exact pairwise splits.
            assert!((w_end - w_end_fine).abs() < 1e-15);
        }
    }

    #[test]
    fn fine_increment_variance() {
        let p = BrownianPaths::sample(grid(100), 200, 1, 3).unwrap();
        let f = p.refine_halve();
        let n = f.inc.len() as f64;
        assert!(n >= 1e4);
        let var = f.inc.iter().map(|v| v * v).sum::<f64>() / n;
        let target = p.grid.dt() / 2.0;
        let tol = 5.0 * (2.0 / n).sqrt();
        assert!(
            (var / target - 1.0).abs() <= tol,
            "fine variance {var}, target {target}"
        );
    }

    #[test]
    fn moment_sanity_gate_passes() {
        let p = BrownianPaths::sample(grid(500), 100, 1, 17).unwrap();
        let s = p.moment_sanity();
        assert!(s.pass, "mean {} var {} dt {}", s.mean, s.var, s.dt);
    }

    #[test]
    fn split_increment_sums_back_within_one_ulp() {
        let rng = CounterRng::new(4242);
        for t in 0..200_000u64 {
            let dw = rng.normal(t, 0) * 0.031;
            let xi = rng.normal(t, 1) * 0.016;
            let (w1, w2) = split_increment(dw, xi);
            let err = (w1 + w2 - dw).abs();
            assert!(err <= f64::EPSILON * w1.abs().max(w2.abs()), "dw={dw} xi={xi}");
            // The halves must carry the bridge draw, never a degenerate split.
            if xi != 0.0 {
                assert_ne!(w1, w2);
            }
        }
        // Extreme scale mismatch stays within the documented bound.
        let (w1, w2) = split_increment(1e-20, 0.01);
        assert!((w1 + w2 - 1e-20).abs() <= f64::EPSILON * 0.01);
    }

    #[test]
    fn counter_addressing_is_pure() {
        // Any stored increment is reproducible standalone from its key,
        // independent of generation order.
        let g = grid(50);
        let p = BrownianPaths::sample(g, 7, 3, 345).unwrap();
        let rng = CounterRng::new(345);
        let sqrt_dt = g.dt().sqrt();
        for (r, i, k) in [(0usize, 0usize, 0usize), (6, 49, 2), (3, 17, 1)] {
            let direct = sqrt_dt * rng.normal4(STREAM_BASE, r as u64, i as u64, k as u64);
            assert_eq!(p.increment(r, i, k), direct);
        }
    }

    #[test]
    fn knots_hit_endpoint() {
        let g = TimeGrid::new(0.25, 1.75, 7).unwrap();
        assert_eq!(g.knot(0), 0.25);
        assert_eq!(g.knot(7), 1.75);
        assert!(g.knot(3) < g.knot(4));
    }
}
