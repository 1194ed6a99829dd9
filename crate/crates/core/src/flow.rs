//! Forward simulation of the mean-field flow map, its Jacobian, and the
//! inverse-Jacobian process along every replica.
//!
//! Each grid point carries its own replica ensemble: the law of the flow
//! started from a deterministic point depends on that point, so clouds are
//! never pooled across grid points. Within a step every replica update reads
//! a frozen snapshot of the step-start states and law, which makes the update
//! order-free; replica reductions run in fixed index order.
//!
//! Per replica the engine advances three coupled objects with one
//! Euler-Maruyama step each:
//!
//! ```text
//! X   <- X + b(X, law) dt + sum_k sigma_k(X, law) dW^k
//! J   <- J + G_0 dt + sum_k G_k dW^k,          G_k = dx V_k J + avg_j dmu V_k(X, law, X_j) J_j
//! V   <- V + (-V G_0 V + sum_k V G_k V G_k V) dt - sum_k V G_k V dW^k
//! ```
//!
//! The V drift includes the quadratic term produced by writing the inverse of
//! the Jacobian equation in Ito form; V multiplied by J stays within
//! O(dt^{1/2}) of the identity until V is frozen by its monitor. The
//! tilde-expectation is the replica average including the replica itself
//! (O(1/M) self-interaction bias, documented).

use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::grid::SpatialGrid;
use crate::linalg::{Mat, Vect};
use crate::measure::EmpiricalMeasure;
use crate::parallel;
use crate::paths::{BrownianPaths, TimeGrid};

/// Snapshot context for one step at one grid point: everything a replica
/// update may read. Immutable during the step.
pub struct StepContext<'a> {
    pub cset: &'a CoefficientSet,
    pub dt: f64,
    pub measure: MeasureCtx<'a>,
}

pub enum MeasureCtx<'a> {
    /// Moment-form families: the law enters through the moment vector `m`,
    /// and the tilde-average through the premixed rows
    /// rows[q] = (1/M) sum_j grad h_q(X_j)^T J_j.
    Moment { m: &'a [f64], rows: &'a [Vect] },
    /// General families: the full cloud plus the step-start Jacobians.
    General {
        mu: &'a EmpiricalMeasure,
        jacs: &'a [Mat],
    },
}

impl<'a> StepContext<'a> {
    #[inline]
    pub fn value(&self, k: usize, x: &Vect) -> Vect {
        match &self.measure {
            MeasureCtx::Moment { m, .. } => self.cset.value_m(k, x, m),
            MeasureCtx::General { mu, .. } => self
                .cset
                .value(k, x, mu)
                .expect("general coefficient evaluation"),
        }
    }

    #[inline]
    pub fn dx(&self, k: usize, x: &Vect) -> Mat {
        match &self.measure {
            MeasureCtx::Moment { m, .. } => self.cset.dx_m(k, x, m),
            MeasureCtx::General { mu, .. } => {
                self.cset.dx(k, x, mu).expect("general coefficient evaluation")
            }
        }
    }

    /// Tilde-expectation term avg_j dmu V_k(x, law, X_j) J_j.
    #[inline]
    pub fn mean_field_term(&self, k: usize, x: &Vect) -> Mat {
        let d = self.cset.dim_state();
        match &self.measure {
            MeasureCtx::Moment { m, rows } => {
                let mut out = Mat::zeros(d);
                for (q, row) in rows.iter().enumerate() {
                    let col = self.cset.dm_partial(k, x, m, q);
                    out = out.add(&Mat::outer(&col, row));
                }
                out
            }
            MeasureCtx::General { mu, jacs } => {
                let mut out = Mat::zeros(d);
                let w = 1.0 / jacs.len() as f64;
                for (z, j) in mu.atoms().iter().zip(jacs.iter()) {
                    let dmu = self
                        .cset
                        .dmu(k, x, mu, z)
                        .expect("general coefficient evaluation");
                    out.axpy(w, &dmu.matmul(j));
                }
                out
            }
        }
    }

    /// Full Jacobian-equation coefficient G_k = dx V_k J + mean-field term.
    #[inline]
    pub fn coeff_matrix(&self, k: usize, x: &Vect, j: &Mat) -> Mat {
        self.dx(k, x).matmul(j).add(&self.mean_field_term(k, x))
    }
}

/// One Euler-Maruyama state update against the frozen snapshot.
#[inline]
pub fn step_state(ctx: &StepContext, x: &Vect, dw: &[f64]) -> Vect {
    let mut out = *x;
    out.axpy(ctx.dt, &ctx.value(0, x));
    for k in 1..=ctx.cset.dim_noise() {
        out.axpy(dw[k - 1], &ctx.value(k, x));
    }
    out
}

/// One Euler-Maruyama update of the variational (Jacobian) equation.
#[inline]
pub fn step_jacobian(ctx: &StepContext, x: &Vect, j: &Mat, dw: &[f64]) -> Mat {
    let mut out = *j;
    out.axpy(ctx.dt, &ctx.coeff_matrix(0, x, j));
    for k in 1..=ctx.cset.dim_noise() {
        out.axpy(dw[k - 1], &ctx.coeff_matrix(k, x, j));
    }
    out
}

/// One Euler-Maruyama update of the inverse-Jacobian equation, with the
/// Ito form of d(J^{-1}) supplying the quadratic drift correction.
#[inline]
pub fn step_inverse_jacobian(ctx: &StepContext, x: &Vect, j: &Mat, v: &Mat, dw: &[f64]) -> Mat {
    let g0 = ctx.coeff_matrix(0, x, j);
    let mut out = *v;
    out.axpy(-ctx.dt, &v.matmul(&g0.matmul(v)));
    for k in 1..=ctx.cset.dim_noise() {
        let gk = ctx.coeff_matrix(k, x, j);
        let gkv = gk.matmul(v);
        let p = v.matmul(&gkv); // V G_k V
        out.axpy(ctx.dt, &p.matmul(&gkv));
        out.axpy(-dw[k - 1], &p);
    }
    out
}

/// Engine settings for one simulate run.
#[derive(Clone, Debug)]
pub struct SimSettings {
    pub n_replicas: usize,
    /// Replica whose path is the stored "physical" realization.
    pub physical_replica: usize,
    /// Freeze threshold for |V|_F; beyond it the replica's V is frozen and
    /// its explosion knot recorded.
    pub v_cap: f64,
    /// Grid index whose per-replica series should be recorded, if any.
    pub record_replicas_at: Option<usize>,
    /// Knots to record per-replica (None = every knot).
    pub record_knots: Option<Vec<usize>>,
    pub n_threads: usize,
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            n_replicas: 2000,
            physical_replica: 0,
            v_cap: 1e6,
            record_replicas_at: None,
            record_knots: None,
            n_threads: 0,
        }
    }
}

/// Per-replica recordings at one grid point (enabled on request).
#[derive(Clone, Debug, Default)]
pub struct ReplicaSeries {
    /// The knots the entries below correspond to.
    pub knots: Vec<usize>,
    /// states[i][replica] at knot knots[i]
    pub states: Vec<Vec<Vect>>,
    /// jacobians[i][replica] at knot knots[i]
    pub jacobians: Vec<Vec<Mat>>,
    /// inverse_jacobians[i][replica] at knot knots[i]
    pub inverse_jacobians: Vec<Vec<Mat>>,
}

impl ReplicaSeries {
    /// Recording index of a knot, if it was recorded.
    pub fn index_of(&self, knot: usize) -> Option<usize> {
        self.knots.binary_search(&knot).ok()
    }
}

/// Time-indexed fields on the spatial grid for one fixed physical path.
#[derive(Clone, Debug)]
pub struct FlowField {
    grid: SpatialGrid,
    tgrid: TimeGrid,
    dim: usize,
    dim_noise: usize,
    n_stats: usize,
    // all indexed [knot * n_points + grid_point]
    phi: Vec<Vect>,
    jac: Vec<Mat>,
    vinv: Vec<Mat>,
    det_jac: Vec<f64>,
    mean_jac: Vec<Mat>,
    se_jac: Vec<Mat>,
    max_vj_dev: Vec<f64>,
    moments: Vec<f64>,  // [knot][grid][stat]
    mf_rows: Vec<Vect>, // [knot][grid][stat]
    v_frozen_knot: Vec<Option<usize>>, // per grid point, physical replica
}

impl FlowField {
    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn tgrid(&self) -> &TimeGrid {
        &self.tgrid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    pub fn n_stats(&self) -> usize {
        self.n_stats
    }

    pub fn n_knots(&self) -> usize {
        self.tgrid.n_knots()
    }

    #[inline]
    fn at(&self, knot: usize, g: usize) -> usize {
        knot * self.grid.n_points() + g
    }

    pub fn phi(&self, knot: usize, g: usize) -> &Vect {
        &self.phi[self.at(knot, g)]
    }

    pub fn jac(&self, knot: usize, g: usize) -> &Mat {
        &self.jac[self.at(knot, g)]
    }

    pub fn vinv(&self, knot: usize, g: usize) -> &Mat {
        &self.vinv[self.at(knot, g)]
    }

    pub fn det_jac(&self, knot: usize, g: usize) -> f64 {
        self.det_jac[self.at(knot, g)]
    }

    pub fn mean_jac(&self, knot: usize, g: usize) -> &Mat {
        &self.mean_jac[self.at(knot, g)]
    }

    /// Standard error (over replicas) of each Jacobian entry.
    pub fn se_jac(&self, knot: usize, g: usize) -> &Mat {
        &self.se_jac[self.at(knot, g)]
    }

    pub fn max_vj_dev(&self, knot: usize, g: usize) -> f64 {
        self.max_vj_dev[self.at(knot, g)]
    }

    pub fn moments(&self, knot: usize, g: usize) -> &[f64] {
        let base = self.at(knot, g) * self.n_stats;
        &self.moments[base..base + self.n_stats]
    }

    /// Premixed tilde-average row for statistic q.
    pub fn mf_row(&self, knot: usize, g: usize, q: usize) -> &Vect {
        &self.mf_rows[self.at(knot, g) * self.n_stats + q]
    }

    pub fn v_frozen_knot(&self, g: usize) -> Option<usize> {
        self.v_frozen_knot[g]
    }

    /// Physical-replica Jacobian series at one grid point.
    pub fn jac_series(&self, g: usize) -> Vec<Mat> {
        (0..self.n_knots()).map(|i| *self.jac(i, g)).collect()
    }

    /// Synthetic-field constructor: builds a field from closures for the map
    /// and its Jacobian, with moment fields zeroed. Used by detector and
    /// interpolation tests that need a field with known analytic shape.
    pub fn from_closures(
        grid: SpatialGrid,
        tgrid: TimeGrid,
        n_stats: usize,
        dim_noise: usize,
        phi_fn: impl Fn(usize, &Vect) -> Vect,
        jac_fn: impl Fn(usize, &Vect) -> Mat,
    ) -> FlowField {
        let dim = grid.dim();
        let n_points = grid.n_points();
        let n_knots = tgrid.n_knots();
        let mut field = FlowField {
            grid,
            tgrid,
            dim,
            dim_noise,
            n_stats,
            phi: Vec::with_capacity(n_knots * n_points),
            jac: Vec::with_capacity(n_knots * n_points),
            vinv: Vec::with_capacity(n_knots * n_points),
            det_jac: Vec::with_capacity(n_knots * n_points),
            mean_jac: Vec::with_capacity(n_knots * n_points),
            se_jac: Vec::with_capacity(n_knots * n_points),
            max_vj_dev: vec![0.0; n_knots * n_points],
            moments: vec![0.0; n_knots * n_points * n_stats],
            mf_rows: vec![Vect::zeros(dim); n_knots * n_points * n_stats],
            v_frozen_knot: vec![None; n_points],
        };
        for knot in 0..n_knots {
            for g in 0..n_points {
                let x = field.grid.point(g);
                let p = phi_fn(knot, &x);
                let j = jac_fn(knot, &x);
                field.phi.push(p);
                field.jac.push(j);
                field.vinv.push(j.inverse().unwrap_or_else(|| Mat::identity(dim)));
                field.det_jac.push(j.det());
                field.mean_jac.push(j);
                field.se_jac.push(Mat::zeros(dim));
            }
        }
        field
    }
}

/// Result of one simulate run.
pub struct SimOutput {
    pub field: FlowField,
    pub replica_series: Option<ReplicaSeries>,
    pub diverged_replicas: usize,
    pub v_frozen_replicas: usize,
}

struct GridSeries {
    phi: Vec<Vect>,
    jac: Vec<Mat>,
    vinv: Vec<Mat>,
    det_jac: Vec<f64>,
    mean_jac: Vec<Mat>,
    se_jac: Vec<Mat>,
    max_vj_dev: Vec<f64>,
    moments: Vec<f64>,
    mf_rows: Vec<Vect>,
    v_frozen_knot: Option<usize>,
    diverged: usize,
    v_frozen: usize,
    recordings: Option<ReplicaSeries>,
}

/// Runs the forward engine over all grid points and knots.
///
/// Deterministic given (paths.seed, grid, settings): grid points are
/// independent tasks and all replica reductions run in fixed index order.
pub fn simulate(
    cset: &CoefficientSet,
    grid: &SpatialGrid,
    paths: &BrownianPaths,
    settings: &SimSettings,
) -> Result<SimOutput> {
    if grid.dim() != cset.dim_state() {
        return Err(Error::DimensionMismatch {
            context: "grid dimension vs coefficient state dimension",
            expected: cset.dim_state(),
            got: grid.dim(),
        });
    }
    if paths.dim_noise() != cset.dim_noise() {
        return Err(Error::DimensionMismatch {
            context: "driver count vs coefficient noise dimension",
            expected: cset.dim_noise(),
            got: paths.dim_noise(),
        });
    }
    if settings.n_replicas > paths.n_replicas() {
        return Err(Error::Config(format!(
            "settings ask for {} replicas but paths carry {}",
            settings.n_replicas,
            paths.n_replicas()
        )));
    }
    if settings.physical_replica >= settings.n_replicas {
        return Err(Error::Config("physical replica index out of range".into()));
    }

    let n_points = grid.n_points();
    let record_mask: Vec<bool> = match &settings.record_knots {
        None => vec![true; paths.grid().n_knots()],
        Some(list) => {
            let mut mask = vec![false; paths.grid().n_knots()];
            for &k in list {
                if k < mask.len() {
                    mask[k] = true;
                }
            }
            mask
        }
    };
    let results: Vec<Result<GridSeries>> = parallel::run_indexed(n_points, settings.n_threads, |g| {
        let record = settings.record_replicas_at == Some(g);
        run_ensemble(cset, &grid.point(g), paths, settings, record, &record_mask, g)
    });

    let n_knots = paths.grid().n_knots();
    let n_stats = cset.n_stats();
    let mut field = FlowField {
        grid: grid.clone(),
        tgrid: *paths.grid(),
        dim: cset.dim_state(),
        dim_noise: cset.dim_noise(),
        n_stats,
        phi: Vec::with_capacity(n_knots * n_points),
        jac: Vec::with_capacity(n_knots * n_points),
        vinv: Vec::with_capacity(n_knots * n_points),
        det_jac: Vec::with_capacity(n_knots * n_points),
        mean_jac: Vec::with_capacity(n_knots * n_points),
        se_jac: Vec::with_capacity(n_knots * n_points),
        max_vj_dev: Vec::with_capacity(n_knots * n_points),
        moments: Vec::with_capacity(n_knots * n_points * n_stats),
        mf_rows: Vec::with_capacity(n_knots * n_points * n_stats),
        v_frozen_knot: Vec::with_capacity(n_points),
    };

    let mut series_list = Vec::with_capacity(n_points);
    let mut replica_series = None;
    let mut diverged_total = 0;
    let mut v_frozen_total = 0;
    for (g, r) in results.into_iter().enumerate() {
        let mut s = r?;
        diverged_total += s.diverged;
        v_frozen_total += s.v_frozen;
        field.v_frozen_knot.push(s.v_frozen_knot);
        if settings.record_replicas_at == Some(g) {
            replica_series = s.recordings.take();
        }
        series_list.push(s);
    }
    for knot in 0..n_knots {
        for s in &series_list {
            field.phi.push(s.phi[knot]);
            field.jac.push(s.jac[knot]);
            field.vinv.push(s.vinv[knot]);
            field.det_jac.push(s.det_jac[knot]);
            field.mean_jac.push(s.mean_jac[knot]);
            field.se_jac.push(s.se_jac[knot]);
            field.max_vj_dev.push(s.max_vj_dev[knot]);
            field
                .moments
                .extend_from_slice(&s.moments[knot * n_stats..(knot + 1) * n_stats]);
            field
                .mf_rows
                .extend_from_slice(&s.mf_rows[knot * n_stats..(knot + 1) * n_stats]);
        }
    }

    Ok(SimOutput {
        field,
        replica_series,
        diverged_replicas: diverged_total,
        v_frozen_replicas: v_frozen_total,
    })
}

fn run_ensemble(
    cset: &CoefficientSet,
    x0: &Vect,
    paths: &BrownianPaths,
    settings: &SimSettings,
    record: bool,
    record_mask: &[bool],
    grid_point: usize,
) -> Result<GridSeries> {
    let m_reps = settings.n_replicas;
    let phys = settings.physical_replica;
    let n_steps = paths.grid().n_steps();
    let n_knots = n_steps + 1;
    let d = cset.dim_state();
    let n_stats = cset.n_stats();
    let dt = paths.grid().dt();

    let mut states = vec![*x0; m_reps];
    let mut jacs = vec![Mat::identity(d); m_reps];
    let mut vinvs = vec![Mat::identity(d); m_reps];
    let mut alive = vec![true; m_reps];
    let mut v_alive = vec![true; m_reps];
    let mut new_states = states.clone();
    let mut new_jacs = jacs.clone();
    let mut new_vinvs = vinvs.clone();

    let mut out = GridSeries {
        phi: Vec::with_capacity(n_knots),
        jac: Vec::with_capacity(n_knots),
        vinv: Vec::with_capacity(n_knots),
        det_jac: Vec::with_capacity(n_knots),
        mean_jac: Vec::with_capacity(n_knots),
        se_jac: Vec::with_capacity(n_knots),
        max_vj_dev: Vec::with_capacity(n_knots),
        moments: Vec::with_capacity(n_knots * n_stats),
        mf_rows: Vec::with_capacity(n_knots * n_stats),
        v_frozen_knot: None,
        diverged: 0,
        v_frozen: 0,
        recordings: record.then(ReplicaSeries::default),
    };

    let moment_form = cset.is_moment_form();
    let ident = Mat::identity(d);

    for knot in 0..n_knots {
        // Frozen snapshot statistics, fixed replica order.
        let mut m = vec![0.0; n_stats];
        let mut rows = vec![Vect::zeros(d); n_stats];
        let mut mu_general: Option<EmpiricalMeasure> = None;
        if moment_form {
            let w = 1.0 / m_reps as f64;
            for (q, stat) in cset.stats().iter().enumerate() {
                let mut acc = 0.0;
                let mut row = Vect::zeros(d);
                for r in 0..m_reps {
                    acc += (stat.h)(&states[r]);
                    row = row.add(&jacs[r].vecmat(&(stat.dh)(&states[r])));
                }
                m[q] = acc * w;
                rows[q] = row.scale(w);
            }
        } else {
            mu_general = Some(EmpiricalMeasure::uniform(states.clone())?);
        }

        // Replica-averaged Jacobian statistics, fixed order.
        let mut mean_j = Mat::zeros(d);
        let mut m2_j = Mat::zeros(d);
        let wrep = 1.0 / m_reps as f64;
        for r in 0..m_reps {
            mean_j.axpy(wrep, &jacs[r]);
        }
        for r in 0..m_reps {
            let dev = jacs[r].sub(&mean_j);
            for i in 0..d {
                for jx in 0..d {
                    let v = dev.get(i, jx);
                    m2_j.set(i, jx, m2_j.get(i, jx) + wrep * v * v);
                }
            }
        }
        let mut se = Mat::zeros(d);
        for i in 0..d {
            for jx in 0..d {
                se.set(i, jx, (m2_j.get(i, jx) / m_reps as f64).sqrt());
            }
        }
        let mut max_dev: f64 = 0.0;
        for r in 0..m_reps {
            if v_alive[r] {
                max_dev = max_dev.max(vinvs[r].matmul(&jacs[r]).sub(&ident).frobenius());
            }
        }

        out.phi.push(states[phys]);
        out.jac.push(jacs[phys]);
        out.vinv.push(vinvs[phys]);
        out.det_jac.push(jacs[phys].det());
        out.mean_jac.push(mean_j);
        out.se_jac.push(se);
        out.max_vj_dev.push(max_dev);
        out.moments.extend_from_slice(&m);
        out.mf_rows.extend_from_slice(&rows);
        if record && record_mask[knot] {
            if let Some(rec) = out.recordings.as_mut() {
                rec.knots.push(knot);
                rec.states.push(states.clone());
                rec.jacobians.push(jacs.clone());
                rec.inverse_jacobians.push(vinvs.clone());
            }
        }

        if knot == n_steps {
            break;
        }

        let ctx = StepContext {
            cset,
            dt,
            measure: match &mu_general {
                None => MeasureCtx::Moment { m: &m, rows: &rows },
                Some(mu) => MeasureCtx::General { mu, jacs: &jacs },
            },
        };

        for r in 0..m_reps {
            if !alive[r] {
                new_states[r] = states[r];
                new_jacs[r] = jacs[r];
                new_vinvs[r] = vinvs[r];
                continue;
            }
            let dw = paths.increments_at(r, knot);
            let x = &states[r];
            let nx = step_state(&ctx, x, dw);
            let nj = step_jacobian(&ctx, x, &jacs[r], dw);
            if !nx.is_finite() || !nj.is_finite() {
                alive[r] = false;
                out.diverged += 1;
                new_states[r] = states[r];
                new_jacs[r] = jacs[r];
                new_vinvs[r] = vinvs[r];
                continue;
            }
            new_states[r] = nx;
            new_jacs[r] = nj;
            if v_alive[r] {
                let nv = step_inverse_jacobian(&ctx, x, &jacs[r], &vinvs[r], dw);
                if !nv.is_finite() || nv.frobenius() > settings.v_cap {
                    // Explosion realized: freeze at the last finite value.
                    v_alive[r] = false;
                    out.v_frozen += 1;
                    if r == phys && out.v_frozen_knot.is_none() {
                        out.v_frozen_knot = Some(knot + 1);
                    }
                    new_vinvs[r] = vinvs[r];
                } else {
                    new_vinvs[r] = nv;
                }
            } else {
                new_vinvs[r] = vinvs[r];
            }
        }
        std::mem::swap(&mut states, &mut new_states);
        std::mem::swap(&mut jacs, &mut new_jacs);
        std::mem::swap(&mut vinvs, &mut new_vinvs);

        if out.diverged * 100 > m_reps {
            return Err(Error::TooManyDiverged {
                grid_point,
                diverged: out.diverged,
                total: m_reps,
            });
        }
    }

    Ok(out)
}

/// Heun (midpoint) integration of the raw Stratonovich form, state only.
/// Available for converted families, which retain the raw drift. Serves as
/// the second route of the Stratonovich-consistency check.
pub fn heun_strat_states(
    cset: &CoefficientSet,
    x0: &Vect,
    paths: &BrownianPaths,
    n_replicas: usize,
) -> Result<Vec<Vec<Vect>>> {
    if !cset.is_moment_form() {
        return Err(Error::Capability(
            "heun route needs a moment-form family".into(),
        ));
    }
    let n_steps = paths.grid().n_steps();
    let dt = paths.grid().dt();
    let m_reps = n_replicas.min(paths.n_replicas());

    let raw_v0 = |x: &Vect, m: &[f64]| -> Vect {
        match cset.raw_v0_m(x, m) {
            Some(v) => v,
            // Ito-declared families: the Stratonovich drift is derived.
            None => cset.strat_drift_m(x, m),
        }
    };
    let moments = |states: &[Vect]| -> Vec<f64> {
        let w = 1.0 / states.len() as f64;
        cset.stats()
            .iter()
            .map(|s| states.iter().map(|x| (s.h)(x)).sum::<f64>() * w)
            .collect()
    };

    let mut states = vec![*x0; m_reps];
    let mut series = Vec::with_capacity(n_steps + 1);
    series.push(states.clone());
    let mut predictor = states.clone();
    for step in 0..n_steps {
        let m = moments(&states);
        for r in 0..m_reps {
            let dw = paths.increments_at(r, step);
            let x = &states[r];
            let mut p = *x;
            p.axpy(dt, &raw_v0(x, &m));
            for k in 1..=cset.dim_noise() {
                p.axpy(dw[k - 1], &cset.value_m(k, x, &m));
            }
            predictor[r] = p;
        }
        let m_pred = moments(&predictor);
        for r in 0..m_reps {
            let dw = paths.increments_at(r, step);
            let x = states[r];
            let p = predictor[r];
            let mut nx = x;
            nx.axpy(0.5 * dt, &raw_v0(&x, &m).add(&raw_v0(&p, &m_pred)));
            for k in 1..=cset.dim_noise() {
                nx.axpy(
                    0.5 * dw[k - 1],
                    &cset.value_m(k, &x, &m).add(&cset.value_m(k, &p, &m_pred)),
                );
            }
            states[r] = nx;
        }
        series.push(states.clone());
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{self, F46, LinearRow, MomentLinear};
    use crate::paths::CounterRng;

    fn settings(m: usize) -> SimSettings {
        SimSettings {
            n_replicas: m,
            n_threads: 1,
            ..SimSettings::default()
        }
    }

    fn single_point_sim(
        cset: &CoefficientSet,
        x0: f64,
        n_steps: usize,
        m: usize,
        seed: u64,
    ) -> SimOutput {
        let grid = SpatialGrid::single_point(&Vect::scalar(x0));
        let tg = TimeGrid::new(0.0, 1.0, n_steps).unwrap();
        let paths = BrownianPaths::sample(tg, m, cset.dim_noise(), seed).unwrap();
        let mut s = settings(m);
        s.record_replicas_at = Some(0);
        simulate(cset, &grid, &paths, &s).unwrap()
    }

    #[test]
    fn zero_coefficients_identity_in_state_jacobian_and_inverse() {
        let cset = families::zero(2, 2);
        let grid = SpatialGrid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![5, 5]).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 25).unwrap();
        let paths = BrownianPaths::sample(tg, 16, 2, 7).unwrap();
        let out = simulate(&cset, &grid, &paths, &settings(16)).unwrap();
        let ident = Mat::identity(2);
        for knot in 0..out.field.n_knots() {
            for g in 0..grid.n_points() {
                assert_eq!(*out.field.phi(knot, g), grid.point(g));
                assert_eq!(*out.field.jac(knot, g), ident);
                assert_eq!(*out.field.vinv(knot, g), ident);
                assert_eq!(out.field.max_vj_dev(knot, g), 0.0);
            }
        }
        assert_eq!(out.diverged_replicas, 0);
    }

    #[test]
    fn mean_field_linear_decay_reaches_inverse_e() {
        // drift = -mean, no diffusion: the deterministic mean-field ODE
        // m' = -m, so X_1 = e^{-1} up to the Euler error.
        let cset = families::moment_linear(&MomentLinear {
            drift_x: 0.0,
            drift_mean: -1.0,
            drift_const: 0.0,
            rows: vec![LinearRow { x: 0.0, mean: 0.0, cons: 0.0 }],
        })
        .unwrap();
        let out = single_point_sim(&cset, 1.0, 1000, 64, 5);
        let last = out.field.n_knots() - 1;
        let x_final = out.field.phi(last, 0).x();
        let dt = out.field.tgrid().dt();
        assert!(
            (x_final - (-1.0f64).exp()).abs() <= 2.0 * dt,
            "X(1) = {x_final}"
        );
    }

    #[test]
    fn measure_free_linear_jacobian_matches_geometric_closed_form() {
        let (a, b) = (0.1, 0.5);
        let cset = families::moment_linear(&MomentLinear {
            drift_x: a,
            drift_mean: 0.0,
            drift_const: 0.0,
            rows: vec![LinearRow { x: b, mean: 0.0, cons: 0.0 }],
        })
        .unwrap();
        let n_steps = 1000;
        let m = 50;
        let grid = SpatialGrid::single_point(&Vect::scalar(1.0));
        let tg = TimeGrid::new(0.0, 1.0, n_steps).unwrap();
        let paths = BrownianPaths::sample(tg, m, 1, 42).unwrap();
        let mut s = settings(m);
        s.record_replicas_at = Some(0);
        let out = simulate(&cset, &grid, &paths, &s).unwrap();
        let rec = out.replica_series.unwrap();
        let t_end = 1.0;
        let mut worst_j = 0.0f64;
        let mut worst_vj = 0.0f64;
        for r in 0..m {
            let w = paths.path_values(r, 0);
            let exact = ((a - 0.5 * b * b) * t_end + b * w[n_steps]).exp();
            let j = rec.jacobians[n_steps][r].get(0, 0);
            worst_j = worst_j.max((j - exact).abs() / exact.abs());
            // V should track 1/J along the whole path.
            let dev = out.field.max_vj_dev(n_steps, 0);
            worst_vj = worst_vj.max(dev);
        }
        assert!(worst_j <= 0.05, "max relative Jacobian error {worst_j}");
        assert!(worst_vj <= 0.05, "max |VJ - I| {worst_vj}");
    }

    #[test]
    fn identity_interaction_keeps_unit_jacobian_and_unit_mean() {
        let cset = families::example46(F46::Identity);
        let out = single_point_sim(&cset, 1.0, 500, 256, 11);
        for knot in 0..out.field.n_knots() {
            let j = out.field.jac(knot, 0).get(0, 0);
            assert!((j - 1.0).abs() <= 1e-12, "knot {knot}: J = {j}");
            let mean = out.field.mean_jac(knot, 0).get(0, 0);
            let se = out.field.se_jac(knot, 0).get(0, 0);
            assert!(
                (mean - 1.0).abs() <= 3.0 * se + 1e-10,
                "knot {knot}: mean {mean}, se {se}"
            );
            assert!(out.field.max_vj_dev(knot, 0) <= 1e-12);
        }
    }

    #[test]
    fn first_step_from_dirac_start_stays_near_x() {
        // At t = s the law is a point mass, so both coefficients vanish and
        // the first step leaves the state at x up to rounding.
        let cset = families::example46(F46::Identity);
        let out = single_point_sim(&cset, 0.3, 10, 32, 3);
        let x1 = out.field.phi(1, 0).x();
        assert!((x1 - 0.3).abs() < 1e-12, "first step moved to {x1}");
    }

    #[test]
    fn replica_exchangeability() {
        let cset = families::example46(F46::Tanh { a: 1.0 });
        let grid = SpatialGrid::single_point(&Vect::scalar(0.5));
        let tg = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let m = 64;
        let paths = BrownianPaths::sample(tg, m, 1, 23).unwrap();
        let out_a = simulate(&cset, &grid, &paths, &settings(m)).unwrap();

        let rng = CounterRng::new(99);
        let mut perm: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            let j = (rng.index(7, i as u64) % (i as u64 + 1)) as usize;
            perm.swap(i, j);
        }
        // Keep the physical replica in place so the stored path agrees.
        let phys_pos = perm.iter().position(|&p| p == 0).unwrap();
        perm.swap(0, phys_pos);
        let out_b = simulate(&cset, &grid, &paths.permuted_replicas(&perm), &settings(m)).unwrap();

        let last = out_a.field.n_knots() - 1;
        for knot in [0, last / 2, last] {
            let ma = out_a.field.moments(knot, 0)[0];
            let mb = out_b.field.moments(knot, 0)[0];
            assert!((ma - mb).abs() <= 1e-12, "law mean differs: {ma} vs {mb}");
            let ja = out_a.field.mean_jac(knot, 0).get(0, 0);
            let jb = out_b.field.mean_jac(knot, 0).get(0, 0);
            assert!((ja - jb).abs() <= 1e-12, "mean jacobian differs");
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let cset = families::example46(F46::Tanh { a: 2.0 });
        let grid = SpatialGrid::line(-1.0, 1.0, 9).unwrap();
        let tg = TimeGrid::new(0.0, 0.5, 100).unwrap();
        let paths = BrownianPaths::sample(tg, 32, 1, 77).unwrap();
        let mut s1 = settings(32);
        s1.n_threads = 1;
        let mut s4 = settings(32);
        s4.n_threads = 4;
        let a = simulate(&cset, &grid, &paths, &s1).unwrap();
        let b = simulate(&cset, &grid, &paths, &s4).unwrap();
        for knot in 0..a.field.n_knots() {
            for g in 0..grid.n_points() {
                assert_eq!(a.field.phi(knot, g), b.field.phi(knot, g));
                assert_eq!(a.field.jac(knot, g), b.field.jac(knot, g));
                assert_eq!(a.field.moments(knot, g), b.field.moments(knot, g));
            }
        }
    }

    #[test]
    fn two_dimensional_diagonal_flow_matches_closed_form() {
        let (b1, b2) = (0.4, 0.25);
        let cset = families::gbm2d(b1, b2);
        let grid = SpatialGrid::new(vec![0.5, -1.0], vec![1.5, 1.0], vec![3, 3]).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 500).unwrap();
        let paths = BrownianPaths::sample(tg, 8, 2, 21).unwrap();
        let out = simulate(&cset, &grid, &paths, &settings(8)).unwrap();
        // The stored map at t = s is the grid itself.
        for g in 0..grid.n_points() {
            assert_eq!(*out.field.phi(0, g), grid.point(g));
            assert_eq!(*out.field.jac(0, g), Mat::identity(2));
        }
        let w1 = paths.path_values(0, 0);
        let w2 = paths.path_values(0, 1);
        let n = tg.n_steps();
        let ident = Mat::identity(2);
        for g in 0..grid.n_points() {
            let x = grid.point(g);
            let e1 = (b1 * w1[n] - 0.5 * b1 * b1).exp();
            let e2 = (b2 * w2[n] - 0.5 * b2 * b2).exp();
            let phi = out.field.phi(n, g);
            assert!((phi.get(0) - x.get(0) * e1).abs() <= 0.05 * e1, "axis 0 at {g}");
            assert!((phi.get(1) - x.get(1) * e2).abs() <= 0.05 * e2, "axis 1 at {g}");
            let dev = out.field.vinv(n, g).matmul(out.field.jac(n, g)).sub(&ident);
            assert!(dev.frobenius() <= 0.05, "V J - I = {}", dev.frobenius());
        }
    }

    #[test]
    fn run_aborts_when_replicas_diverge() {
        use crate::coefficients::{CoefficientSet, MomentCoeff, MomentFormSpec};
        use std::sync::Arc;
        // Cubic drift from x = 3 blows past the f64 range in a handful of
        // Euler steps; every replica diverges and the 1% gate must fire.
        let spec = MomentFormSpec {
            dim_state: 1,
            stats: vec![],
            coeffs: vec![
                MomentCoeff {
                    value: Arc::new(|x: &Vect, _m: &[f64]| Vect::scalar(x.x().powi(3))),
                    dx: Arc::new(|x: &Vect, _m: &[f64]| Mat::scalar(3.0 * x.x() * x.x())),
                    dm: Arc::new(|_x, _m, _q| Vect::scalar(0.0)),
                },
                MomentCoeff {
                    value: Arc::new(|_x, _m| Vect::scalar(0.0)),
                    dx: Arc::new(|_x, _m| Mat::scalar(0.0)),
                    dm: Arc::new(|_x, _m, _q| Vect::scalar(0.0)),
                },
            ],
        };
        let cset = CoefficientSet::from_moment_form(spec, 1.0).unwrap();
        let grid = SpatialGrid::single_point(&Vect::scalar(3.0));
        let tg = TimeGrid::new(0.0, 10.0, 100).unwrap();
        let paths = BrownianPaths::sample(tg, 16, 1, 2).unwrap();
        match simulate(&cset, &grid, &paths, &settings(16)) {
            Err(crate::error::Error::TooManyDiverged { .. }) => {}
            other => panic!("expected divergence abort, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn heun_and_converted_euler_agree_on_strat_family() {
        let cset = families::strat_sine();
        let x0 = Vect::scalar(0.7);
        let grid = SpatialGrid::single_point(&x0);
        let m = 64;
        let mut errors = Vec::new();
        let mut paths = BrownianPaths::sample(TimeGrid::new(0.0, 1.0, 250).unwrap(), m, 1, 13).unwrap();
        for _ in 0..3 {
            let mut s = settings(m);
            s.record_replicas_at = Some(0);
            let em = simulate(&cset, &grid, &paths, &s).unwrap();
            let heun = heun_strat_states(&cset, &x0, &paths, m).unwrap();
            let rec = em.replica_series.unwrap();
            let n = paths.grid().n_steps();
            let mut diffs: Vec<f64> = (0..m)
                .map(|r| (rec.states[n][r].x() - heun[n][r].x()).abs())
                .collect();
            diffs.sort_by(f64::total_cmp);
            errors.push(diffs[m / 2]);
            paths = paths.refine_halve();
        }
        // Pathwise agreement, median over replicas, order at least 0.4.
        let order = (errors[0] / errors[2]).ln() / 4.0f64.ln();
        assert!(
            errors[2] < errors[0] && order >= 0.4,
            "errors {errors:?}, order {order}"
        );
        assert!(errors[2] <= 0.02, "finest disagreement too large: {}", errors[2]);
    }
}
