//! Experiment drivers: the computations behind the CLI subcommands and the
//! acceptance checks. Everything here is deterministic given the seeds that
//! parameterize it.

use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::families::{self, F46};
use crate::flow::{simulate, FlowField, SimOutput, SimSettings};
use crate::grid::SpatialGrid;
use crate::inverse::{integrate_psi, verify_two_sided, InverseTrajectory, PsiSettings, TwoSidedReport};
use crate::linalg::{Mat, Vect};
use crate::measure::{w2_1d, w2_brute_force, w2_exact_small, EmpiricalMeasure};
use crate::oracle;
use crate::paths::{BrownianPaths, CounterRng, TimeGrid};
use crate::stopping::{detect_rho, detect_theta, estimate_domain, DomainMask};

/// Errors at or below this are treated as exact (already at the rounding
/// floor), in which case a decay order cannot and need not be fitted.
pub const EXACT_FLOOR: f64 = 1e-10;

/// Least-squares slope of ln(error) against ln(dt).
#[derive(Clone, Debug)]
pub struct OrderFit {
    pub dts: Vec<f64>,
    pub errors: Vec<f64>,
    /// None when the errors sit at the exact floor.
    pub order: Option<f64>,
    /// OLS standard error of the slope (0 with fewer than 3 points).
    pub std_err: f64,
    pub exact: bool,
}

pub fn fit_order(dts: &[f64], errors: &[f64]) -> OrderFit {
    assert_eq!(dts.len(), errors.len());
    let exact = errors.iter().all(|&e| e <= EXACT_FLOOR);
    let (order, std_err) = if exact {
        (None, 0.0)
    } else {
        let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
        let ys: Vec<f64> = errors.iter().map(|e| e.max(1e-300).ln()).collect();
        let n = xs.len() as f64;
        let xm = xs.iter().sum::<f64>() / n;
        let ym = ys.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
        let slope = sxy / sxx;
        let se = if xs.len() > 2 {
            let rss: f64 = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| {
                    let fit = ym + slope * (x - xm);
                    (y - fit) * (y - fit)
                })
                .sum();
            (rss / (n - 2.0) / sxx).sqrt()
        } else {
            0.0
        };
        (Some(slope), se)
    };
    OrderFit {
        dts: dts.to_vec(),
        errors: errors.to_vec(),
        order,
        std_err,
        exact,
    }
}

/// A fitted order passes a threshold if it reaches it or the errors are at
/// the exact floor (nothing left to decay).
pub fn order_passes(fit: &OrderFit, threshold: f64) -> bool {
    fit.exact || fit.order.map_or(false, |o| o >= threshold)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn knot_times(grid: &TimeGrid) -> Vec<f64> {
    (0..grid.n_knots()).map(|i| grid.knot(i)).collect()
}

/// Nested-path ladder: base sampling plus `levels - 1` halvings.
pub fn path_ladder(
    s: f64,
    t_end: f64,
    coarse_steps: usize,
    levels: usize,
    n_replicas: usize,
    dim_noise: usize,
    seed: u64,
) -> Result<Vec<BrownianPaths>> {
    if levels < 2 {
        return Err(Error::Config("a refinement study needs at least 2 levels".into()));
    }
    let grid = TimeGrid::new(s, t_end, coarse_steps)?;
    let mut ladder = vec![BrownianPaths::sample(grid, n_replicas, dim_noise, seed)?];
    for _ in 1..levels {
        let next = ladder.last().unwrap().refine_halve();
        ladder.push(next);
    }
    Ok(ladder)
}

// ---- self-convergence ----------------------------------------------------

#[derive(Clone, Debug)]
pub struct ConvergenceReport {
    pub fit: OrderFit,
    /// Median pathwise endpoint error per level against the finest level.
    pub errors: Vec<f64>,
    pub dts: Vec<f64>,
}

/// Pathwise endpoint self-convergence on nested paths: every level is
/// compared against the finest on the same underlying Brownian path.
pub fn state_self_convergence(
    cset: &CoefficientSet,
    x0: &Vect,
    s: f64,
    t_end: f64,
    coarse_steps: usize,
    levels: usize,
    n_replicas: usize,
    seed: u64,
    n_threads: usize,
) -> Result<ConvergenceReport> {
    if levels < 3 {
        return Err(Error::Config("convergence study needs at least 3 levels".into()));
    }
    let ladder = path_ladder(s, t_end, coarse_steps, levels, n_replicas, cset.dim_noise(), seed)?;
    let grid = SpatialGrid::single_point(x0);
    let mut endpoints: Vec<Vec<Vect>> = Vec::with_capacity(levels);
    for paths in &ladder {
        let settings = SimSettings {
            n_replicas,
            record_replicas_at: Some(0),
            record_knots: Some(vec![paths.grid().n_steps()]),
            n_threads,
            ..SimSettings::default()
        };
        let out = simulate(cset, &grid, paths, &settings)?;
        let rec = out.replica_series.expect("recording requested");
        endpoints.push(rec.states.last().expect("endpoint recorded").clone());
    }
    let finest = endpoints.last().unwrap();
    let mut errors = Vec::with_capacity(levels - 1);
    let mut dts = Vec::with_capacity(levels - 1);
    for (l, paths) in ladder.iter().take(levels - 1).enumerate() {
        let errs: Vec<f64> = (0..n_replicas)
            .map(|r| endpoints[l][r].sub(&finest[r]).norm())
            .collect();
        errors.push(median(errs));
        dts.push(paths.grid().dt());
    }
    let fit = fit_order(&dts, &errors);
    Ok(ConvergenceReport { fit, errors, dts })
}

/// Strong-order study of the measure-free geometric flow against its closed
/// form x exp((a - b^2/2) t + b W_t), per refinement level on nested paths.
pub fn geometric_strong_order(
    drift_slope: f64,
    diffusion_slope: f64,
    x0: f64,
    t_end: f64,
    coarse_steps: usize,
    levels: usize,
    n_replicas: usize,
    seed: u64,
    n_threads: usize,
) -> Result<ConvergenceReport> {
    let cset = families::moment_linear(&families::MomentLinear {
        drift_x: drift_slope,
        drift_mean: 0.0,
        drift_const: 0.0,
        rows: vec![families::LinearRow { x: diffusion_slope, mean: 0.0, cons: 0.0 }],
    })?;
    let ladder = path_ladder(0.0, t_end, coarse_steps, levels, n_replicas, 1, seed)?;
    let grid = SpatialGrid::single_point(&Vect::scalar(x0));
    let mut errors = Vec::with_capacity(levels);
    let mut dts = Vec::with_capacity(levels);
    for paths in &ladder {
        let n = paths.grid().n_steps();
        let settings = SimSettings {
            n_replicas,
            record_replicas_at: Some(0),
            record_knots: Some(vec![n]),
            n_threads,
            ..SimSettings::default()
        };
        let out = simulate(&cset, &grid, paths, &settings)?;
        let rec = out.replica_series.expect("recording requested");
        let errs: Vec<f64> = (0..n_replicas)
            .map(|r| {
                let w_end = *paths.path_values(r, 0).last().unwrap();
                let exact =
                    x0 * ((drift_slope - 0.5 * diffusion_slope * diffusion_slope) * t_end
                        + diffusion_slope * w_end)
                        .exp();
                (rec.states[0][r].x() - exact).abs()
            })
            .collect();
        errors.push(median(errs));
        dts.push(paths.grid().dt());
    }
    let fit = fit_order(&dts, &errors);
    Ok(ConvergenceReport { fit, errors, dts })
}

// ---- oracle comparison ----------------------------------------------------

#[derive(Clone, Debug)]
pub struct OracleStudy {
    pub dts: Vec<f64>,
    /// Median over replicas of |J_engine - J*| at the horizon, per level.
    pub median_errors: Vec<f64>,
    pub fit: OrderFit,
    /// Per-replica endpoint errors at the finest level.
    pub finest_errors: Vec<f64>,
    /// Quantiles of |J_engine - J*| over replicas at selected knots of the
    /// finest level: (knot, [min, q25, median, q75, max]).
    pub finest_knot_quantiles: Vec<(usize, [f64; 5])>,
}

/// Same-seed pathwise comparison of the engine's variational solution with
/// the closed-form Jacobian, on nested paths.
///
/// For the identity interaction the oracle is fully independent of the
/// engine (the mean Jacobian is identically one). For other f the oracle
/// consumes the engine's replica-averaged mean-Jacobian series and the f'
/// series along the simulated states, testing the formula's pathwise shape.
pub fn oracle_jacobian_study(
    f: F46,
    x0: f64,
    s: f64,
    t_end: f64,
    coarse_steps: usize,
    levels: usize,
    n_replicas: usize,
    seed: u64,
    n_threads: usize,
) -> Result<OracleStudy> {
    let cset = families::example46(f);
    let ladder = path_ladder(s, t_end, coarse_steps, levels, n_replicas, 1, seed)?;
    let grid = SpatialGrid::single_point(&Vect::scalar(x0));
    let mut dts = Vec::with_capacity(levels);
    let mut med = Vec::with_capacity(levels);
    let mut finest_errors = Vec::new();
    let mut finest_knot_quantiles = Vec::new();
    for (level, paths) in ladder.iter().enumerate() {
        let settings = SimSettings {
            n_replicas,
            record_replicas_at: Some(0),
            record_knots: None,
            n_threads,
            ..SimSettings::default()
        };
        let out = simulate(&cset, &grid, paths, &settings)?;
        let rec = out.replica_series.as_ref().expect("recording requested");
        let times = knot_times(paths.grid());
        let n = paths.grid().n_steps();
        let mut errs = Vec::with_capacity(n_replicas);
        let mut per_knot: Vec<Vec<f64>> = Vec::new();
        let selected: Vec<usize> = (1..=4).map(|q| q * n / 4).collect();
        if level + 1 == levels {
            per_knot = vec![Vec::with_capacity(n_replicas); selected.len()];
        }
        for r in 0..n_replicas {
            let w = paths.path_values(r, 0);
            let (fprime, mean_jac): (Vec<f64>, Vec<f64>) = match f {
                F46::Identity => (vec![1.0; times.len()], vec![1.0; times.len()]),
                _ => (
                    (0..times.len())
                        .map(|i| f.deriv(rec.states[i][r].x()))
                        .collect(),
                    (0..times.len())
                        .map(|i| out.field.mean_jac(i, 0).get(0, 0))
                        .collect(),
                ),
            };
            let jstar = oracle::closed_form_jacobian(&times, &w, &fprime, &mean_jac)?;
            let jeng = rec.jacobians[n][r].get(0, 0);
            errs.push((jeng - jstar[n]).abs());
            if level + 1 == levels {
                for (si, &knot) in selected.iter().enumerate() {
                    per_knot[si].push((rec.jacobians[knot][r].get(0, 0) - jstar[knot]).abs());
                }
            }
        }
        if level + 1 == levels {
            for (si, &knot) in selected.iter().enumerate() {
                let mut v = per_knot[si].clone();
                v.sort_by(f64::total_cmp);
                let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
                finest_knot_quantiles
                    .push((knot, [v[0], q(0.25), q(0.5), q(0.75), v[v.len() - 1]]));
            }
        }
        dts.push(paths.grid().dt());
        med.push(median(errs.clone()));
        finest_errors = errs;
    }
    let fit = fit_order(&dts, &med);
    Ok(OracleStudy {
        dts,
        median_errors: med,
        fit,
        finest_errors,
        finest_knot_quantiles,
    })
}

// ---- mean-Jacobian identity ------------------------------------------------

#[derive(Clone, Debug)]
pub struct MeanJacobianCheck {
    /// Worst |mean(J) - 1| over stored knots.
    pub max_abs_dev: f64,
    /// Worst knot margin |mean - 1| - 3 SE (negative = inside the band).
    pub worst_margin: f64,
    pub pass: bool,
}

/// Replica-mean of the Jacobian must stay within three standard errors of 1
/// at every stored knot for the identity interaction.
pub fn mean_jacobian_identity(
    x0: f64,
    s: f64,
    t_end: f64,
    n_steps: usize,
    n_replicas: usize,
    seed: u64,
    n_threads: usize,
) -> Result<MeanJacobianCheck> {
    let cset = families::example46(F46::Identity);
    let grid = SpatialGrid::single_point(&Vect::scalar(x0));
    let tg = TimeGrid::new(s, t_end, n_steps)?;
    let paths = BrownianPaths::sample(tg, n_replicas, 1, seed)?;
    let settings = SimSettings {
        n_replicas,
        n_threads,
        ..SimSettings::default()
    };
    let out = simulate(&cset, &grid, &paths, &settings)?;
    let mut max_abs: f64 = 0.0;
    let mut worst_margin = f64::NEG_INFINITY;
    for knot in 0..out.field.n_knots() {
        let dev = (out.field.mean_jac(knot, 0).get(0, 0) - 1.0).abs();
        let se = out.field.se_jac(knot, 0).get(0, 0);
        max_abs = max_abs.max(dev);
        worst_margin = worst_margin.max(dev - (3.0 * se + EXACT_FLOOR));
    }
    Ok(MeanJacobianCheck {
        max_abs_dev: max_abs,
        worst_margin,
        pass: worst_margin <= 0.0,
    })
}

// ---- inverse-Jacobian identity ----------------------------------------------

#[derive(Clone, Debug)]
pub struct VjIdentityStudy {
    pub dts: Vec<f64>,
    /// Sup over grid and knots before theta_m of the physical |V J - I|_F.
    pub sup_devs: Vec<f64>,
    /// Median over replicas of each replica's sup over knots before theta_m,
    /// at the grid's center point. The stable statistic for refinement decay.
    pub median_sup_devs: Vec<f64>,
    pub theta_hits: Vec<Option<usize>>,
}

pub fn vj_identity_study(
    cset: &CoefficientSet,
    grid: &SpatialGrid,
    m_threshold: f64,
    s: f64,
    t_end: f64,
    coarse_steps: usize,
    levels: usize,
    n_replicas: usize,
    seed: u64,
    n_threads: usize,
) -> Result<VjIdentityStudy> {
    let ladder = path_ladder(s, t_end, coarse_steps, levels, n_replicas, cset.dim_noise(), seed)?;
    let mut study = VjIdentityStudy {
        dts: Vec::new(),
        sup_devs: Vec::new(),
        median_sup_devs: Vec::new(),
        theta_hits: Vec::new(),
    };
    let ident = Mat::identity(cset.dim_state());
    let center = grid.n_points() / 2;
    for paths in &ladder {
        let settings = SimSettings {
            n_replicas,
            record_replicas_at: Some(center),
            n_threads,
            ..SimSettings::default()
        };
        let out = simulate(cset, grid, paths, &settings)?;
        let theta = detect_theta(&out.field, m_threshold);
        let horizon = theta.unwrap_or(out.field.n_knots());
        let mut sup: f64 = 0.0;
        for knot in 0..horizon {
            for g in 0..grid.n_points() {
                let dev = out.field.vinv(knot, g).matmul(out.field.jac(knot, g)).sub(&ident);
                sup = sup.max(dev.frobenius());
            }
        }
        let rec = out.replica_series.expect("recording requested");
        let per_replica: Vec<f64> = (0..n_replicas)
            .map(|r| {
                let mut worst = 0.0f64;
                for (i, &knot) in rec.knots.iter().enumerate() {
                    if knot >= horizon {
                        break;
                    }
                    let dev = rec.inverse_jacobians[i][r].matmul(&rec.jacobians[i][r]).sub(&ident);
                    worst = worst.max(dev.frobenius());
                }
                worst
            })
            .collect();
        study.dts.push(paths.grid().dt());
        study.sup_devs.push(sup);
        study.median_sup_devs.push(median(per_replica));
        study.theta_hits.push(theta);
    }
    Ok(study)
}

// ---- two-sided composition ----------------------------------------------------

#[derive(Clone, Debug)]
pub struct TwoSidedStudy {
    pub dts: Vec<f64>,
    pub spacings: Vec<f64>,
    pub max_left: Vec<f64>,
    pub max_right: Vec<f64>,
    /// The finest level's full report (for domain masks and stopping times).
    pub finest: TwoSidedLevel,
}

#[derive(Clone, Debug)]
pub struct TwoSidedLevel {
    pub report: TwoSidedReport,
    pub trajectories: Vec<InverseTrajectory>,
    pub field: FlowField,
}

/// Joint (dt, grid-spacing) refinement study of the composition residuals.
/// Levels halve both the step and the spacing; the box is fixed.
pub fn two_sided_study(
    cset: &CoefficientSet,
    box_min: f64,
    box_max: f64,
    coarse_points: usize,
    s: f64,
    t_end: f64,
    coarse_steps: usize,
    levels: usize,
    n_replicas: usize,
    m_ladder: &[f64],
    seed: u64,
    n_threads: usize,
) -> Result<TwoSidedStudy> {
    let ladder = path_ladder(s, t_end, coarse_steps, levels, n_replicas, cset.dim_noise(), seed)?;
    let mut study: Option<TwoSidedStudy> = None;
    let mut points = coarse_points;
    let d = cset.dim_state();
    for (l, paths) in ladder.iter().enumerate() {
        let grid = SpatialGrid::new(vec![box_min; d], vec![box_max; d], vec![points; d])?;
        let settings = SimSettings {
            n_replicas,
            n_threads,
            ..SimSettings::default()
        };
        let out = simulate(cset, &grid, paths, &settings)?;
        let psi_settings = PsiSettings {
            m_ladder: m_ladder.to_vec(),
            ..PsiSettings::default()
        };
        let trajectories: Vec<InverseTrajectory> = crate::parallel::run_indexed(
            grid.n_points(),
            n_threads,
            |g| integrate_psi(&out.field, cset, paths, &grid.point(g), &psi_settings),
        )
        .into_iter()
        .collect::<Result<_>>()?;
        let report = verify_two_sided(&out.field, &trajectories);
        match study.as_mut() {
            None => {
                study = Some(TwoSidedStudy {
                    dts: vec![paths.grid().dt()],
                    spacings: vec![grid.spacing(0)],
                    max_left: vec![report.max_left],
                    max_right: vec![report.max_right],
                    finest: TwoSidedLevel {
                        report,
                        trajectories,
                        field: out.field,
                    },
                });
            }
            Some(stu) => {
                stu.dts.push(paths.grid().dt());
                stu.spacings.push(grid.spacing(0));
                stu.max_left.push(report.max_left);
                stu.max_right.push(report.max_right);
                stu.finest = TwoSidedLevel {
                    report,
                    trajectories,
                    field: out.field,
                };
            }
        }
        if l + 1 < levels {
            points = (points - 1) * 2 + 1;
        }
    }
    Ok(study.expect("at least one level"))
}

// ---- domain estimation ------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DomainStudy {
    pub masks: Vec<DomainMask>,
    pub monotone: bool,
}

/// Domain masks at the requested knots, from the finest two-sided level.
pub fn domain_study(level: &TwoSidedLevel, knots: &[usize]) -> DomainStudy {
    let masks: Vec<DomainMask> = knots
        .iter()
        .map(|&k| estimate_domain(&level.field, &level.report.tau, k))
        .collect();
    let monotone = masks
        .windows(2)
        .all(|w| w[0].knot > w[1].knot || w[1].is_subset_of(&w[0]));
    DomainStudy { masks, monotone }
}

// ---- stopping-time agreement ---------------------------------------------------

#[derive(Clone, Debug)]
pub struct AgreementReport {
    pub n_paths: usize,
    pub engine_fired: usize,
    pub oracle_fired: usize,
    pub both_fired: usize,
    pub agree_within_two: usize,
    /// Fraction of both-fired paths agreeing within two knots (1 when the
    /// both-fired set is empty: nothing to disagree on).
    pub agreement: f64,
}

/// Cross-implementation agreement of the generic invertibility detector with
/// the closed-form crossing detector, over seeded physical paths.
pub fn stopping_agreement(
    x0: f64,
    s: f64,
    t_end: f64,
    n_steps: usize,
    n_replicas: usize,
    n_paths: usize,
    base_seed: u64,
    n_threads: usize,
) -> Result<AgreementReport> {
    let cset = families::example46(F46::Identity);
    let grid = SpatialGrid::single_point(&Vect::scalar(x0));
    let tg = TimeGrid::new(s, t_end, n_steps)?;
    let mut report = AgreementReport {
        n_paths,
        engine_fired: 0,
        oracle_fired: 0,
        both_fired: 0,
        agree_within_two: 0,
        agreement: 1.0,
    };
    let times = knot_times(&tg);
    for p in 0..n_paths {
        let paths = BrownianPaths::sample(tg, n_replicas, 1, base_seed + p as u64)?;
        let settings = SimSettings {
            n_replicas,
            n_threads,
            ..SimSettings::default()
        };
        let out = simulate(&cset, &grid, &paths, &settings)?;
        let engine = detect_rho(&out.field.jac_series(0), out.field.v_frozen_knot(0));
        let w = paths.path_values(0, 0);
        let oracle_hit = oracle::crossing_time(&times, &w)?;
        if engine.is_some() {
            report.engine_fired += 1;
        }
        if oracle_hit.is_some() {
            report.oracle_fired += 1;
        }
        if let (Some(a), Some(b)) = (engine, oracle_hit) {
            report.both_fired += 1;
            if a.abs_diff(b) <= 2 {
                report.agree_within_two += 1;
            }
        }
    }
    if report.both_fired > 0 {
        report.agreement = report.agree_within_two as f64 / report.both_fired as f64;
    }
    Ok(report)
}

// ---- flow-regularity slopes ------------------------------------------------------

#[derive(Clone, Debug)]
pub struct RegularitySlopes {
    pub deltas: Vec<f64>,
    pub mean_square_diffs: Vec<f64>,
    pub lipschitz_slope: f64,
    pub time_gaps: Vec<f64>,
    pub w2_values: Vec<f64>,
    pub w2_slope: f64,
}

/// Empirical flow-regularity slopes:
/// the log-log slope of E|Phi_t(x) - Phi_t(x')|^2 against |x - x'| under
/// common random numbers, and of W2(law at s, law at s + h) against h.
pub fn regularity_slopes(
    lip_cset: &CoefficientSet,
    w2_cset: &CoefficientSet,
    x0: f64,
    s: f64,
    t_end: f64,
    n_steps: usize,
    n_replicas: usize,
    seed: u64,
    n_threads: usize,
) -> Result<RegularitySlopes> {
    let tg = TimeGrid::new(s, t_end, n_steps)?;
    let paths = BrownianPaths::sample(tg, n_replicas, 1, seed)?;
    let endpoint = |cset: &CoefficientSet, x: f64| -> Result<Vec<f64>> {
        let grid = SpatialGrid::single_point(&Vect::scalar(x));
        let settings = SimSettings {
            n_replicas,
            record_replicas_at: Some(0),
            record_knots: Some(vec![n_steps]),
            n_threads,
            ..SimSettings::default()
        };
        let out = simulate(cset, &grid, &paths, &settings)?;
        let rec = out.replica_series.expect("recording requested");
        Ok(rec.states[0].iter().map(|v| v.x()).collect())
    };

    let base = endpoint(lip_cset, x0)?;
    let deltas = vec![1e-1, 1e-2, 1e-3];
    let mut msd = Vec::with_capacity(deltas.len());
    for &d in &deltas {
        let shifted = endpoint(lip_cset, x0 + d)?;
        let ms: f64 = base
            .iter()
            .zip(&shifted)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n_replicas as f64;
        msd.push(ms);
    }
    let lip_fit = fit_order(&deltas, &msd);
    let lipschitz_slope = lip_fit.order.unwrap_or(2.0);

    // Law continuity in time, measured from the start (a point mass).
    let fracs = [0.01, 0.0316, 0.1, 0.316, 1.0];
    let knots: Vec<usize> = fracs
        .iter()
        .map(|f| ((n_steps as f64) * f).round() as usize)
        .collect();
    let grid = SpatialGrid::single_point(&Vect::scalar(x0));
    let settings = SimSettings {
        n_replicas,
        record_replicas_at: Some(0),
        record_knots: Some(knots.clone()),
        n_threads,
        ..SimSettings::default()
    };
    let out = simulate(w2_cset, &grid, &paths, &settings)?;
    let rec = out.replica_series.expect("recording requested");
    let start_cloud = EmpiricalMeasure::from_samples_1d(&vec![x0; n_replicas])?;
    let mut gaps = Vec::with_capacity(knots.len());
    let mut w2s = Vec::with_capacity(knots.len());
    for (i, &k) in knots.iter().enumerate() {
        let cloud =
            EmpiricalMeasure::from_samples_1d(&rec.states[i].iter().map(|v| v.x()).collect::<Vec<_>>())?;
        gaps.push(tg.knot(k) - s);
        w2s.push(w2_1d(&start_cloud, &cloud)?);
    }
    let w2_fit = fit_order(&gaps, &w2s);
    let w2_slope = w2_fit.order.unwrap_or(0.5);

    Ok(RegularitySlopes {
        deltas,
        mean_square_diffs: msd,
        lipschitz_slope,
        time_gaps: gaps,
        w2_values: w2s,
        w2_slope,
    })
}

// ---- Wasserstein correctness -------------------------------------------------------

#[derive(Clone, Debug)]
pub struct W2Check {
    pub cross_method_instances: usize,
    pub max_cross_method_dev: f64,
    pub enumeration_instances: usize,
    pub max_enumeration_dev: f64,
    pub pass: bool,
}

/// Random-instance agreement: quantile coupling vs assignment solve on 1-d
/// inputs, and assignment solve vs exhaustive enumeration in 2-d.
pub fn wasserstein_check(seed: u64) -> Result<W2Check> {
    let rng = CounterRng::new(seed);
    let mut max_cross: f64 = 0.0;
    let n_cross = 100;
    for t in 0..n_cross as u64 {
        let n = 2 + (rng.index(t, 0) % 11) as usize; // 2..=12
        let xs: Vec<f64> = (0..n).map(|i| rng.normal(t, 10 + i as u64) * 2.0).collect();
        let ys: Vec<f64> = (0..n).map(|i| rng.normal(t, 400 + i as u64) * 2.0).collect();
        let mu = EmpiricalMeasure::from_samples_1d(&xs)?;
        let nu = EmpiricalMeasure::from_samples_1d(&ys)?;
        max_cross = max_cross.max((w2_1d(&mu, &nu)? - w2_exact_small(&mu, &nu)?).abs());
    }
    let mut max_enum: f64 = 0.0;
    let n_enum = 50;
    for t in 0..n_enum as u64 {
        let n = 2 + (rng.index(1000 + t, 0) % 5) as usize; // 2..=6
        let mk = |tag: u64| -> Result<EmpiricalMeasure> {
            EmpiricalMeasure::uniform(
                (0..n)
                    .map(|i| {
                        Vect::from_slice(&[
                            rng.normal(t, tag + 2 * i as u64),
                            rng.normal(t, tag + 2 * i as u64 + 1),
                        ])
                    })
                    .collect(),
            )
        };
        let mu = mk(2000)?;
        let nu = mk(7000)?;
        max_enum = max_enum.max((w2_exact_small(&mu, &nu)? - w2_brute_force(&mu, &nu)?).abs());
    }
    Ok(W2Check {
        cross_method_instances: n_cross,
        max_cross_method_dev: max_cross,
        enumeration_instances: n_enum,
        max_enumeration_dev: max_enum,
        pass: max_cross <= 1e-12 && max_enum <= 1e-12,
    })
}

// ---- identity flow -------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct IdentityCheck {
    pub state_exact: bool,
    pub jacobian_exact: bool,
    pub inverse_jacobian_exact: bool,
    pub psi_exact: bool,
    pub pass: bool,
}

/// Zero coefficients must give the identity in state, Jacobian, inverse
/// Jacobian, and inverse flow, with zero tolerance.
pub fn identity_flow_check(
    n_grid: usize,
    n_steps: usize,
    n_replicas: usize,
    seed: u64,
    n_threads: usize,
) -> Result<(IdentityCheck, SimOutput)> {
    let cset = families::zero(1, 1);
    let grid = SpatialGrid::line(-2.0, 2.0, n_grid)?;
    let tg = TimeGrid::new(0.0, 1.0, n_steps)?;
    let paths = BrownianPaths::sample(tg, n_replicas, 1, seed)?;
    let settings = SimSettings {
        n_replicas,
        n_threads,
        ..SimSettings::default()
    };
    let out = simulate(&cset, &grid, &paths, &settings)?;
    let ident = Mat::identity(1);
    let mut state_exact = true;
    let mut jac_exact = true;
    let mut vinv_exact = true;
    for knot in 0..out.field.n_knots() {
        for g in 0..grid.n_points() {
            state_exact &= *out.field.phi(knot, g) == grid.point(g);
            jac_exact &= *out.field.jac(knot, g) == ident;
            vinv_exact &= *out.field.vinv(knot, g) == ident;
        }
    }
    let psi_settings = PsiSettings::default();
    let mut psi_exact = true;
    for g in 0..grid.n_points() {
        let t = integrate_psi(&out.field, &cset, &paths, &grid.point(g), &psi_settings)?;
        psi_exact &= t.failure_knot.is_none()
            && t.psi.iter().all(|p| *p == grid.point(g));
    }
    let check = IdentityCheck {
        state_exact,
        jacobian_exact: jac_exact,
        inverse_jacobian_exact: vinv_exact,
        psi_exact,
        pass: state_exact && jac_exact && vinv_exact && psi_exact,
    };
    Ok((check, out))
}
