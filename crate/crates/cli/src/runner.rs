//! Subcommand implementations: wire the experiment drivers to config,
//! tables, and the manifest.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use mvflow_core::coefficients::probe_assumption;
use mvflow_core::error::Error as CoreError;
use mvflow_core::experiments as exp;
use mvflow_core::flow::{simulate, SimOutput, SimSettings};
use mvflow_core::grid::SpatialGrid;
use mvflow_core::inverse::{integrate_psi, verify_two_sided, PsiSettings};
use mvflow_core::linalg::Vect;
use mvflow_core::measure::EmpiricalMeasure;
use mvflow_core::paths::{BrownianPaths, CounterRng, TimeGrid};
use mvflow_core::stopping::{detect_rho, detect_tau_n, detect_theta};

use crate::config::SimConfig;
use crate::manifest::OutputDir;
use crate::tables::{num, opt_knot, Table};

pub enum CliError {
    Validation(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Numerical(m) => m,
        }
    }
}

fn core_err(e: CoreError) -> CliError {
    match e {
        CoreError::TooManyDiverged { .. } => CliError::Numerical(e.to_string()),
        CoreError::Config(_)
        | CoreError::Capability(_)
        | CoreError::DimensionMismatch { .. }
        | CoreError::GridTooCoarse { .. }
        | CoreError::SizeLimit { .. }
        | CoreError::WrongMethod { .. } => CliError::Validation(e.to_string()),
        other => CliError::Numerical(other.to_string()),
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Validation(format!("io: {e}"))
}

fn build_grid(cfg: &SimConfig, dim: usize) -> Result<SpatialGrid, CliError> {
    SpatialGrid::new(
        vec![cfg.grid.min; dim],
        vec![cfg.grid.max; dim],
        vec![cfg.grid.points; dim],
    )
    .map_err(core_err)
}

fn sample_paths(cfg: &SimConfig, dim_noise: usize) -> Result<BrownianPaths, CliError> {
    let tg = TimeGrid::new(cfg.time.s, cfg.time.t_end, cfg.time.n_steps).map_err(core_err)?;
    BrownianPaths::sample(tg, cfg.ensemble.replicas, dim_noise, cfg.run.seed).map_err(core_err)
}

fn settings(cfg: &SimConfig) -> SimSettings {
    SimSettings {
        n_replicas: cfg.ensemble.replicas,
        n_threads: cfg.run.threads,
        ..SimSettings::default()
    }
}

fn error_counts(out: &SimOutput) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    counts.insert("flow.diverged_replicas".to_string(), out.diverged_replicas);
    counts.insert("flow.v_frozen_replicas".to_string(), out.v_frozen_replicas);
    counts
}

fn flow_field_table(out: &SimOutput) -> String {
    let field = &out.field;
    let d = field.dim();
    let mut cols: Vec<String> = vec!["grid_index".into()];
    for a in 0..d {
        cols.push(format!("x{a}"));
    }
    cols.push("knot".into());
    cols.push("t".into());
    for i in 0..d {
        cols.push(format!("phi{i}"));
    }
    for i in 0..d {
        for j in 0..d {
            cols.push(format!("jac{i}{j}"));
        }
    }
    for i in 0..d {
        for j in 0..d {
            cols.push(format!("vinv{i}{j}"));
        }
    }
    cols.push("det_jac".into());
    for i in 0..d {
        for j in 0..d {
            cols.push(format!("mean_jac{i}{j}"));
        }
    }
    for i in 0..d {
        for j in 0..d {
            cols.push(format!("se_jac{i}{j}"));
        }
    }
    cols.push("max_vj_dev".into());
    for q in 0..field.n_stats() {
        cols.push(format!("moment{q}"));
    }
    let refs: Vec<&str> = cols.iter().map(|s| s.as_str()).collect();
    let mut table = Table::new(&refs);
    for g in 0..field.grid().n_points() {
        let x = field.grid().point(g);
        for knot in 0..field.n_knots() {
            let mut cells = vec![g.to_string()];
            cells.extend(x.as_slice().iter().map(|v| num(*v)));
            cells.push(knot.to_string());
            cells.push(num(field.tgrid().knot(knot)));
            cells.extend(field.phi(knot, g).as_slice().iter().map(|v| num(*v)));
            cells.extend(field.jac(knot, g).as_slice().iter().map(|v| num(*v)));
            cells.extend(field.vinv(knot, g).as_slice().iter().map(|v| num(*v)));
            cells.push(num(field.det_jac(knot, g)));
            cells.extend(field.mean_jac(knot, g).as_slice().iter().map(|v| num(*v)));
            cells.extend(field.se_jac(knot, g).as_slice().iter().map(|v| num(*v)));
            cells.push(num(field.max_vj_dev(knot, g)));
            cells.extend(field.moments(knot, g).iter().map(|v| num(*v)));
            table.row(cells);
        }
    }
    table.render()
}

pub fn run_simulate(cfg: &SimConfig, out_root: &Path) -> Result<BTreeMap<String, usize>, CliError> {
    let started = Instant::now();
    let cset = cfg.coefficient_set().map_err(CliError::Validation)?;
    let grid = build_grid(cfg, cset.dim_state())?;
    let paths = sample_paths(cfg, cset.dim_noise())?;
    let mut sim_settings = settings(cfg);
    if cfg.experiment.dump_final_cloud {
        sim_settings.record_replicas_at = Some(0);
        sim_settings.record_knots = Some(vec![cfg.time.n_steps]);
    }
    let out = simulate(&cset, &grid, &paths, &sim_settings).map_err(core_err)?;

    let mut dir = OutputDir::create(out_root).map_err(io_err)?;
    dir.write("flow_field.tsv", &flow_field_table(&out)).map_err(io_err)?;

    if let Some(rec) = &out.replica_series {
        // Final replica cloud at the first grid point, one atom per row.
        let d = cset.dim_state();
        let mut cols: Vec<String> = vec!["replica".into()];
        for a in 0..d {
            cols.push(format!("x{a}"));
        }
        let refs: Vec<&str> = cols.iter().map(|s| s.as_str()).collect();
        let mut cloud = Table::new(&refs);
        for (r, v) in rec.states[0].iter().enumerate() {
            let mut cells = vec![r.to_string()];
            cells.extend(v.as_slice().iter().map(|x| num(*x)));
            cloud.row(cells);
        }
        dir.write("final_cloud.tsv", &cloud.render()).map_err(io_err)?;
    }
    if cfg.experiment.dump_paths {
        let mut t = Table::new(&["replica", "step", "driver", "dw"]);
        for r in 0..cfg.ensemble.replicas {
            for i in 0..cfg.time.n_steps {
                for k in 0..cset.dim_noise() {
                    t.row(vec![
                        r.to_string(),
                        i.to_string(),
                        k.to_string(),
                        num(paths.increment(r, i, k)),
                    ]);
                }
            }
        }
        dir.write("brownian_increments.tsv", &t.render()).map_err(io_err)?;
    }

    // Detector ladders over the stored field.
    let mut det = Table::new(&["detector", "threshold", "first_knot"]);
    for &m in &cfg.run.m_ladder {
        det.row(vec!["theta".into(), num(m), opt_knot(detect_theta(&out.field, m))]);
    }
    if out.field.dim() == 1 && out.field.grid().n_points() >= 9 {
        for &n in &cfg.run.n_ladder {
            let hit = detect_tau_n(&out.field, n).map_err(core_err)?;
            det.row(vec!["tau_n".into(), num(n), opt_knot(hit)]);
        }
    }
    dir.write("detectors.tsv", &det.render()).map_err(io_err)?;

    let mut stopping = Table::new(&["grid_index", "x0", "rho_knot", "v_frozen_knot"]);
    for g in 0..grid.n_points() {
        let rho = detect_rho(&out.field.jac_series(g), out.field.v_frozen_knot(g));
        stopping.row(vec![
            g.to_string(),
            num(grid.point(g).get(0)),
            opt_knot(rho),
            opt_knot(out.field.v_frozen_knot(g)),
        ]);
    }
    dir.write("stopping_summary.tsv", &stopping.render()).map_err(io_err)?;

    let counts = error_counts(&out);
    dir.finish(cfg, "simulate", counts.clone(), started.elapsed().as_millis() as u64)
        .map_err(io_err)?;
    Ok(counts)
}

fn invert_core(
    cfg: &SimConfig,
) -> Result<
    (
        SimOutput,
        Vec<mvflow_core::inverse::InverseTrajectory>,
        mvflow_core::inverse::TwoSidedReport,
        BrownianPaths,
        SpatialGrid,
    ),
    CliError,
> {
    let cset = cfg.coefficient_set().map_err(CliError::Validation)?;
    let grid = build_grid(cfg, cset.dim_state())?;
    let paths = sample_paths(cfg, cset.dim_noise())?;
    let out = simulate(&cset, &grid, &paths, &settings(cfg)).map_err(core_err)?;
    let psi_settings = PsiSettings {
        m_ladder: cfg.run.m_ladder.clone(),
        ..PsiSettings::default()
    };
    let trajectories: Vec<_> = mvflow_core::parallel::run_indexed(
        grid.n_points(),
        cfg.run.threads,
        |g| integrate_psi(&out.field, &cset, &paths, &grid.point(g), &psi_settings),
    )
    .into_iter()
    .collect::<Result<_, _>>()
    .map_err(core_err)?;
    let report = verify_two_sided(&out.field, &trajectories);
    Ok((out, trajectories, report, paths, grid))
}

pub fn run_invert(cfg: &SimConfig, out_root: &Path) -> Result<BTreeMap<String, usize>, CliError> {
    let started = Instant::now();
    let (out, trajectories, report, _paths, grid) = invert_core(cfg)?;

    let mut cols: Vec<String> = vec!["grid_index".into(), "x0".into(), "rho_knot".into()];
    for &m in &cfg.run.m_ladder {
        cols.push(format!("tau_bar_m{m}"));
    }
    cols.extend(
        ["tau_bar", "tau_bar_prime", "tau", "left_residual", "right_residual"]
            .iter()
            .map(|s| s.to_string()),
    );
    let refs: Vec<&str> = cols.iter().map(|s| s.as_str()).collect();
    let mut table = Table::new(&refs);
    for g in 0..grid.n_points() {
        let t = &trajectories[g];
        let rho = detect_rho(&out.field.jac_series(g), out.field.v_frozen_knot(g));
        let mut cells = vec![g.to_string(), num(grid.point(g).get(0)), opt_knot(rho)];
        for hit in &t.tau_bar_m {
            cells.push(opt_knot(*hit));
        }
        cells.push(opt_knot(report.tau_bar[g]));
        cells.push(opt_knot(report.tau_bar_prime[g]));
        cells.push(opt_knot(report.tau[g]));
        cells.push(num(report.left_residual[g]));
        cells.push(num(report.right_residual[g]));
        table.row(cells);
    }

    let mut dir = OutputDir::create(out_root).map_err(io_err)?;
    dir.write("inverse_report.tsv", &table.render()).map_err(io_err)?;

    let mut counts = error_counts(&out);
    counts.insert(
        "inverse.failed_trajectories".to_string(),
        trajectories.iter().filter(|t| t.failure_knot.is_some()).count(),
    );
    dir.finish(cfg, "invert", counts.clone(), started.elapsed().as_millis() as u64)
        .map_err(io_err)?;
    Ok(counts)
}

pub fn run_domain(cfg: &SimConfig, out_root: &Path) -> Result<BTreeMap<String, usize>, CliError> {
    let started = Instant::now();
    let (out, _trajectories, report, paths, grid) = invert_core(cfg)?;

    let tg = paths.grid();
    let knots: Vec<usize> = cfg
        .experiment
        .domain_times
        .iter()
        .map(|&t| {
            let rel = ((t - tg.s()) / tg.dt()).round();
            rel.clamp(0.0, tg.n_steps() as f64) as usize
        })
        .collect();

    let mut dir = OutputDir::create(out_root).map_err(io_err)?;
    let mut summary = Table::new(&["time", "knot", "cardinality", "subset_of_previous"]);
    let mut prev: Option<mvflow_core::stopping::DomainMask> = None;
    for (i, &knot) in knots.iter().enumerate() {
        let mask = mvflow_core::stopping::estimate_domain(&out.field, &report.tau, knot);
        let raster: String = mask
            .mask
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect::<String>()
            + "\n";
        dir.write(&format!("domain_mask_{i}.txt"), &raster).map_err(io_err)?;
        let subset = prev.as_ref().map_or(true, |p| mask.is_subset_of(p));
        summary.row(vec![
            num(tg.knot(knot)),
            knot.to_string(),
            mask.cardinality().to_string(),
            subset.to_string(),
        ]);
        prev = Some(mask);
    }
    dir.write("domain_summary.tsv", &summary.render()).map_err(io_err)?;

    let counts = error_counts(&out);
    dir.finish(cfg, "domain", counts.clone(), started.elapsed().as_millis() as u64)
        .map_err(io_err)?;
    let _ = grid;
    Ok(counts)
}

pub fn run_converge(cfg: &SimConfig, out_root: &Path) -> Result<BTreeMap<String, usize>, CliError> {
    let started = Instant::now();
    let levels = cfg.experiment.levels;
    if levels < 3 {
        return Err(CliError::Validation(
            "experiment.levels must be at least 3 for a convergence study".into(),
        ));
    }
    let denom = 1usize << (levels - 1);
    if cfg.time.n_steps % denom != 0 {
        return Err(CliError::Validation(format!(
            "time.n_steps must be divisible by 2^(levels-1) = {denom}"
        )));
    }
    let cset = cfg.coefficient_set().map_err(CliError::Validation)?;
    let report = exp::state_self_convergence(
        &cset,
        &Vect::scalar(cfg.experiment.x0),
        cfg.time.s,
        cfg.time.t_end,
        cfg.time.n_steps / denom,
        levels,
        cfg.ensemble.replicas,
        cfg.run.seed,
        cfg.run.threads,
    )
    .map_err(core_err)?;

    let mut table = Table::new(&["level", "dt", "median_endpoint_error"]);
    for (l, (dt, err)) in report.dts.iter().zip(&report.errors).enumerate() {
        table.row(vec![l.to_string(), num(*dt), num(*err)]);
    }
    let mut dir = OutputDir::create(out_root).map_err(io_err)?;
    dir.write("convergence.tsv", &table.render()).map_err(io_err)?;
    let order_line = match (report.fit.exact, report.fit.order) {
        (true, _) => "order\texact\n".to_string(),
        (false, Some(o)) => format!("order\t{o}\norder_std_err\t{}\n", report.fit.std_err),
        (false, None) => "order\tnone\n".to_string(),
    };
    dir.write("convergence_order.tsv", &format!("quantity\tvalue\n{order_line}"))
        .map_err(io_err)?;
    dir.finish(cfg, "converge", BTreeMap::new(), started.elapsed().as_millis() as u64)
        .map_err(io_err)?;
    Ok(BTreeMap::new())
}

pub fn run_oracle_check(cfg: &SimConfig, out_root: &Path) -> Result<BTreeMap<String, usize>, CliError> {
    let started = Instant::now();
    if cfg.coefficients.family != "example46" {
        return Err(CliError::Validation(
            "oracle-check needs coefficients.family = \"example46\"".into(),
        ));
    }
    let f = match cfg.coefficients.f.as_str() {
        "identity" => mvflow_core::families::F46::Identity,
        "tanh" | "tanh_a" => mvflow_core::families::F46::Tanh { a: cfg.coefficients.a },
        other => return Err(CliError::Validation(format!("coefficients.f '{other}' unknown"))),
    };
    let levels = cfg.experiment.levels.max(3);
    let denom = 1usize << (levels - 1);
    if cfg.time.n_steps % denom != 0 {
        return Err(CliError::Validation(format!(
            "time.n_steps must be divisible by 2^(levels-1) = {denom}"
        )));
    }
    let study = exp::oracle_jacobian_study(
        f,
        cfg.experiment.x0,
        cfg.time.s,
        cfg.time.t_end,
        cfg.time.n_steps / denom,
        levels,
        cfg.ensemble.replicas,
        cfg.run.seed,
        cfg.run.threads,
    )
    .map_err(core_err)?;

    let mut table = Table::new(&["level", "dt", "median_abs_error"]);
    for (l, (dt, err)) in study.dts.iter().zip(&study.median_errors).enumerate() {
        table.row(vec![l.to_string(), num(*dt), num(*err)]);
    }
    let mut dir = OutputDir::create(out_root).map_err(io_err)?;
    dir.write("oracle_check.tsv", &table.render()).map_err(io_err)?;

    let mut reps = Table::new(&["replica", "abs_error_at_horizon"]);
    for (r, e) in study.finest_errors.iter().enumerate() {
        reps.row(vec![r.to_string(), num(*e)]);
    }
    dir.write("oracle_replica_errors.tsv", &reps.render()).map_err(io_err)?;

    let mut quant = Table::new(&["knot", "min", "q25", "median", "q75", "max"]);
    for (knot, q) in &study.finest_knot_quantiles {
        quant.row(vec![
            knot.to_string(),
            num(q[0]),
            num(q[1]),
            num(q[2]),
            num(q[3]),
            num(q[4]),
        ]);
    }
    dir.write("oracle_quantiles.tsv", &quant.render()).map_err(io_err)?;

    let order_line = match (study.fit.exact, study.fit.order) {
        (true, _) => "order\texact\n".to_string(),
        (false, Some(o)) => format!("order\t{o}\norder_std_err\t{}\n", study.fit.std_err),
        (false, None) => "order\tnone\n".to_string(),
    };
    dir.write("oracle_order.tsv", &format!("quantity\tvalue\n{order_line}"))
        .map_err(io_err)?;
    dir.finish(cfg, "oracle-check", BTreeMap::new(), started.elapsed().as_millis() as u64)
        .map_err(io_err)?;
    Ok(BTreeMap::new())
}

pub fn run_w2_check(cfg: &SimConfig, out_root: &Path) -> Result<BTreeMap<String, usize>, CliError> {
    let started = Instant::now();
    let check = exp::wasserstein_check(cfg.run.seed).map_err(core_err)?;
    let mut table = Table::new(&["check", "instances", "max_abs_dev", "pass"]);
    table.row(vec![
        "quantile_vs_assignment_1d".into(),
        check.cross_method_instances.to_string(),
        num(check.max_cross_method_dev),
        (check.max_cross_method_dev <= 1e-12).to_string(),
    ]);
    table.row(vec![
        "assignment_vs_enumeration_2d".into(),
        check.enumeration_instances.to_string(),
        num(check.max_enumeration_dev),
        (check.max_enumeration_dev <= 1e-12).to_string(),
    ]);
    let mut dir = OutputDir::create(out_root).map_err(io_err)?;
    dir.write("w2_check.tsv", &table.render()).map_err(io_err)?;
    dir.finish(cfg, "w2-check", BTreeMap::new(), started.elapsed().as_millis() as u64)
        .map_err(io_err)?;
    if check.pass {
        Ok(BTreeMap::new())
    } else {
        Err(CliError::Numerical(format!(
            "wasserstein methods disagree: cross {:.3e}, enumeration {:.3e}",
            check.max_cross_method_dev, check.max_enumeration_dev
        )))
    }
}

pub fn run_probe_assumption(
    cfg: &SimConfig,
    out_root: &Path,
) -> Result<BTreeMap<String, usize>, CliError> {
    let started = Instant::now();
    let cset = cfg.coefficient_set().map_err(CliError::Validation)?;
    let d = cset.dim_state();
    let n_probe = 7usize;
    let mut points = Vec::with_capacity(n_probe);
    for i in 0..n_probe {
        let frac = i as f64 / (n_probe - 1) as f64;
        let v = cfg.grid.min + (cfg.grid.max - cfg.grid.min) * frac;
        points.push(Vect::from_slice(&vec![v; d]));
    }
    let rng = CounterRng::new(cfg.run.seed);
    let mut measures = Vec::new();
    for t in 0..3u64 {
        let atoms: Vec<Vect> = (0..8)
            .map(|i| {
                Vect::from_slice(
                    &(0..d)
                        .map(|a| rng.normal(t * 100 + i, a as u64))
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        measures.push(EmpiricalMeasure::uniform(atoms).map_err(core_err)?);
    }
    let report = probe_assumption(&cset, &points, &measures).map_err(core_err)?;

    let mut table = Table::new(&["quantity", "value"]);
    table.row(vec!["sup_dx".into(), num(report.sup_dx)]);
    table.row(vec!["sup_dmu".into(), num(report.sup_dmu)]);
    table.row(vec!["lipschitz_dx".into(), num(report.lipschitz_dx)]);
    table.row(vec!["lipschitz_dmu".into(), num(report.lipschitz_dmu)]);
    table.row(vec!["declared_bound".into(), num(report.declared_bound)]);
    table.row(vec!["violated".into(), report.violated.to_string()]);
    let mut dir = OutputDir::create(out_root).map_err(io_err)?;
    dir.write("assumption_probe.tsv", &table.render()).map_err(io_err)?;
    dir.finish(cfg, "probe-assumption", BTreeMap::new(), started.elapsed().as_millis() as u64)
        .map_err(io_err)?;
    if report.violated {
        eprintln!(
            "warning: probe estimates exceed the declared bound {} (sup_dx {}, sup_dmu {})",
            report.declared_bound, report.sup_dx, report.sup_dmu
        );
    }
    Ok(BTreeMap::new())
}
