//! Truncated inverse flow on the stored field, and the two-sided composition
//! check that realizes the local-inverse identity.
//!
//! The inverse trajectory solves, on the same physical increments that drove
//! the forward field,
//!
//! ```text
//! dPsi = -J(Psi)^{-1} V_k(Phi(Psi), law(Psi)) o dW^k     (k = 0..d')
//! ```
//!
//! in Ito-corrected form. All spatial evaluations interpolate the stored
//! field; the law argument is the precomputed law field read at the current
//! Psi value. The Ito correction has two parts: the spatial term
//! 1/2 (d_y c_k) c_k assembled by central finite differences of the composite
//! coefficient c_k(y) = J(y)^{-1} sigma_k(Phi(y), m(y)), and the covariation
//! of the random field itself, which reduces to 1/2 V H_k V sigma_k with H_k
//! the stored mean-field Jacobian term. (The dx sigma_k parts of the field
//! covariation cancel against the Jacobian's own noise coefficient; only the
//! mean-field part survives.)
//!
//! A trajectory is truncated (tau_bar_m) when the interpolated Jacobian
//! violates |J^{-1}|_F <= m, leaves the grid box, or goes non-finite. The
//! trajectory is integrated once under the largest ladder threshold; smaller
//! thresholds only shorten the reported failure knots, since the paths agree
//! before the first violation.

use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::grid::SpatialGrid;
use crate::linalg::{Mat, Vect};
use crate::paths::BrownianPaths;
use crate::stopping::jacobian_inverse;

/// Interpolated field values at one spatial point.
#[derive(Clone, Debug)]
pub struct FieldSample {
    pub phi: Vect,
    pub jac: Mat,
    pub moments: Vec<f64>,
    pub mf_rows: Vec<Vect>,
}

/// Piecewise-multilinear interpolation of the stored field, exact at nodes.
/// Supports d <= 2.
pub fn interpolate_flow(field: &FlowField, knot: usize, y: &Vect) -> Result<FieldSample> {
    let grid = field.grid();
    if grid.dim() > 2 {
        return Err(Error::Capability(
            "the built-in interpolator supports d <= 2".into(),
        ));
    }
    if !grid.contains(y) {
        return Err(Error::OutOfDomain { knot });
    }
    let d = grid.dim();
    let mut idx0 = [0usize; 2];
    let mut frac = [0.0f64; 2];
    for a in 0..d {
        let (i, f) = grid.cell(a, y.get(a));
        idx0[a] = i;
        frac[a] = f;
    }
    let n_stats = field.n_stats();
    let mut phi = Vect::zeros(field.dim());
    let mut jac = Mat::zeros(field.dim());
    let mut moments = vec![0.0; n_stats];
    let mut mf_rows = vec![Vect::zeros(field.dim()); n_stats];
    let corners = 1usize << d;
    for c in 0..corners {
        let mut w = 1.0;
        let mut ii = [0usize; 2];
        for a in 0..d {
            let bit = (c >> a) & 1;
            let n_a = grid.points_per_axis(a);
            let idx = (idx0[a] + bit).min(n_a - 1);
            ii[a] = idx;
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if w == 0.0 {
            continue;
        }
        let g = grid.flat_index(&ii[..d]);
        phi.axpy(w, field.phi(knot, g));
        jac.axpy(w, field.jac(knot, g));
        for q in 0..n_stats {
            moments[q] += w * field.moments(knot, g)[q];
            mf_rows[q].axpy(w, field.mf_row(knot, g, q));
        }
    }
    Ok(FieldSample {
        phi,
        jac,
        moments,
        mf_rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureKind {
    OutOfBox,
    JacobianThreshold,
    NonFinite,
}

/// One inverse trajectory with its truncation ladder.
#[derive(Clone, Debug)]
pub struct InverseTrajectory {
    pub start: Vect,
    /// Psi value per knot, frozen after the failure knot.
    pub psi: Vec<Vect>,
    /// Whether the trajectory was still live at each knot.
    pub alive: Vec<bool>,
    /// |J^{-1}(Psi)|_F per live knot (0 after failure).
    pub inv_norm: Vec<f64>,
    pub failure_knot: Option<usize>,
    pub failure_kind: Option<FailureKind>,
    /// First violation knot per ladder threshold (ascending m).
    pub tau_bar_m: Vec<Option<usize>>,
    pub m_ladder: Vec<f64>,
}

impl InverseTrajectory {
    /// tau_bar(x): the largest-m failure knot.
    pub fn tau_bar(&self) -> Option<usize> {
        *self.tau_bar_m.last().unwrap_or(&self.failure_knot)
    }
}

#[derive(Clone, Debug)]
pub struct PsiSettings {
    /// Ascending truncation thresholds on |J^{-1}|_F.
    pub m_ladder: Vec<f64>,
    /// Central-difference step for the spatial correction, as a fraction of
    /// the grid spacing.
    pub fd_frac: f64,
    /// Replica whose increments drive the inverse integration.
    pub physical_replica: usize,
}

impl Default for PsiSettings {
    fn default() -> Self {
        PsiSettings {
            m_ladder: vec![2.0, 5.0, 10.0, 50.0],
            fd_frac: 0.49,
            physical_replica: 0,
        }
    }
}

/// Composite coefficient c_k(y) = J(y)^{-1} sigma_k(Phi(y), m(y)), for all k;
/// c[0] is built from the Stratonovich drift.
struct Composite {
    c: Vec<Vect>,
}

fn composite_at(
    field: &FlowField,
    cset: &CoefficientSet,
    knot: usize,
    y: &Vect,
) -> Result<Option<Composite>> {
    let sample = interpolate_flow(field, knot, y)?;
    let vy = match jacobian_inverse(&sample.jac) {
        Some(v) => v,
        None => return Ok(None),
    };
    let dn = cset.dim_noise();
    let mut c = Vec::with_capacity(dn + 1);
    c.push(vy.matvec(&cset.strat_drift_m(&sample.phi, &sample.moments)));
    for k in 1..=dn {
        c.push(vy.matvec(&cset.value_m(k, &sample.phi, &sample.moments)));
    }
    Ok(Some(Composite { c }))
}

/// Integrates the truncated inverse flow for one start point on the same
/// physical increments used by the forward field.
pub fn integrate_psi(
    field: &FlowField,
    cset: &CoefficientSet,
    paths: &BrownianPaths,
    x: &Vect,
    settings: &PsiSettings,
) -> Result<InverseTrajectory> {
    if !cset.is_moment_form() {
        return Err(Error::Capability(
            "inverse-flow integration needs a moment-form family (the law field is stored through its moments)".into(),
        ));
    }
    if settings.m_ladder.is_empty()
        || settings.m_ladder.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(Error::Config("m ladder must be nonempty and strictly increasing".into()));
    }
    if field.grid().dim() > 2 {
        return Err(Error::Capability("inverse-flow runs support d <= 2".into()));
    }
    let n_knots = field.n_knots();
    let n_steps = n_knots - 1;
    let dt = field.tgrid().dt();
    let m_max = *settings.m_ladder.last().unwrap();
    let d = field.dim();
    let dn = cset.dim_noise();
    let delta = settings.fd_frac
        * (0..field.grid().dim())
            .map(|a| field.grid().spacing(a))
            .filter(|h| *h > 0.0)
            .fold(f64::INFINITY, f64::min);
    if !delta.is_finite() {
        return Err(Error::Config("inverse-flow runs need a non-degenerate grid".into()));
    }

    let mut traj = InverseTrajectory {
        start: *x,
        psi: Vec::with_capacity(n_knots),
        alive: Vec::with_capacity(n_knots),
        inv_norm: Vec::with_capacity(n_knots),
        failure_knot: None,
        failure_kind: None,
        tau_bar_m: vec![None; settings.m_ladder.len()],
        m_ladder: settings.m_ladder.clone(),
    };

    let mut cur = *x;
    let mut dead: Option<(usize, FailureKind)> = None;
    for knot in 0..n_knots {
        if let Some((k0, _)) = dead {
            let _ = k0;
            traj.psi.push(cur);
            traj.alive.push(false);
            traj.inv_norm.push(0.0);
            continue;
        }
        // Evaluate at the current point; classify any failure at this knot.
        let sample = match interpolate_flow(field, knot, &cur) {
            Ok(s) => s,
            Err(Error::OutOfDomain { .. }) => {
                dead = Some((knot, FailureKind::OutOfBox));
                traj.psi.push(cur);
                traj.alive.push(false);
                traj.inv_norm.push(0.0);
                continue;
            }
            Err(e) => return Err(e),
        };
        let vy = match jacobian_inverse(&sample.jac) {
            Some(v) => v,
            None => {
                dead = Some((knot, FailureKind::JacobianThreshold));
                traj.psi.push(cur);
                traj.alive.push(false);
                traj.inv_norm.push(0.0);
                continue;
            }
        };
        let inv_norm = vy.frobenius();
        if inv_norm > m_max {
            dead = Some((knot, FailureKind::JacobianThreshold));
            traj.psi.push(cur);
            traj.alive.push(false);
            traj.inv_norm.push(inv_norm);
            continue;
        }
        traj.psi.push(cur);
        traj.alive.push(true);
        traj.inv_norm.push(inv_norm);
        if knot == n_steps {
            break;
        }

        // Ito-corrected Euler-Maruyama step.
        let dw = paths.increments_at(settings.physical_replica, knot);
        let c0 = vy.matvec(&cset.strat_drift_m(&sample.phi, &sample.moments));
        let mut next = cur;
        next.axpy(-dt, &c0);

        // Spatial correction by central differences of the composite field;
        // one-sided at the box edge, dropped if no neighbor is usable.
        for k in 1..=dn {
            let sk = cset.value_m(k, &sample.phi, &sample.moments);
            let ck = vy.matvec(&sk);
            next.axpy(-dw[k - 1], &ck);

            let mut dck = Mat::zeros(d);
            let mut have_fd = true;
            for a in 0..d {
                let mut yp = cur;
                yp.set(a, cur.get(a) + delta);
                let mut ym = cur;
                ym.set(a, cur.get(a) - delta);
                let cp = composite_at(field, cset, knot, &yp).ok().flatten();
                let cm = composite_at(field, cset, knot, &ym).ok().flatten();
                let col = match (cp, cm) {
                    (Some(p), Some(m2)) => p.c[k].sub(&m2.c[k]).scale(1.0 / (2.0 * delta)),
                    (Some(p), None) => p.c[k].sub(&ck).scale(1.0 / delta),
                    (None, Some(m2)) => ck.sub(&m2.c[k]).scale(1.0 / delta),
                    (None, None) => {
                        have_fd = false;
                        break;
                    }
                };
                for i in 0..d {
                    dck.set(i, a, col.get(i));
                }
            }
            if have_fd {
                next.axpy(0.5 * dt, &dck.matvec(&ck));
            }

            // Field covariation: the surviving mean-field part.
            let mut hk = Mat::zeros(d);
            for q in 0..field.n_stats() {
                let col = cset.dm_partial(k, &sample.phi, &sample.moments, q);
                hk = hk.add(&Mat::outer(&col, &sample.mf_rows[q]));
            }
            next.axpy(0.5 * dt, &vy.matvec(&hk.matvec(&vy.matvec(&sk))));
        }

        if !next.is_finite() {
            dead = Some((knot + 1, FailureKind::NonFinite));
        }
        cur = next;
    }

    if let Some((k, kind)) = dead {
        traj.failure_knot = Some(k);
        traj.failure_kind = Some(kind);
    }
    // Ladder failure knots: first violation of each threshold, merged with
    // the integration failure. Paths under smaller thresholds coincide with
    // this one before their first violation.
    for (mi, &m) in settings.m_ladder.iter().enumerate() {
        let mut hit = traj.failure_knot;
        for knot in 0..traj.psi.len() {
            if traj.alive[knot] && traj.inv_norm[knot] > m {
                hit = Some(hit.map_or(knot, |h| h.min(knot)));
                break;
            }
        }
        traj.tau_bar_m[mi] = hit;
    }

    Ok(traj)
}

/// Interpolates a per-grid-point vector field (the stored Psi trajectories)
/// at an arbitrary point; fails if any contributing corner is dead.
fn interpolate_point_field(
    grid: &SpatialGrid,
    value: &dyn Fn(usize) -> Option<Vect>,
    y: &Vect,
) -> Option<Vect> {
    if !grid.contains(y) {
        return None;
    }
    let d = grid.dim();
    let mut idx0 = [0usize; 2];
    let mut frac = [0.0f64; 2];
    for a in 0..d {
        let (i, f) = grid.cell(a, y.get(a));
        idx0[a] = i;
        frac[a] = f;
    }
    let mut out: Option<Vect> = None;
    for c in 0..(1usize << d) {
        let mut w = 1.0;
        let mut ii = [0usize; 2];
        for a in 0..d {
            let bit = (c >> a) & 1;
            let idx = (idx0[a] + bit).min(grid.points_per_axis(a) - 1);
            ii[a] = idx;
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if w == 0.0 {
            continue;
        }
        let v = value(grid.flat_index(&ii[..d]))?;
        match out.as_mut() {
            None => out = Some(v.scale(w)),
            Some(acc) => acc.axpy(w, &v),
        }
    }
    out
}

/// Residual report of the two-sided composition identity.
#[derive(Clone, Debug)]
pub struct TwoSidedReport {
    /// sup over live knots of |Phi_t(Psi_t(x)) - x| per grid point.
    pub left_residual: Vec<f64>,
    /// sup over live knots of |Psi_t(Phi_t(x)) - x| per grid point.
    pub right_residual: Vec<f64>,
    pub tau_bar: Vec<Option<usize>>,
    pub tau_bar_prime: Vec<Option<usize>>,
    /// tau(s, x) = min(tau_bar, tau_bar').
    pub tau: Vec<Option<usize>>,
    pub max_left: f64,
    pub max_right: f64,
}

/// Measures both composition residuals on the same physical path. The
/// trajectories must be indexed like the field's grid points. The backward
/// failure time tau_bar' is realized as the first knot where the Psi field
/// can no longer be evaluated along the forward trajectory (out of box or a
/// dead interpolation corner).
pub fn verify_two_sided(field: &FlowField, trajectories: &[InverseTrajectory]) -> TwoSidedReport {
    let n_grid = field.grid().n_points();
    assert_eq!(trajectories.len(), n_grid, "one trajectory per grid point");
    let n_knots = field.n_knots();

    let mut report = TwoSidedReport {
        left_residual: vec![0.0; n_grid],
        right_residual: vec![0.0; n_grid],
        tau_bar: trajectories.iter().map(|t| t.tau_bar()).collect(),
        tau_bar_prime: vec![None; n_grid],
        tau: vec![None; n_grid],
        max_left: 0.0,
        max_right: 0.0,
    };

    for g in 0..n_grid {
        let x = field.grid().point(g);
        let traj = &trajectories[g];
        let mut sup = 0.0f64;
        for knot in 0..n_knots {
            if !traj.alive[knot] {
                break;
            }
            if let Ok(sample) = interpolate_flow(field, knot, &traj.psi[knot]) {
                sup = sup.max(sample.phi.sub(&x).norm());
            }
        }
        report.left_residual[g] = sup;
    }

    for g in 0..n_grid {
        let x = field.grid().point(g);
        let mut sup = 0.0f64;
        let mut tbp = None;
        for knot in 0..n_knots {
            let phi = field.phi(knot, g);
            let psi_at = interpolate_point_field(
                field.grid(),
                &|gp: usize| {
                    trajectories[gp].alive[knot].then(|| trajectories[gp].psi[knot])
                },
                phi,
            );
            match psi_at {
                Some(v) => sup = sup.max(v.sub(&x).norm()),
                None => {
                    tbp = Some(knot);
                    break;
                }
            }
        }
        report.right_residual[g] = sup;
        report.tau_bar_prime[g] = tbp;
        report.tau[g] = match (report.tau_bar[g], tbp) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (Some(a), None) => Some(a),
            (None, b) => b,
        };
    }

    report.max_left = report.left_residual.iter().cloned().fold(0.0, f64::max);
    report.max_right = report.right_residual.iter().cloned().fold(0.0, f64::max);
    report
}
