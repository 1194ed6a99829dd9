//! Measure-dependent coefficient families with spatial and Lions derivatives.
//!
//! The canonical internal convention is Ito: Stratonovich inputs are converted
//! at construction via the drift correction V0' = V0 + 1/2 sum_k dxVk Vk, so
//! the integrator has a single code path.
//!
//! Built-in families are restricted to moment form V(x, mu) = v(x, m(mu)) with
//! m_j = int h_j dmu, which makes every Lions derivative analytic through the
//! chain rule dmuV(x, mu, y) = sum_j dv/dm_j (x, m) (x) grad h_j(y). Fully
//! general coefficients are accepted, but their dmu evaluators must be
//! supplied by the caller; no differentiation of measure functionals is
//! attempted for them.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vect};
use crate::measure::{w2_1d, w2_exact_small, EmpiricalMeasure};

/// Relative step for central finite differences of coefficient evaluators.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Convention {
    Ito,
    StratonovichConverted,
}

pub type ScalarFn = Arc<dyn Fn(&Vect) -> f64 + Send + Sync>;
pub type GradFn = Arc<dyn Fn(&Vect) -> Vect + Send + Sync>;
pub type MomentValueFn = Arc<dyn Fn(&Vect, &[f64]) -> Vect + Send + Sync>;
pub type MomentDxFn = Arc<dyn Fn(&Vect, &[f64]) -> Mat + Send + Sync>;
pub type MomentDmFn = Arc<dyn Fn(&Vect, &[f64], usize) -> Vect + Send + Sync>;

/// One statistic h_j: R^d -> R through which the measure enters.
#[derive(Clone)]
pub struct Stat {
    pub h: ScalarFn,
    pub dh: GradFn,
}

impl Stat {
    /// The mean coordinate h(z) = z_i.
    pub fn coordinate(i: usize, dim: usize) -> Stat {
        Stat {
            h: Arc::new(move |z: &Vect| z.get(i)),
            dh: Arc::new(move |_z: &Vect| {
                let mut g = Vect::zeros(dim);
                g.set(i, 1.0);
                g
            }),
        }
    }
}

/// Outer function v(x, m) of one coefficient in moment form, with partials.
#[derive(Clone)]
pub struct MomentCoeff {
    pub value: MomentValueFn,
    pub dx: MomentDxFn,
    /// dv/dm_q as a column vector.
    pub dm: MomentDmFn,
}

/// Analytic second-derivative hooks used by the Stratonovich drift correction.
#[derive(Clone)]
pub struct SecondDerivs {
    /// Contraction of the spatial Hessian with a vector:
    /// out_{ij} = sum_l d2 v^i / dx_j dx_l * u_l.
    pub d2x_contract: Arc<dyn Fn(&Vect, &[f64], &Vect) -> Mat + Send + Sync>,
    /// d/dm_q of the spatial derivative matrix dx v.
    pub dm_dx: Arc<dyn Fn(&Vect, &[f64], usize) -> Mat + Send + Sync>,
}

/// Moment-form specification: statistics plus outer functions, drift first.
#[derive(Clone)]
pub struct MomentFormSpec {
    pub dim_state: usize,
    pub stats: Vec<Stat>,
    /// coeffs[0] is the drift, coeffs[k] for k >= 1 the k-th diffusion.
    pub coeffs: Vec<MomentCoeff>,
}

/// Raw Stratonovich family awaiting conversion.
pub struct RawStratFamily {
    pub dim_state: usize,
    pub stats: Vec<Stat>,
    pub v0: MomentCoeff,
    pub diffusions: Vec<MomentCoeff>,
    /// Per-diffusion second derivatives; None selects the finite-difference
    /// assembly of the corrected drift's derivatives.
    pub second: Option<Vec<SecondDerivs>>,
}

/// A fully general coefficient with caller-supplied Lions derivative.
pub struct GeneralCoeff {
    pub value: Arc<dyn Fn(&Vect, &EmpiricalMeasure) -> Vect + Send + Sync>,
    pub dx: Arc<dyn Fn(&Vect, &EmpiricalMeasure) -> Mat + Send + Sync>,
    pub dmu: Arc<dyn Fn(&Vect, &EmpiricalMeasure, &Vect) -> Mat + Send + Sync>,
}

enum Form {
    Moment {
        stats: Vec<Stat>,
        coeffs: Vec<MomentCoeff>,
        raw_v0: Option<MomentCoeff>,
    },
    General {
        coeffs: Vec<GeneralCoeff>,
    },
}

/// The drift/diffusion family in canonical Ito form.
pub struct CoefficientSet {
    dim_state: usize,
    dim_noise: usize,
    convention: Convention,
    lipschitz_bound: f64,
    form: Form,
}

impl CoefficientSet {
    /// Builds an Ito-convention set from a moment-form specification.
    pub fn from_moment_form(
        spec: MomentFormSpec,
        lipschitz_bound: f64,
    ) -> Result<CoefficientSet> {
        if spec.coeffs.is_empty() {
            return Err(Error::Config("need a drift and at least zero diffusions".into()));
        }
        let set = CoefficientSet {
            dim_state: spec.dim_state,
            dim_noise: spec.coeffs.len() - 1,
            convention: Convention::Ito,
            lipschitz_bound,
            form: Form::Moment {
                stats: spec.stats,
                coeffs: spec.coeffs,
                raw_v0: None,
            },
        };
        set.check_dims()?;
        Ok(set)
    }

    /// Builds an Ito-convention set from general evaluators (drift first).
    pub fn general(
        dim_state: usize,
        coeffs: Vec<GeneralCoeff>,
        lipschitz_bound: f64,
    ) -> Result<CoefficientSet> {
        if coeffs.is_empty() {
            return Err(Error::Config("need a drift and at least zero diffusions".into()));
        }
        Ok(CoefficientSet {
            dim_state,
            dim_noise: coeffs.len() - 1,
            convention: Convention::Ito,
            lipschitz_bound,
            form: Form::General { coeffs },
        })
    }

    fn check_dims(&self) -> Result<()> {
        let x = Vect::zeros(self.dim_state);
        if let Form::Moment { stats, coeffs, .. } = &self.form {
            let m = vec![0.0; stats.len()];
            for (k, c) in coeffs.iter().enumerate() {
                let v = (c.value)(&x, &m);
                if v.dim() != self.dim_state {
                    return Err(Error::DimensionMismatch {
                        context: if k == 0 { "drift output" } else { "diffusion output" },
                        expected: self.dim_state,
                        got: v.dim(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    pub fn convention(&self) -> Convention {
        self.convention
    }

    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz_bound
    }

    pub fn is_moment_form(&self) -> bool {
        matches!(self.form, Form::Moment { .. })
    }

    pub fn n_stats(&self) -> usize {
        match &self.form {
            Form::Moment { stats, .. } => stats.len(),
            Form::General { .. } => 0,
        }
    }

    pub fn stats(&self) -> &[Stat] {
        match &self.form {
            Form::Moment { stats, .. } => stats,
            Form::General { .. } => &[],
        }
    }

    /// Moment vector of a measure under this family's statistics,
    /// accumulated in fixed atom order.
    pub fn measure_moments(&self, mu: &EmpiricalMeasure) -> Result<Vec<f64>> {
        match &self.form {
            Form::Moment { stats, .. } => {
                let mut out = Vec::with_capacity(stats.len());
                for s in stats {
                    let mut acc = 0.0;
                    for (i, (z, w)) in mu.atoms().iter().zip(mu.weights()).enumerate() {
                        let v = (s.h)(z);
                        if !v.is_finite() {
                            return Err(Error::MeasureCorruption { atom: i });
                        }
                        acc += w * v;
                    }
                    out.push(acc);
                }
                Ok(out)
            }
            Form::General { .. } => Ok(Vec::new()),
        }
    }

    // ---- moment-form fast path (hot loop) -------------------------------

    #[inline]
    pub fn value_m(&self, k: usize, x: &Vect, m: &[f64]) -> Vect {
        match &self.form {
            Form::Moment { coeffs, .. } => (coeffs[k].value)(x, m),
            Form::General { .. } => panic!("moment-form evaluation on a general coefficient set"),
        }
    }

    #[inline]
    pub fn dx_m(&self, k: usize, x: &Vect, m: &[f64]) -> Mat {
        match &self.form {
            Form::Moment { coeffs, .. } => (coeffs[k].dx)(x, m),
            Form::General { .. } => panic!("moment-form evaluation on a general coefficient set"),
        }
    }

    #[inline]
    pub fn dm_partial(&self, k: usize, x: &Vect, m: &[f64], q: usize) -> Vect {
        match &self.form {
            Form::Moment { coeffs, .. } => (coeffs[k].dm)(x, m, q),
            Form::General { .. } => panic!("moment-form evaluation on a general coefficient set"),
        }
    }

    /// Lions derivative at atom y, assembled by the moment-form chain rule.
    pub fn dmu_m(&self, k: usize, x: &Vect, m: &[f64], y: &Vect) -> Mat {
        match &self.form {
            Form::Moment { stats, coeffs, .. } => {
                let mut out = Mat::zeros(self.dim_state);
                for (q, s) in stats.iter().enumerate() {
                    let col = (coeffs[k].dm)(x, m, q);
                    let row = (s.dh)(y);
                    out = out.add(&Mat::outer(&col, &row));
                }
                out
            }
            Form::General { .. } => panic!("moment-form evaluation on a general coefficient set"),
        }
    }

    // ---- measure-level interface ----------------------------------------

    pub fn value(&self, k: usize, x: &Vect, mu: &EmpiricalMeasure) -> Result<Vect> {
        match &self.form {
            Form::Moment { .. } => {
                let m = self.measure_moments(mu)?;
                Ok(self.value_m(k, x, &m))
            }
            Form::General { coeffs } => Ok((coeffs[k].value)(x, mu)),
        }
    }

    pub fn dx(&self, k: usize, x: &Vect, mu: &EmpiricalMeasure) -> Result<Mat> {
        match &self.form {
            Form::Moment { .. } => {
                let m = self.measure_moments(mu)?;
                Ok(self.dx_m(k, x, &m))
            }
            Form::General { coeffs } => Ok((coeffs[k].dx)(x, mu)),
        }
    }

    pub fn dmu(&self, k: usize, x: &Vect, mu: &EmpiricalMeasure, y: &Vect) -> Result<Mat> {
        match &self.form {
            Form::Moment { .. } => {
                let m = self.measure_moments(mu)?;
                Ok(self.dmu_m(k, x, &m, y))
            }
            Form::General { coeffs } => Ok((coeffs[k].dmu)(x, mu, y)),
        }
    }

    pub fn drift(&self, x: &Vect, mu: &EmpiricalMeasure) -> Result<Vect> {
        self.value(0, x, mu)
    }

    pub fn diffusion(&self, k: usize, x: &Vect, mu: &EmpiricalMeasure) -> Result<Vect> {
        self.value(k, x, mu)
    }

    /// Raw Stratonovich drift value, retained through conversion.
    pub fn raw_v0_m(&self, x: &Vect, m: &[f64]) -> Option<Vect> {
        match &self.form {
            Form::Moment { raw_v0: Some(v0), .. } => Some((v0.value)(x, m)),
            _ => None,
        }
    }

    /// Stratonovich drift of the canonical Ito family:
    /// V0_strat = b - 1/2 sum_k dx sigma_k sigma_k. For converted sets this
    /// recovers the raw V0 up to the correction's own rounding.
    pub fn strat_drift_m(&self, x: &Vect, m: &[f64]) -> Vect {
        let mut b = self.value_m(0, x, m);
        for k in 1..=self.dim_noise {
            let sk = self.value_m(k, x, m);
            b.axpy(-0.5, &self.dx_m(k, x, m).matvec(&sk));
        }
        b
    }
}

/// Converts a Stratonovich family to canonical Ito form:
/// drift = V0 + 1/2 sum_k dxVk Vk, diffusions unchanged, raw V0 retained.
///
/// Derivatives of the corrected drift use the analytic second-derivative
/// hooks when supplied and central finite differences of the corrected value
/// otherwise (step FD_STEP * scale).
pub fn strat_to_ito(raw: RawStratFamily, lipschitz_bound: f64) -> Result<CoefficientSet> {
    let dim = raw.dim_state;
    // Raw outputs must live in R^d before they are mixed by the correction.
    let probe_x = Vect::zeros(dim);
    let probe_m = vec![0.0; raw.stats.len()];
    for (k, c) in std::iter::once(&raw.v0).chain(raw.diffusions.iter()).enumerate() {
        let got = (c.value)(&probe_x, &probe_m).dim();
        if got != dim {
            return Err(Error::DimensionMismatch {
                context: if k == 0 { "raw drift output" } else { "raw diffusion output" },
                expected: dim,
                got,
            });
        }
    }
    let diffs = Arc::new(raw.diffusions.clone());
    let v0 = raw.v0.clone();

    let corrected_value: MomentValueFn = {
        let diffs = diffs.clone();
        let v0v = v0.value.clone();
        Arc::new(move |x: &Vect, m: &[f64]| {
            let mut b = v0v(x, m);
            for c in diffs.iter() {
                b.axpy(0.5, &(c.dx)(x, m).matvec(&(c.value)(x, m)));
            }
            b
        })
    };

    let corrected_dx: MomentDxFn = match &raw.second {
        Some(secs) => {
            let diffs = diffs.clone();
            let secs = Arc::new(secs.clone());
            let v0dx = v0.dx.clone();
            Arc::new(move |x: &Vect, m: &[f64]| {
                let mut out = v0dx(x, m);
                for (c, s) in diffs.iter().zip(secs.iter()) {
                    let sk = (c.value)(x, m);
                    let dxk = (c.dx)(x, m);
                    out.axpy(0.5, &(s.d2x_contract)(x, m, &sk));
                    out.axpy(0.5, &dxk.matmul(&dxk));
                }
                out
            })
        }
        None => fd_dx(corrected_value.clone(), dim),
    };

    let corrected_dm: MomentDmFn = match &raw.second {
        Some(secs) => {
            let diffs = diffs.clone();
            let secs = Arc::new(secs.clone());
            let v0dm = v0.dm.clone();
            Arc::new(move |x: &Vect, m: &[f64], q: usize| {
                let mut out = v0dm(x, m, q);
                for (c, s) in diffs.iter().zip(secs.iter()) {
                    let sk = (c.value)(x, m);
                    out.axpy(0.5, &(s.dm_dx)(x, m, q).matvec(&sk));
                    out.axpy(0.5, &(c.dx)(x, m).matvec(&(c.dm)(x, m, q)));
                }
                out
            })
        }
        None => fd_dm(corrected_value.clone()),
    };

    let mut coeffs = Vec::with_capacity(raw.diffusions.len() + 1);
    coeffs.push(MomentCoeff {
        value: corrected_value,
        dx: corrected_dx,
        dm: corrected_dm,
    });
    coeffs.extend(raw.diffusions);

    let set = CoefficientSet {
        dim_state: dim,
        dim_noise: coeffs.len() - 1,
        convention: Convention::StratonovichConverted,
        lipschitz_bound,
        form: Form::Moment {
            stats: raw.stats,
            coeffs,
            raw_v0: Some(v0),
        },
    };
    set.check_dims()?;
    Ok(set)
}

fn fd_dx(value: MomentValueFn, dim: usize) -> MomentDxFn {
    Arc::new(move |x: &Vect, m: &[f64]| {
        let mut out = Mat::zeros(dim);
        for j in 0..dim {
            let scale = x.get(j).abs().max(1.0);
            let step = FD_STEP * scale;
            let mut xp = *x;
            xp.set(j, x.get(j) + step);
            let mut xm = *x;
            xm.set(j, x.get(j) - step);
            let diff = value(&xp, m).sub(&value(&xm, m)).scale(1.0 / (2.0 * step));
            for i in 0..dim {
                out.set(i, j, diff.get(i));
            }
        }
        out
    })
}

fn fd_dm(value: MomentValueFn) -> MomentDmFn {
    Arc::new(move |x: &Vect, m: &[f64], q: usize| {
        let scale = m[q].abs().max(1.0);
        let step = FD_STEP * scale;
        let mut mp = m.to_vec();
        mp[q] += step;
        let mut mm = m.to_vec();
        mm[q] -= step;
        value(x, &mp).sub(&value(x, &mm)).scale(1.0 / (2.0 * step))
    })
}

// ---- Lions-derivative probe -------------------------------------------

/// Report of one lift finite-difference probe.
#[derive(Clone, Debug)]
pub struct LionsProbe {
    pub difference_quotient: Vect,
    pub pairing: Vect,
    pub discrepancy: f64,
}

/// Compares [V(x, mu_eps) - V(x, mu)] / eps against the lift pairing
/// (1/N) sum_i dmuV(x, mu, z_i) g(z_i), where mu_eps shifts atom z_i by
/// eps g(z_i). The discrepancy must be O(eps) for moment-form coefficients.
pub fn verify_lions_derivative(
    cset: &CoefficientSet,
    k: usize,
    mu: &EmpiricalMeasure,
    x: &Vect,
    direction: &dyn Fn(&Vect) -> Vect,
    eps: f64,
) -> Result<LionsProbe> {
    if mu.len() < 2 {
        return Err(Error::Config("lions probe needs at least 2 atoms".into()));
    }
    if eps <= 0.0 {
        return Err(Error::Config("lions probe needs eps > 0".into()));
    }
    let mut shifted = Vec::with_capacity(mu.len());
    for (i, z) in mu.atoms().iter().enumerate() {
        let g = direction(z);
        let zi = z.add(&g.scale(eps));
        if !zi.is_finite() {
            return Err(Error::ProbeFailure { atom: i });
        }
        shifted.push(zi);
    }
    let mu_eps = EmpiricalMeasure::weighted(shifted, mu.weights().to_vec())?;
    let base = cset.value(k, x, mu)?;
    let bumped = cset.value(k, x, &mu_eps)?;
    if !bumped.is_finite() || !base.is_finite() {
        return Err(Error::ProbeFailure { atom: 0 });
    }
    let dq = bumped.sub(&base).scale(1.0 / eps);

    let mut pairing = Vect::zeros(cset.dim_state());
    for (i, z) in mu.atoms().iter().enumerate() {
        let dmu = cset.dmu(k, x, mu, z)?;
        if !dmu.is_finite() {
            return Err(Error::ProbeFailure { atom: i });
        }
        pairing.axpy(mu.weights()[i], &dmu.matvec(&direction(z)));
    }
    let discrepancy = dq.sub(&pairing).norm();
    Ok(LionsProbe {
        difference_quotient: dq,
        pairing,
        discrepancy,
    })
}

// ---- Assumption probe ---------------------------------------------------

/// Probe-based estimate of the boundedness/Lipschitz constants.
/// All matrix norms are Frobenius.
#[derive(Clone, Debug)]
pub struct AssumptionReport {
    pub sup_dx: f64,
    pub sup_dmu: f64,
    pub lipschitz_dx: f64,
    pub lipschitz_dmu: f64,
    pub declared_bound: f64,
    pub violated: bool,
}

/// Estimates sup |dxVk|, sup |dmuVk| and difference quotients over all probe
/// pairs; flags (but never aborts on) violations of the declared bound.
pub fn probe_assumption(
    cset: &CoefficientSet,
    points: &[Vect],
    measures: &[EmpiricalMeasure],
) -> Result<AssumptionReport> {
    if points.is_empty() || measures.is_empty() {
        return Err(Error::Config("assumption probe needs nonempty probe sets".into()));
    }
    let mut sup_dx: f64 = 0.0;
    let mut sup_dmu: f64 = 0.0;
    let mut lip_dx: f64 = 0.0;
    let mut lip_dmu: f64 = 0.0;

    let w2 = |a: &EmpiricalMeasure, b: &EmpiricalMeasure| -> Result<f64> {
        if a.dim() == 1 {
            w2_1d(a, b)
        } else {
            w2_exact_small(a, b)
        }
    };

    for k in 0..=cset.dim_noise() {
        for (pi, x) in points.iter().enumerate() {
            for (mi, mu) in measures.iter().enumerate() {
                let dx = cset.dx(k, x, mu)?;
                sup_dx = sup_dx.max(dx.frobenius());
                for y in mu.atoms() {
                    sup_dmu = sup_dmu.max(cset.dmu(k, x, mu, y)?.frobenius());
                }
                for (pj, x2) in points.iter().enumerate() {
                    for (mj, mu2) in measures.iter().enumerate() {
                        if (pj, mj) <= (pi, mi) {
                            continue;
                        }
                        let dist = x.sub(x2).norm() + w2(mu, mu2)?;
                        if dist < 1e-12 {
                            continue;
                        }
                        let q = cset.dx(k, x, mu)?.sub(&cset.dx(k, x2, mu2)?).frobenius() / dist;
                        lip_dx = lip_dx.max(q);
                        for (y, y2) in mu.atoms().iter().zip(mu2.atoms()) {
                            let dd = dist + y.sub(y2).norm();
                            let q2 = cset
                                .dmu(k, x, mu, y)?
                                .sub(&cset.dmu(k, x2, mu2, y2)?)
                                .frobenius()
                                / dd;
                            lip_dmu = lip_dmu.max(q2);
                        }
                    }
                }
            }
        }
    }

    let bound = cset.lipschitz_bound();
    Ok(AssumptionReport {
        sup_dx,
        sup_dmu,
        lipschitz_dx: lip_dx,
        lipschitz_dmu: lip_dmu,
        declared_bound: bound,
        violated: sup_dx > bound || sup_dmu > bound || lip_dx > bound || lip_dmu > bound,
    })
}
