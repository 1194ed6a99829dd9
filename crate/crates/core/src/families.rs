//! Built-in coefficient families.
//!
//! Everything here is in moment form, so the Lions derivatives are exact.
//! `custom` keys name compiled-in families used by tests and demos.

use std::sync::Arc;

use crate::coefficients::{
    strat_to_ito, CoefficientSet, MomentCoeff, MomentFormSpec, RawStratFamily, SecondDerivs, Stat,
};
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vect};

/// The function f in the mean-interaction example family.
#[derive(Clone, Copy, Debug)]
pub enum F46 {
    Identity,
    Tanh { a: f64 },
}

impl F46 {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            F46::Identity => x,
            F46::Tanh { a } => (a * x).tanh(),
        }
    }

    pub fn deriv(&self, x: f64) -> f64 {
        match self {
            F46::Identity => 1.0,
            F46::Tanh { a } => {
                let t = (a * x).tanh();
                a * (1.0 - t * t)
            }
        }
    }
}

/// Zero drift and diffusion: the flow is the identity.
pub fn zero(dim_state: usize, dim_noise: usize) -> CoefficientSet {
    let mut coeffs = Vec::with_capacity(dim_noise + 1);
    for _ in 0..=dim_noise {
        coeffs.push(MomentCoeff {
            value: Arc::new(move |x: &Vect, _m: &[f64]| Vect::zeros(x.dim())),
            dx: Arc::new(move |x: &Vect, _m: &[f64]| Mat::zeros(x.dim())),
            dm: Arc::new(move |x: &Vect, _m: &[f64], _q: usize| Vect::zeros(x.dim())),
        });
    }
    CoefficientSet::from_moment_form(
        MomentFormSpec {
            dim_state,
            stats: Vec::new(),
            coeffs,
        },
        1.0,
    )
    .expect("zero family is well-formed")
}

/// 1-d mean-interaction family (Ito form):
/// drift = f(x) - mean(mu), diffusion = x - mean(mu).
pub fn example46(f: F46) -> CoefficientSet {
    let drift = MomentCoeff {
        value: Arc::new(move |x: &Vect, m: &[f64]| Vect::scalar(f.eval(x.x()) - m[0])),
        dx: Arc::new(move |x: &Vect, _m: &[f64]| Mat::scalar(f.deriv(x.x()))),
        dm: Arc::new(move |_x: &Vect, _m: &[f64], _q: usize| Vect::scalar(-1.0)),
    };
    let diffusion = MomentCoeff {
        value: Arc::new(move |x: &Vect, m: &[f64]| Vect::scalar(x.x() - m[0])),
        dx: Arc::new(move |_x: &Vect, _m: &[f64]| Mat::scalar(1.0)),
        dm: Arc::new(move |_x: &Vect, _m: &[f64], _q: usize| Vect::scalar(-1.0)),
    };
    let bound = match f {
        F46::Identity => 1.0,
        F46::Tanh { a } => a.abs().max(1.0),
    };
    CoefficientSet::from_moment_form(
        MomentFormSpec {
            dim_state: 1,
            stats: vec![Stat::coordinate(0, 1)],
            coeffs: vec![drift, diffusion],
        },
        bound,
    )
    .expect("example46 family is well-formed")
}

/// One affine diffusion row: delta * x + eps * mean + zeta.
#[derive(Clone, Copy, Debug)]
pub struct LinearRow {
    pub x: f64,
    pub mean: f64,
    pub cons: f64,
}

/// 1-d affine family with mean interaction (Ito form):
/// drift = a x + b mean + c, diffusion_k from `rows`.
#[derive(Clone, Debug)]
pub struct MomentLinear {
    pub drift_x: f64,
    pub drift_mean: f64,
    pub drift_const: f64,
    pub rows: Vec<LinearRow>,
}

pub fn moment_linear(p: &MomentLinear) -> Result<CoefficientSet> {
    if p.rows.is_empty() {
        return Err(Error::Config("moment_linear needs at least one diffusion row".into()));
    }
    let (a, b, c) = (p.drift_x, p.drift_mean, p.drift_const);
    let mut coeffs = vec![MomentCoeff {
        value: Arc::new(move |x: &Vect, m: &[f64]| Vect::scalar(a * x.x() + b * m[0] + c)),
        dx: Arc::new(move |_x: &Vect, _m: &[f64]| Mat::scalar(a)),
        dm: Arc::new(move |_x: &Vect, _m: &[f64], _q: usize| Vect::scalar(b)),
    }];
    let mut bound: f64 = a.abs() + b.abs();
    for row in &p.rows {
        let LinearRow { x: dx, mean: dm, cons } = *row;
        coeffs.push(MomentCoeff {
            value: Arc::new(move |x: &Vect, m: &[f64]| Vect::scalar(dx * x.x() + dm * m[0] + cons)),
            dx: Arc::new(move |_x: &Vect, _m: &[f64]| Mat::scalar(dx)),
            dm: Arc::new(move |_x: &Vect, _m: &[f64], _q: usize| Vect::scalar(dm)),
        });
        bound = bound.max(dx.abs() + dm.abs());
    }
    CoefficientSet::from_moment_form(
        MomentFormSpec {
            dim_state: 1,
            stats: vec![Stat::coordinate(0, 1)],
            coeffs,
        },
        bound.max(1.0),
    )
}

/// Measure-free geometric flow dX = b X dW in one dimension.
pub fn geometric(b: f64) -> CoefficientSet {
    moment_linear(&MomentLinear {
        drift_x: 0.0,
        drift_mean: 0.0,
        drift_const: 0.0,
        rows: vec![LinearRow { x: b, mean: 0.0, cons: 0.0 }],
    })
    .expect("geometric family is well-formed")
}

/// Stratonovich-declared test family: V0(x, mu) = mean(mu), V1(x) = sin x.
/// Converted at construction; the correction is 1/2 cos(x) sin(x).
pub fn strat_sine() -> CoefficientSet {
    let v0 = MomentCoeff {
        value: Arc::new(|_x: &Vect, m: &[f64]| Vect::scalar(m[0])),
        dx: Arc::new(|_x: &Vect, _m: &[f64]| Mat::scalar(0.0)),
        dm: Arc::new(|_x: &Vect, _m: &[f64], _q: usize| Vect::scalar(1.0)),
    };
    let v1 = MomentCoeff {
        value: Arc::new(|x: &Vect, _m: &[f64]| Vect::scalar(x.x().sin())),
        dx: Arc::new(|x: &Vect, _m: &[f64]| Mat::scalar(x.x().cos())),
        dm: Arc::new(|_x: &Vect, _m: &[f64], _q: usize| Vect::scalar(0.0)),
    };
    let second = SecondDerivs {
        d2x_contract: Arc::new(|x: &Vect, _m: &[f64], u: &Vect| {
            Mat::scalar(-x.x().sin() * u.x())
        }),
        dm_dx: Arc::new(|_x: &Vect, _m: &[f64], _q: usize| Mat::scalar(0.0)),
    };
    strat_to_ito(
        RawStratFamily {
            dim_state: 1,
            stats: vec![Stat::coordinate(0, 1)],
            v0,
            diffusions: vec![v1],
            second: Some(vec![second]),
        },
        1.0,
    )
    .expect("strat_sine family is well-formed")
}

/// 2-d measure-free diagonal geometric flow (exercises the d > 1 paths).
pub fn gbm2d(b1: f64, b2: f64) -> CoefficientSet {
    let drift = MomentCoeff {
        value: Arc::new(|_x: &Vect, _m: &[f64]| Vect::zeros(2)),
        dx: Arc::new(|_x: &Vect, _m: &[f64]| Mat::zeros(2)),
        dm: Arc::new(|_x: &Vect, _m: &[f64], _q: usize| Vect::zeros(2)),
    };
    let mk = |axis: usize, b: f64| MomentCoeff {
        value: Arc::new(move |x: &Vect, _m: &[f64]| {
            let mut v = Vect::zeros(2);
            v.set(axis, b * x.get(axis));
            v
        }),
        dx: Arc::new(move |_x: &Vect, _m: &[f64]| {
            let mut d = Mat::zeros(2);
            d.set(axis, axis, b);
            d
        }),
        dm: Arc::new(|_x: &Vect, _m: &[f64], _q: usize| Vect::zeros(2)),
    };
    CoefficientSet::from_moment_form(
        MomentFormSpec {
            dim_state: 2,
            stats: Vec::new(),
            coeffs: vec![drift, mk(0, b1), mk(1, b2)],
        },
        b1.abs().max(b2.abs()).max(1.0),
    )
    .expect("gbm2d family is well-formed")
}

/// Compiled-in registry for the `custom` family selector.
pub fn custom(key: &str) -> Result<CoefficientSet> {
    match key {
        "strat_sine" => Ok(strat_sine()),
        "gbm2d" => Ok(gbm2d(0.4, 0.25)),
        other => Err(Error::Config(format!(
            "unknown custom coefficient key '{other}' (known: strat_sine, gbm2d)"
        ))),
    }
}
