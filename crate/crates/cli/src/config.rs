//! Run configuration: TOML schema, defaults, validation, and coefficient
//! family construction.

use serde::{Deserialize, Serialize};

use mvflow_core::coefficients::CoefficientSet;
use mvflow_core::families::{self, LinearRow, MomentLinear, F46};

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub coefficients: CoeffConfig,
    pub time: TimeConfig,
    pub grid: GridConfig,
    pub ensemble: EnsembleConfig,
    pub run: RunConfig,
    pub experiment: ExperimentConfig,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoeffConfig {
    /// zero | example46 | moment_linear | geometric | custom
    pub family: String,
    /// example46: identity | tanh
    pub f: String,
    /// tanh steepness
    pub a: f64,
    /// geometric: diffusion slope
    pub b: f64,
    pub drift_x: f64,
    pub drift_mean: f64,
    pub drift_const: f64,
    pub rows: Vec<RowConfig>,
    pub custom_key: String,
    /// 0 = use the family's own bound
    pub lipschitz_bound: f64,
}

impl Default for CoeffConfig {
    fn default() -> Self {
        CoeffConfig {
            family: "example46".into(),
            f: "identity".into(),
            a: 1.0,
            b: 0.5,
            drift_x: -0.5,
            drift_mean: 0.25,
            drift_const: 0.0,
            rows: vec![RowConfig { x: 0.3, mean: 0.1, cons: 0.2 }],
            custom_key: "strat_sine".into(),
            lipschitz_bound: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RowConfig {
    pub x: f64,
    pub mean: f64,
    pub cons: f64,
}

impl Default for RowConfig {
    fn default() -> Self {
        RowConfig { x: 0.0, mean: 0.0, cons: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    pub s: f64,
    pub t_end: f64,
    pub n_steps: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig { s: 0.0, t_end: 1.0, n_steps: 1000 }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { min: -2.0, max: 2.0, points: 101 }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub replicas: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { replicas: 2000 }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub threads: usize,
    pub m_ladder: Vec<f64>,
    pub n_ladder: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: "out".into(),
            threads: 0,
            m_ladder: vec![2.0, 5.0, 10.0, 50.0],
            n_ladder: vec![2.0, 5.0, 10.0, 50.0],
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Refinement levels for converge / oracle-check.
    pub levels: usize,
    /// Start point for single-point studies.
    pub x0: f64,
    /// Seeded paths in the stopping-agreement study.
    pub agreement_paths: usize,
    /// Times (absolute) at which domain masks are emitted.
    pub domain_times: Vec<f64>,
    /// Also dump the final replica cloud (one atom per row) on simulate.
    pub dump_final_cloud: bool,
    /// Also dump every Brownian increment on simulate (for external replay).
    pub dump_paths: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            levels: 3,
            x0: 1.0,
            agreement_paths: 100,
            domain_times: vec![0.0, 0.5, 1.0],
            dump_final_cloud: false,
            dump_paths: false,
        }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<SimConfig, String> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| format!("config parse: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.time.n_steps == 0 {
            return Err("time.n_steps must be positive".into());
        }
        if !(self.time.t_end > self.time.s) {
            return Err("time.t_end must exceed time.s".into());
        }
        if self.grid.points == 0 {
            return Err("grid.points must be positive".into());
        }
        if self.grid.points > 1 && !(self.grid.max > self.grid.min) {
            return Err("grid.max must exceed grid.min (nondegenerate box)".into());
        }
        if self.ensemble.replicas == 0 {
            return Err("ensemble.replicas must be positive".into());
        }
        for (name, ladder) in [("run.m_ladder", &self.run.m_ladder), ("run.n_ladder", &self.run.n_ladder)] {
            if ladder.is_empty() {
                return Err(format!("{name} must be nonempty"));
            }
            if ladder.windows(2).any(|w| w[1] <= w[0]) {
                return Err(format!("{name} must be strictly increasing"));
            }
        }
        if self.experiment.levels < 1 {
            return Err("experiment.levels must be positive".into());
        }
        match self.coefficients.family.as_str() {
            "zero" | "example46" | "moment_linear" | "geometric" | "custom" => {}
            other => {
                return Err(format!(
                    "coefficients.family '{other}' unknown (zero | example46 | moment_linear | geometric | custom)"
                ))
            }
        }
        Ok(())
    }

    /// Builds the coefficient family the config names.
    pub fn coefficient_set(&self) -> Result<CoefficientSet, String> {
        let c = &self.coefficients;
        let set = match c.family.as_str() {
            "zero" => families::zero(1, 1),
            "example46" => {
                let f = match c.f.as_str() {
                    "identity" => F46::Identity,
                    "tanh" | "tanh_a" => F46::Tanh { a: c.a },
                    other => return Err(format!("coefficients.f '{other}' unknown (identity | tanh)")),
                };
                families::example46(f)
            }
            "geometric" => families::geometric(c.b),
            "moment_linear" => families::moment_linear(&MomentLinear {
                drift_x: c.drift_x,
                drift_mean: c.drift_mean,
                drift_const: c.drift_const,
                rows: c
                    .rows
                    .iter()
                    .map(|r| LinearRow { x: r.x, mean: r.mean, cons: r.cons })
                    .collect(),
            })
            .map_err(|e| e.to_string())?,
            "custom" => families::custom(&c.custom_key).map_err(|e| e.to_string())?,
            other => return Err(format!("coefficients.family '{other}' unknown")),
        };
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        SimConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_ladder() {
        let text = "[run]\nm_ladder = [5.0, 2.0]\n";
        let err = SimConfig::from_toml(text).unwrap_err();
        assert!(err.contains("m_ladder"), "{err}");
    }

    #[test]
    fn rejects_degenerate_box() {
        let text = "[grid]\nmin = 1.0\nmax = 1.0\npoints = 5\n";
        let err = SimConfig::from_toml(text).unwrap_err();
        assert!(err.contains("grid.max"), "{err}");
    }

    #[test]
    fn rejects_unknown_field_with_path() {
        let text = "[time]\nstep_count = 10\n";
        assert!(SimConfig::from_toml(text).is_err());
    }

    #[test]
    fn family_construction() {
        let mut cfg = SimConfig::default();
        cfg.coefficients.family = "geometric".into();
        let cset = cfg.coefficient_set().unwrap();
        assert_eq!(cset.dim_state(), 1);
        cfg.coefficients.family = "custom".into();
        cfg.coefficients.custom_key = "gbm2d".into();
        let cset = cfg.coefficient_set().unwrap();
        assert_eq!(cset.dim_state(), 2);
    }
}
