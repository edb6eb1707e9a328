//! TOML run configuration: schema validation, defaulting, and the resolved
//! echo that gets embedded in run manifests.

use serde::{Deserialize, Serialize};

use crate::constitutive::MaterialParams;
use crate::diagnostics::DiagnosticsConfig;
use crate::dynamics::{Integrator, RunConfig};
use crate::field::ScalarField;
use crate::grid::Grid;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config constraint violated for `{key}`: {msg}")]
    Constraint { key: String, msg: String },
}

fn constraint(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Constraint {
        key: key.to_string(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n1: usize,
    pub n2: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaterialSection {
    pub gamma: f64,
    pub a_pressure: f64,
    pub mu: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub sigma: f64,
    pub p_e: f64,
    pub c0: f64,
    pub big_c0: f64,
    pub elastic_flux: bool,
}

impl Default for MaterialSection {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            a_pressure: 1.0,
            mu: 1.0,
            lambda: 0.0,
            epsilon: 1e-2,
            sigma: 0.05,
            p_e: 1.0,
            c0: 0.5,
            big_c0: 2.0,
            elastic_flux: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub t_end: f64,
    pub cfl: f64,
    pub integrator: Integrator,
    pub output_every: usize,
    pub j_floor: f64,
    pub history_depth: usize,
    /// Optional frozen timestep; when absent dt comes from the stability
    /// bound of the initial state.
    pub dt: Option<f64>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            t_end: 0.5,
            cfl: 0.4,
            integrator: Integrator::Rk4,
            output_every: 20,
            j_floor: 1e-6,
            history_depth: 5,
            dt: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub epsilons: Vec<f64>,
    pub amplitude: f64,
    pub seed: u64,
    pub interior_support: bool,
    pub layer_delta: f64,
    pub r_bound: f64,
    pub alpha_threshold: f64,
    pub r2_threshold: f64,
    pub mms_grids: Vec<[usize; 2]>,
    pub mms_amp1: f64,
    pub mms_amp2: f64,
    pub mms_omega: f64,
    pub order_min: f64,
    pub order_max: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            epsilons: vec![1e-2, 10f64.powf(-2.5), 1e-3, 10f64.powf(-3.5), 1e-4, 0.0],
            amplitude: 0.01,
            seed: 7,
            interior_support: true,
            layer_delta: 0.1,
            r_bound: 3.0,
            alpha_threshold: 0.9,
            r2_threshold: 0.95,
            mms_grids: vec![[32, 17], [64, 33], [128, 65]],
            // Amplitudes bounded so the manufactured Jacobian drift stays
            // inside the run guard |J - J0| <= c0/8.
            mms_amp1: 0.0025,
            mms_amp2: 0.0025,
            mms_omega: 2.0 * std::f64::consts::PI,
            order_min: 1.9,
            order_max: 2.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub m_diag: usize,
    pub layer_deltas: Vec<f64>,
    pub fd_order: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            m_diag: 2,
            layer_deltas: vec![0.05, 0.1, 0.2],
            fd_order: 2,
        }
    }
}

/// The whole config document; unknown keys anywhere are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub grid: GridSection,
    #[serde(default)]
    pub material: MaterialSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
}

/// Fully validated, defaults-expanded configuration.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub file: ConfigFile,
    pub grid: Grid,
    pub run: RunConfig,
    pub params: MaterialParams,
    /// Normalized TOML echo of the resolved document.
    pub resolved_toml: String,
}

pub fn parse_config_str(text: &str) -> Result<ResolvedConfig, ConfigError> {
    let file: ConfigFile = toml::from_str(text)?;
    resolve(file)
}

pub fn parse_config(path: &std::path::Path) -> Result<ResolvedConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text)
}

pub fn resolve(file: ConfigFile) -> Result<ResolvedConfig, ConfigError> {
    let grid = Grid::new(file.grid.n1, file.grid.n2)
        .map_err(|e| constraint("grid", e.to_string()))?;

    let m = &file.material;
    if !(m.gamma > 1.0) {
        return Err(constraint("material.gamma", "gamma must exceed 1"));
    }
    if !(m.mu > 0.0) {
        return Err(constraint("material.mu", "mu must be positive"));
    }
    if !(m.mu + m.lambda > 0.0) {
        return Err(constraint(
            "material.lambda",
            format!("mu + lambda must be positive, got {}", m.mu + m.lambda),
        ));
    }
    if !(m.epsilon >= 0.0) {
        return Err(constraint("material.epsilon", "epsilon must be nonnegative"));
    }
    if !(m.sigma >= 0.0) {
        return Err(constraint("material.sigma", "sigma must be nonnegative"));
    }
    if !(m.p_e > 0.0) {
        return Err(constraint("material.p_e", "p_e must be positive"));
    }

    let r = &file.run;
    if !(r.t_end > 0.0) {
        return Err(constraint("run.t_end", "t_end must be positive"));
    }
    if !(r.cfl > 0.0 && r.cfl <= 1.0) {
        return Err(constraint("run.cfl", "cfl must lie in (0, 1]"));
    }
    if r.output_every == 0 {
        return Err(constraint("run.output_every", "output_every must be >= 1"));
    }
    if r.history_depth < 3 {
        return Err(constraint("run.history_depth", "history_depth must be >= 3"));
    }
    if let Some(dt) = r.dt {
        if !(dt > 0.0) {
            return Err(constraint("run.dt", "dt must be positive when given"));
        }
    }

    let d = &file.diagnostics;
    if d.m_diag != 2 {
        return Err(constraint(
            "diagnostics.m_diag",
            "the discrete energy functional is implemented at m_diag = 2",
        ));
    }
    if !(1..=3).contains(&d.fd_order) {
        return Err(constraint("diagnostics.fd_order", "fd_order must be 1..=3"));
    }
    for delta in &d.layer_deltas {
        if !(*delta > 0.0 && *delta < 0.25) {
            return Err(constraint(
                "diagnostics.layer_deltas",
                "strip widths must lie in (0, 1/4)",
            ));
        }
    }

    let e = &file.experiment;
    if !(e.layer_delta > 0.0 && e.layer_delta < 0.25) {
        return Err(constraint("experiment.layer_delta", "must lie in (0, 1/4)"));
    }

    let params = MaterialParams {
        gamma: m.gamma,
        a_pressure: m.a_pressure,
        mu: m.mu,
        lambda: m.lambda,
        epsilon: m.epsilon,
        sigma: m.sigma,
        p_e: m.p_e,
        c0: m.c0,
        big_c0: m.big_c0,
        elastic_flux: m.elastic_flux,
        rho0: ScalarField::constant(grid, 1.0),
    };
    params
        .validate()
        .map_err(|e| constraint("material", e.to_string()))?;

    let run = RunConfig {
        grid,
        t_end: r.t_end,
        cfl: r.cfl,
        integrator: r.integrator,
        output_every: r.output_every,
        j_floor: r.j_floor,
        c0: m.c0,
        history_depth: r.history_depth,
        dt_override: r.dt,
        diagnostics: DiagnosticsConfig {
            m_diag: d.m_diag,
            layer_deltas: d.layer_deltas.clone(),
            fd_order: d.fd_order,
            j_floor: r.j_floor,
        },
    };

    let resolved_toml = toml::to_string_pretty(&file).expect("resolved config serializes");
    Ok(ResolvedConfig {
        file,
        grid,
        run,
        params,
        resolved_toml,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config_str("[grid]\nn1 = 64\nn2 = 33\n").unwrap();
        assert_eq!(cfg.grid.n1, 64);
        assert_eq!(cfg.params.gamma, 2.0);
        assert_eq!(cfg.params.mu, 1.0);
        assert_eq!(cfg.params.lambda, 0.0);
        assert_eq!(cfg.params.sigma, 0.05);
        assert_eq!(cfg.params.p_e, 1.0);
        assert_eq!(cfg.params.epsilon, 1e-2);
        assert!(cfg.resolved_toml.contains("gamma = 2.0"));
    }

    #[test]
    fn bad_gamma_rejected_with_constraint() {
        let err = parse_config_str("[grid]\nn1 = 64\nn2 = 33\n[material]\ngamma = 0.5\n")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("material.gamma"), "{msg}");
        assert!(msg.contains("exceed 1"), "{msg}");
    }

    #[test]
    fn coercivity_violation_rejected() {
        let err =
            parse_config_str("[grid]\nn1 = 64\nn2 = 33\n[material]\nmu = 1.0\nlambda = -1.0\n")
                .unwrap_err();
        assert!(err.to_string().contains("mu + lambda"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = parse_config_str("[grid]\nn1 = 64\nn2 = 33\nextra = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
        let err = parse_config_str("[grid]\nn1 = 64\nn2 = 33\n[material]\nbogus = 2\n")
            .unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn resolved_echo_reparses_identically() {
        let cfg = parse_config_str("[grid]\nn1 = 32\nn2 = 17\n[run]\nt_end = 0.25\n").unwrap();
        let again = parse_config_str(&cfg.resolved_toml).unwrap();
        assert_eq!(cfg.resolved_toml, again.resolved_toml);
        assert_eq!(again.run.t_end, 0.25);
    }
}
