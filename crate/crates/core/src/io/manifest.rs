//! Run manifests and CSV trace output. Manifests embed the fully resolved
//! config so a run can be reproduced from its manifest alone; CSV values are
//! rendered with 17 significant digits so the traces replay exactly.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::DiagnosticsReport;
use crate::experiments::SweepResult;

pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const RNG_ALGORITHM: &str = "chacha8";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub csv_schema_version: u32,
    pub rng_algorithm: String,
    pub seed: u64,
    pub config_hash: String,
    /// Resolved TOML of the config the run actually used.
    pub config_toml: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub dt: f64,
    pub steps: usize,
    pub exit_status: String,
    pub invariant_violation: Option<String>,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(config_toml: &str, seed: u64) -> Self {
        Self {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            csv_schema_version: CSV_SCHEMA_VERSION,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            seed,
            config_hash: super::snapshot::hex_digest(config_toml.as_bytes()),
            config_toml: config_toml.to_string(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            dt: 0.0,
            steps: 0,
            exit_status: "running".to_string(),
            invariant_violation: None,
            artifacts: Vec::new(),
        }
    }

    /// Atomic write: to a temp file in the same directory, then rename.
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, json)?;
        std::fs::rename(&tmp, path)
    }
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn finish_manifest(m: &mut RunManifest, exit_status: &str) {
    m.finished_unix_ms = now_ms();
    m.exit_status = exit_status.to_string();
}

/// 17-significant-digit decimal rendering, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Diagnostics trace with one row per report.
pub fn reports_to_csv(reports: &[DiagnosticsReport], layer_deltas: &[f64]) -> String {
    let mut out = String::new();
    out.push_str("t,basic_energy,dissipation_rate,dissipation_integral,energy_residual,volume_drift");
    out.push_str(",e_total,e_spatial_temporal,e_tangential,e_boundary,e_eps_second_grad");
    out.push_str(",e_int_grad_eta,e_int_quartic,e_int_visc,e_eps_sq_dtm_grad_v");
    out.push_str(",piola_interior,piola_boundary,decomp_res,jacobi_res,q_eqn_res");
    out.push_str(",b_res_bottom,b_res_top,compat_res,normal_matrix_min_eig");
    for d in layer_deltas {
        let _ = write!(out, ",layer_r_{d}");
    }
    for d in layer_deltas {
        let _ = write!(out, ",layer_r2_{d}");
    }
    out.push_str(",v_l2,v_h1,v_h2,grad_eta_l2,grad_eta_h1,eta_h2");
    out.push_str(",tangent_dot_normal_half,curvature_dot_normal_l2,trace_ratio,korn_ratio\n");
    for r in reports {
        let e = r.e_functional.as_ref();
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            fmt_f64(r.t),
            fmt_f64(r.basic_energy),
            fmt_f64(r.dissipation_rate),
            fmt_f64(r.dissipation_integral),
            fmt_f64(r.energy_residual),
            fmt_f64(r.volume_drift)
        );
        let _ = write!(
            out,
            ",{},{},{},{},{},{},{},{},{}",
            opt(e.map(|e| e.total)),
            opt(e.map(|e| e.spatial_temporal)),
            opt(e.map(|e| e.tangential)),
            opt(e.map(|e| e.boundary)),
            opt(e.map(|e| e.eps_second_grad)),
            opt(e.map(|e| e.time_integral_grad_eta)),
            opt(e.map(|e| e.time_integral_quartic)),
            opt(e.map(|e| e.time_integral_visc)),
            opt(e.map(|e| e.eps_sq_dtm_grad_v_sq)),
        );
        let _ = write!(
            out,
            ",{},{},{},{},{},{},{},{},{}",
            fmt_f64(r.piola_interior),
            fmt_f64(r.piola_boundary),
            fmt_f64(r.decomp_res),
            opt(r.jacobi_res),
            opt(r.q_eqn_res),
            fmt_f64(r.b_res_bottom),
            fmt_f64(r.b_res_top),
            fmt_f64(r.compat_res),
            fmt_f64(r.normal_matrix_min_eig),
        );
        for (_, v) in &r.layer_indicators {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        for (_, v) in &r.layer_indicators_second {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{},{},{},{},{},{}",
            fmt_f64(r.norms.v_l2),
            fmt_f64(r.norms.v_h1),
            fmt_f64(r.norms.v_h2),
            fmt_f64(r.norms.grad_eta_l2),
            fmt_f64(r.norms.grad_eta_h1),
            fmt_f64(r.norms.eta_h2),
            fmt_f64(r.norms.tangent_dot_normal_half),
            fmt_f64(r.norms.curvature_dot_normal_l2),
            fmt_f64(r.monitors.trace_ratio),
            fmt_f64(r.monitors.korn_ratio),
        );
    }
    out
}

/// Sweep summary, one row per viscosity.
pub fn sweep_to_csv(sweep: &SweepResult) -> String {
    let mut out = String::new();
    out.push_str("epsilon,err_eta_h1,err_v_l2,sup_e_functional,max_energy_residual");
    if let Some(first) = sweep.entries.first() {
        for (d, _) in &first.layer_max {
            let _ = write!(out, ",layer_max_{d}");
        }
        for (d, _) in &first.layer2_max {
            let _ = write!(out, ",layer2_max_{d}");
        }
    }
    out.push('\n');
    for e in &sweep.entries {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            fmt_f64(e.epsilon),
            fmt_f64(e.err_eta_h1),
            fmt_f64(e.err_v_l2),
            fmt_f64(e.sup_e_functional),
            fmt_f64(e.max_energy_residual)
        );
        for (_, v) in &e.layer_max {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        for (_, v) in &e.layer2_max {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_rendering_round_trips() {
        for v in [
            0.1,
            -3.0e-13,
            std::f64::consts::PI,
            1.0 / 3.0,
            6.02e23,
            -0.0,
        ] {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v} -> {s} -> {back}");
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let mut m = RunManifest::new("[grid]\nn1 = 8\nn2 = 5\n", 42);
        finish_manifest(&mut m, "ok");
        let dir = std::env::temp_dir().join(format!("viscowave-man-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("manifest.json");
        m.write(&path).unwrap();
        let loaded: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(loaded.seed, 42);
        assert_eq!(loaded.config_hash, m.config_hash);
        assert_eq!(loaded.rng_algorithm, "chacha8");
    }
}
