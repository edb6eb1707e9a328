//! The theorems as experiments: vanishing-viscosity sweeps with fitted
//! convergence rates, uniform-energy monitoring, the no-boundary-layer
//! verdict, and manufactured-solution spatial-order studies.

use rayon::prelude::*;
use serde::Serialize;

use crate::constitutive::MaterialParams;
use crate::dynamics::{
    simulate, stable_dt, well_prepared_initial, FlowState, InitialDataSpec, RunConfig, SimError,
};
use crate::grid::{sobolev_norm_vector, Grid};
use crate::mms::{AnalyticMmsForcing, Manufactured};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("epsilon list must be strictly decreasing and end with 0: {0:?}")]
    BadEpsilons(Vec<f64>),
    #[error("run at epsilon = {epsilon} failed: {source}")]
    Run {
        epsilon: f64,
        #[source]
        source: Box<SimError>,
    },
    #[error("order study needs at least 3 grids, got {0}")]
    TooFewGrids(usize),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Least-squares fit of log(error) against log(parameter).
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub enum RateFit {
    Slope { rate: f64, r_squared: f64 },
    /// All errors below the measurement floor; no slope is meaningful.
    ConvergedToFloor,
}

/// Fit log e = rate * log x + b. Pairs with e <= floor are excluded; if
/// fewer than 3 survive, the data has converged to the floor.
pub fn convergence_rate(errors: &[f64], xs: &[f64], floor: f64) -> RateFit {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(errors)
        .filter(|(x, e)| **x > 0.0 && **e > floor)
        .map(|(x, e)| (x.ln(), e.ln()))
        .collect();
    if pts.len() < 3 {
        return RateFit::ConvergedToFloor;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let rate = sxy / sxx;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let ss_res: f64 = pts
        .iter()
        .map(|p| {
            let fit = my + rate * (p.0 - mx);
            (p.1 - fit) * (p.1 - fit)
        })
        .sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    RateFit::Slope { rate, r_squared }
}

/// Everything a sweep records for one viscosity value.
#[derive(Debug, Clone, Serialize)]
pub struct SweepEntry {
    pub epsilon: f64,
    /// ||eta^eps - eta^0||_{H^1} at t_end.
    pub err_eta_h1: f64,
    /// ||v^eps - v^0||_{L^2} at t_end.
    pub err_v_l2: f64,
    /// Sup over report times of the m_diag = 2 energy functional.
    pub sup_e_functional: f64,
    /// Per strip width delta: max over report times of r(delta).
    pub layer_max: Vec<(f64, f64)>,
    /// Same for the second-derivative concentration (supplementary).
    pub layer2_max: Vec<(f64, f64)>,
    /// Max energy-balance residual along the run.
    pub max_energy_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    pub dt: f64,
    pub fit_eta: RateFit,
    pub fit_v: RateFit,
}

/// Sweep inputs: the run template, material template (its epsilon is
/// replaced per case), the viscosity ladder, and the initial-data spec.
pub struct SweepSpec {
    pub run: RunConfig,
    pub params: MaterialParams,
    pub epsilons: Vec<f64>,
    pub initial: InitialDataSpec,
}

impl SweepSpec {
    /// The default experiment: eps in {1e-2, 1e-2.5, ..., 1e-4, 0} with
    /// gamma = 2, sigma = 0.05, mu = 1, lambda = 0.
    pub fn default_for(grid: Grid, t_end: f64) -> Self {
        let params = MaterialParams::default_for(grid);
        Self {
            run: RunConfig::new(grid, t_end),
            params,
            epsilons: vec![1e-2, 10f64.powf(-2.5), 1e-3, 10f64.powf(-3.5), 1e-4, 0.0],
            initial: InitialDataSpec::default(),
        }
    }

    /// Same experiment with the elastic flux removed (pure compressible
    /// viscous flow). The exterior pressure moves to p_e = A + 1 so the
    /// flat state stays an equilibrium of the ablated system.
    pub fn ablated(mut self) -> Self {
        self.params.elastic_flux = false;
        self.params.p_e = self.params.a_pressure + 1.0;
        self
    }
}

fn check_epsilons(eps: &[f64]) -> Result<(), ExperimentError> {
    let ok = eps.len() >= 2
        && eps.windows(2).all(|w| w[0] > w[1])
        && *eps.last().unwrap() == 0.0;
    if ok {
        Ok(())
    } else {
        Err(ExperimentError::BadEpsilons(eps.to_vec()))
    }
}

/// Run every viscosity case (in parallel), compare against the eps = 0
/// reference at the final time, and fit the convergence rate. dt is frozen
/// from the largest viscosity so time-discretization error is shared.
pub fn viscosity_sweep(spec: &SweepSpec) -> Result<SweepResult, ExperimentError> {
    check_epsilons(&spec.epsilons)?;
    let initial = well_prepared_initial(spec.run.grid, &spec.initial);

    let mut params_max = spec.params.clone();
    params_max.epsilon = spec.epsilons[0];
    let dt = stable_dt(&initial, &params_max, spec.run.cfl)?.dt;
    let mut run = spec.run.clone();
    run.dt_override = Some(dt);

    let trajectories: Vec<Result<_, ExperimentError>> = spec
        .epsilons
        .par_iter()
        .map(|&eps| {
            let mut params = spec.params.clone();
            params.epsilon = eps;
            let initial = well_prepared_initial(run.grid, &spec.initial);
            simulate(&run, &params, initial, None).map_err(|e| ExperimentError::Run {
                epsilon: eps,
                source: Box::new(e),
            })
        })
        .collect();
    let mut trajs = Vec::with_capacity(trajectories.len());
    for t in trajectories {
        trajs.push(t?);
    }

    let reference = trajs.last().unwrap();
    let ref_final = reference.final_state();
    let mut entries = Vec::new();
    for (traj, &epsilon) in trajs.iter().zip(&spec.epsilons) {
        let fin = traj.final_state();
        let d_eta = fin.displacement.add_scaled(&ref_final.displacement, -1.0);
        let d_v = fin.velocity.add_scaled(&ref_final.velocity, -1.0);
        let sup_e = traj
            .reports
            .iter()
            .filter_map(|r| r.e_functional.as_ref().map(|e| e.total))
            .fold(0.0f64, f64::max);
        let mut layer_max: Vec<(f64, f64)> = Vec::new();
        let mut layer2_max: Vec<(f64, f64)> = Vec::new();
        for r in &traj.reports {
            for (k, (delta, val)) in r.layer_indicators.iter().enumerate() {
                if layer_max.len() <= k {
                    layer_max.push((*delta, *val));
                } else {
                    layer_max[k].1 = layer_max[k].1.max(*val);
                }
            }
            for (k, (delta, val)) in r.layer_indicators_second.iter().enumerate() {
                if layer2_max.len() <= k {
                    layer2_max.push((*delta, *val));
                } else {
                    layer2_max[k].1 = layer2_max[k].1.max(*val);
                }
            }
        }
        let max_energy_residual = traj
            .reports
            .iter()
            .map(|r| r.energy_residual.abs())
            .fold(0.0f64, f64::max);
        entries.push(SweepEntry {
            epsilon,
            err_eta_h1: sobolev_norm_vector(&d_eta, 1),
            err_v_l2: sobolev_norm_vector(&d_v, 0),
            sup_e_functional: sup_e,
            layer_max,
            layer2_max,
            max_energy_residual,
        });
    }

    let floor = noise_floor(ref_final);
    let errs_eta: Vec<f64> = entries.iter().map(|e| e.err_eta_h1).collect();
    let errs_v: Vec<f64> = entries.iter().map(|e| e.err_v_l2).collect();
    let fit_eta = convergence_rate(&errs_eta, &spec.epsilons, floor);
    let fit_v = convergence_rate(&errs_v, &spec.epsilons, floor);
    Ok(SweepResult {
        entries,
        dt,
        fit_eta,
        fit_v,
    })
}

/// 10x the rounding-noise scale of the comparison norms.
fn noise_floor(reference: &FlowState) -> f64 {
    let scale = sobolev_norm_vector(&reference.displacement, 1).max(1.0);
    1e-13 * scale
}

/// Layer verdict from a sweep: growth of the strip indicator relative to
/// its value at the largest viscosity.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub enum LayerVerdict {
    NoLayer { growth: f64 },
    LayerSuspected { growth: f64, exponent: f64 },
}

impl LayerVerdict {
    pub fn growth(&self) -> f64 {
        match self {
            LayerVerdict::NoLayer { growth } => *growth,
            LayerVerdict::LayerSuspected { growth, .. } => *growth,
        }
    }
}

/// NO_LAYER iff max over eps of r(delta, eps) / r(delta, eps_max) stays
/// within `r_bound`. A boundary layer would make the ratio grow like
/// eps^{-1/2} as eps -> 0.
pub fn layer_study(sweep: &SweepResult, delta: f64, r_bound: f64) -> LayerVerdict {
    let idx = sweep.entries[0]
        .layer_max
        .iter()
        .position(|(d, _)| (*d - delta).abs() < 1e-12)
        .unwrap_or(0);
    let r_ref = sweep.entries[0].layer_max[idx].1.max(1e-14);
    let mut growth = 0.0f64;
    for e in &sweep.entries {
        growth = growth.max(e.layer_max[idx].1 / r_ref);
    }
    if growth <= r_bound {
        LayerVerdict::NoLayer { growth }
    } else {
        // Growth exponent of r against eps over the positive-viscosity runs.
        let rs: Vec<f64> = sweep
            .entries
            .iter()
            .filter(|e| e.epsilon > 0.0)
            .map(|e| e.layer_max[idx].1)
            .collect();
        let eps: Vec<f64> = sweep
            .entries
            .iter()
            .filter(|e| e.epsilon > 0.0)
            .map(|e| e.epsilon)
            .collect();
        let exponent = match convergence_rate(&rs, &eps, 0.0) {
            RateFit::Slope { rate, .. } => rate,
            RateFit::ConvergedToFloor => 0.0,
        };
        LayerVerdict::LayerSuspected { growth, exponent }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderEntry {
    pub n1: usize,
    pub n2: usize,
    pub h: f64,
    pub err_eta_h1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderStudy {
    pub entries: Vec<OrderEntry>,
    pub fit: RateFit,
    pub monotone: bool,
}

/// Spatial-order study: run the analytically forced manufactured problem on
/// each grid and fit ||eta_h - eta*||_{H^1}(t_end) against h.
pub fn mms_order_study(
    grids: &[(usize, usize)],
    manufactured: Manufactured,
    template: &MaterialParams,
    t_end: f64,
    cfl: f64,
) -> Result<OrderStudy, ExperimentError> {
    if grids.len() < 3 {
        return Err(ExperimentError::TooFewGrids(grids.len()));
    }
    let results: Vec<Result<OrderEntry, ExperimentError>> = grids
        .par_iter()
        .map(|&(n1, n2)| {
            let grid = Grid::new(n1, n2)
                .map_err(|e| ExperimentError::Sim(SimError::BadConfig(e.to_string())))?;
            let mut params = template.clone();
            params.rho0 = crate::field::ScalarField::constant(grid, 1.0);
            let mut run = RunConfig::new(grid, t_end);
            run.cfl = cfl;
            run.output_every = usize::MAX / 2;
            let initial = manufactured.state_at(grid, 0.0);
            let forcing = AnalyticMmsForcing::new(manufactured, params.clone());
            let traj = simulate(&run, &params, initial, Some(&forcing))?;
            let err = manufactured.displacement_error(traj.final_state());
            Ok(OrderEntry {
                n1,
                n2,
                h: grid.h1.min(grid.h2),
                err_eta_h1: sobolev_norm_vector(&err, 1),
            })
        })
        .collect();
    let mut entries = Vec::new();
    for r in results {
        entries.push(r?);
    }
    entries.sort_by(|a, b| b.h.partial_cmp(&a.h).unwrap());
    let monotone = entries.windows(2).all(|w| w[0].err_eta_h1 > w[1].err_eta_h1);
    let errs: Vec<f64> = entries.iter().map(|e| e.err_eta_h1).collect();
    let hs: Vec<f64> = entries.iter().map(|e| e.h).collect();
    let fit = convergence_rate(&errs, &hs, 1e-12);
    Ok(OrderStudy {
        entries,
        fit,
        monotone,
    })
}
