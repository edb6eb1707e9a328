//! Manufactured solutions and the forcing that makes them solve the system.
//!
//! Two forcing modes:
//!
//! * [`DiscreteMmsForcing`] cancels the *discrete* operator on the same
//!   grid, so the manufactured pair solves the semi-discrete system exactly
//!   and a forced run tracks it up to time-integration error alone.
//! * [`AnalyticMmsForcing`] cancels the *continuous* operator (the flux
//!   divergence is taken with tiny-step high-order differences of the
//!   closed-form stress, far below grid truncation), so refinement studies
//!   see the scheme's own O(h^2) spatial error.
//!
//! The built-in family keeps both faces flat with vanishing normal
//! derivative of the perturbation there, which makes the traction boundary
//! condition hold exactly for every amplitude and time.

use std::f64::consts::PI;

use crate::constitutive::MaterialParams;
use crate::dynamics::{momentum_rhs, FlowState, Forcing};
use crate::field::VectorField;
use crate::geometry::GeometryCache;
use crate::grid::Grid;

/// Oscillatory manufactured displacement
/// `u1 = amp1 cos(omega t) cos(2 pi x1) sin^2(pi x2)`,
/// `u2 = amp2 cos(omega t) sin(2 pi x1) sin^2(pi x2)`.
#[derive(Debug, Clone, Copy)]
pub struct Manufactured {
    pub amp1: f64,
    pub amp2: f64,
    pub omega: f64,
}

impl Default for Manufactured {
    fn default() -> Self {
        Self {
            amp1: 0.01,
            amp2: 0.02,
            omega: 2.0 * PI,
        }
    }
}

impl Manufactured {
    fn shapes(&self, x1: f64, x2: f64) -> ([f64; 2], [f64; 2], [f64; 2]) {
        let psi = (PI * x2).sin().powi(2);
        let dpsi = 2.0 * PI * (PI * x2).sin() * (PI * x2).cos();
        let w = [
            self.amp1 * (2.0 * PI * x1).cos(),
            self.amp2 * (2.0 * PI * x1).sin(),
        ];
        let dw = [
            -self.amp1 * 2.0 * PI * (2.0 * PI * x1).sin(),
            self.amp2 * 2.0 * PI * (2.0 * PI * x1).cos(),
        ];
        ([w[0] * psi, w[1] * psi], [dw[0] * psi, dw[1] * psi], [w[0] * dpsi, w[1] * dpsi])
    }

    pub fn displacement(&self, x1: f64, x2: f64, t: f64) -> [f64; 2] {
        let (base, _, _) = self.shapes(x1, x2);
        let c = (self.omega * t).cos();
        [base[0] * c, base[1] * c]
    }

    pub fn velocity(&self, x1: f64, x2: f64, t: f64) -> [f64; 2] {
        let (base, _, _) = self.shapes(x1, x2);
        let s = -self.omega * (self.omega * t).sin();
        [base[0] * s, base[1] * s]
    }

    pub fn acceleration(&self, x1: f64, x2: f64, t: f64) -> [f64; 2] {
        let (base, _, _) = self.shapes(x1, x2);
        let a = -self.omega * self.omega * (self.omega * t).cos();
        [base[0] * a, base[1] * a]
    }

    /// grad u (rows: component, cols: direction).
    pub fn grad_displacement(&self, x1: f64, x2: f64, t: f64) -> [[f64; 2]; 2] {
        let (_, d1, d2) = self.shapes(x1, x2);
        let c = (self.omega * t).cos();
        [[d1[0] * c, d2[0] * c], [d1[1] * c, d2[1] * c]]
    }

    pub fn grad_velocity(&self, x1: f64, x2: f64, t: f64) -> [[f64; 2]; 2] {
        let (_, d1, d2) = self.shapes(x1, x2);
        let s = -self.omega * (self.omega * t).sin();
        [[d1[0] * s, d2[0] * s], [d1[1] * s, d2[1] * s]]
    }

    /// Nodal sample of the manufactured state at time t.
    pub fn state_at(&self, grid: Grid, t: f64) -> FlowState {
        FlowState {
            displacement: VectorField::from_fn(grid, |x1, x2| self.displacement(x1, x2, t)),
            velocity: VectorField::from_fn(grid, |x1, x2| self.velocity(x1, x2, t)),
            time: t,
        }
    }

    /// Nodal error eta_h - eta* as a displacement difference.
    pub fn displacement_error(&self, state: &FlowState) -> VectorField {
        let g = state.grid();
        let exact = self.state_at(g, state.time);
        state.displacement.add_scaled(&exact.displacement, -1.0)
    }

    /// Continuous Piola stress of the manufactured fields at a point, built
    /// from the analytic first derivatives (requires rho0 == 1).
    fn stress_at(&self, params: &MaterialParams, x1: f64, x2: f64, t: f64) -> [[f64; 2]; 2] {
        let du = self.grad_displacement(x1, x2, t);
        let grad = [[1.0 + du[0][0], du[0][1]], [du[1][0], 1.0 + du[1][1]]];
        let jac = grad[0][0] * grad[1][1] - grad[0][1] * grad[1][0];
        let cof = [[grad[1][1], -grad[1][0]], [-grad[0][1], grad[0][0]]];
        let q = params.a_pressure * jac.powf(-params.gamma) + 1.0 - params.p_e;
        let mut sigma = [[0.0; 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                sigma[r][c] = -q * cof[r][c];
                if params.elastic_flux {
                    sigma[r][c] += grad[r][c];
                }
            }
        }
        if params.epsilon > 0.0 {
            let inv_t = [
                [cof[0][0] / jac, cof[0][1] / jac],
                [cof[1][0] / jac, cof[1][1] / jac],
            ];
            let dv = self.grad_velocity(x1, x2, t);
            let mut s_av = [[0.0; 2]; 2];
            for r in 0..2 {
                for c in 0..2 {
                    let mut acc = 0.0;
                    for l in 0..2 {
                        acc += inv_t[c][l] * dv[r][l] + inv_t[r][l] * dv[c][l];
                    }
                    s_av[r][c] = 0.5 * acc;
                }
            }
            let mut div = 0.0;
            for k in 0..2 {
                for l in 0..2 {
                    div += inv_t[k][l] * dv[k][l];
                }
            }
            for r in 0..2 {
                for c in 0..2 {
                    let mut visc = 0.0;
                    for k in 0..2 {
                        visc += s_av[r][k] * cof[k][c];
                    }
                    sigma[r][c] += 2.0 * params.mu * params.epsilon * visc
                        + params.lambda * params.epsilon * div * cof[r][c];
                }
            }
        }
        sigma
    }
}

/// Forcing that cancels the discrete operator: F = dt v* - R_h(eta*, v*).
pub struct DiscreteMmsForcing {
    pub manufactured: Manufactured,
    pub params: MaterialParams,
    pub j_floor: f64,
}

impl Forcing for DiscreteMmsForcing {
    fn eval(&self, grid: Grid, t: f64) -> VectorField {
        let state = self.manufactured.state_at(grid, t);
        let cache =
            GeometryCache::build(&state.displacement, self.j_floor).expect("manufactured J > 0");
        let rhs = momentum_rhs(&state, &cache, &self.params).expect("manufactured RHS");
        let mut out = VectorField::from_fn(grid, |x1, x2| {
            self.manufactured.acceleration(x1, x2, t)
        });
        for k in 0..2 {
            out.data[k] = &out.data[k] - &rhs.data[k];
        }
        out
    }
}

/// Forcing that cancels the continuous operator:
/// F_i = dt v*_i - (1/rho0) sum_j d_j Sigma*_{ij}, with d_j evaluated by
/// central differences of step `delta` on the closed-form stress.
pub struct AnalyticMmsForcing {
    pub manufactured: Manufactured,
    pub params: MaterialParams,
    pub delta: f64,
}

impl AnalyticMmsForcing {
    pub fn new(manufactured: Manufactured, params: MaterialParams) -> Self {
        Self {
            manufactured,
            params,
            delta: 3e-6,
        }
    }
}

impl Forcing for AnalyticMmsForcing {
    fn eval(&self, grid: Grid, t: f64) -> VectorField {
        let d = self.delta;
        VectorField::from_fn(grid, |x1, x2| {
            let acc = self.manufactured.acceleration(x1, x2, t);
            let sp1 = self.manufactured.stress_at(&self.params, x1 + d, x2, t);
            let sm1 = self.manufactured.stress_at(&self.params, x1 - d, x2, t);
            let sp2 = self.manufactured.stress_at(&self.params, x1, x2 + d, t);
            let sm2 = self.manufactured.stress_at(&self.params, x1, x2 - d, t);
            let mut out = [0.0; 2];
            for i in 0..2 {
                let div = (sp1[i][0] - sm1[i][0]) / (2.0 * d) + (sp2[i][1] - sm2[i][1]) / (2.0 * d);
                out[i] = acc[i] - div;
            }
            out
        })
    }
}
