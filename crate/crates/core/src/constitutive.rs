//! Pressure law, elastic and viscous fluxes, surface-tension traction, and
//! the derived boundary quantity checked by `boundary_b_residual`.

use crate::field::{BoundaryTrace, Face, MatrixField, ScalarField, VectorField};
use crate::geometry::{face_tangent, GeometryCache, GeometryError};
use crate::grid::Grid;

/// Material and model parameters. `rho0` is the time-independent weighted
/// density rho0(eta0) * J0 on the grid.
#[derive(Debug, Clone)]
pub struct MaterialParams {
    pub gamma: f64,
    pub a_pressure: f64,
    pub mu: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub sigma: f64,
    pub p_e: f64,
    /// Lower/upper admissible bounds for rho0.
    pub c0: f64,
    pub big_c0: f64,
    /// Ablation switch: when false the elastic flux rho0 * grad eta is
    /// dropped from the momentum flux (pure compressible viscous flow).
    pub elastic_flux: bool,
    pub rho0: ScalarField,
}

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("gamma must exceed 1 (gamma-law), got {0}")]
    Gamma(f64),
    #[error("mu must be positive, got {0}")]
    Mu(f64),
    #[error("mu + lambda must be positive (2D coercivity), got mu={0}, lambda={1}")]
    Coercivity(f64, f64),
    #[error("epsilon must be nonnegative, got {0}")]
    Epsilon(f64),
    #[error("sigma must be nonnegative, got {0}")]
    Sigma(f64),
    #[error("p_e must be positive, got {0}")]
    ExteriorPressure(f64),
    #[error("rho0 out of bounds: min {min:.3e}, max {max:.3e}, require {c0} <= rho0 <= {big_c0}")]
    Rho0Bounds {
        min: f64,
        max: f64,
        c0: f64,
        big_c0: f64,
    },
}

impl MaterialParams {
    /// Uniform rho0 = 1 with the given scalars.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        grid: Grid,
        gamma: f64,
        a_pressure: f64,
        mu: f64,
        lambda: f64,
        epsilon: f64,
        sigma: f64,
        p_e: f64,
    ) -> Result<Self, ParamError> {
        let p = Self {
            gamma,
            a_pressure,
            mu,
            lambda,
            epsilon,
            sigma,
            p_e,
            c0: 0.5,
            big_c0: 2.0,
            elastic_flux: true,
            rho0: ScalarField::constant(grid, 1.0),
        };
        p.validate()?;
        Ok(p)
    }

    /// Defaults: gamma = 2, A = 1, mu = 1, lambda = 0, epsilon = 1e-2,
    /// sigma = 0.05, p_e = 1 (the flat state is then a traction-exact
    /// equilibrium with q = 1).
    pub fn default_for(grid: Grid) -> Self {
        Self::uniform(grid, 2.0, 1.0, 1.0, 0.0, 1e-2, 0.05, 1.0).unwrap()
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        if !(self.gamma > 1.0) {
            return Err(ParamError::Gamma(self.gamma));
        }
        if !(self.mu > 0.0) {
            return Err(ParamError::Mu(self.mu));
        }
        if !(self.mu + self.lambda > 0.0) {
            return Err(ParamError::Coercivity(self.mu, self.lambda));
        }
        if !(self.epsilon >= 0.0) {
            return Err(ParamError::Epsilon(self.epsilon));
        }
        if !(self.sigma >= 0.0) {
            return Err(ParamError::Sigma(self.sigma));
        }
        if !(self.p_e > 0.0) {
            return Err(ParamError::ExteriorPressure(self.p_e));
        }
        let min = self.rho0.data.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        let max = self.rho0.data.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        if min < self.c0 || max > self.big_c0 {
            return Err(ParamError::Rho0Bounds {
                min,
                max,
                c0: self.c0,
                big_c0: self.big_c0,
            });
        }
        Ok(())
    }

    /// Coercivity constant c = min(2 mu, 2 mu + 2 lambda) in
    /// 2 mu |S_A v|^2 + lambda (div_A v)^2 >= c |S_A v|^2.
    pub fn coercivity_constant(&self) -> f64 {
        (2.0 * self.mu).min(2.0 * self.mu + 2.0 * self.lambda)
    }
}

/// q = A (rho0 / J)^gamma + 1 - p_e pointwise.
pub fn pressure(
    rho0: &ScalarField,
    jac: &ScalarField,
    params: &MaterialParams,
) -> Result<ScalarField, GeometryError> {
    let g = rho0.grid;
    let mut out = ScalarField::zeros(g);
    for i in 0..g.n1 {
        for j in 0..g.n2 {
            let jv = jac.data[[i, j]];
            if jv <= 0.0 {
                return Err(GeometryError::DegenerateJacobian {
                    min_j: jv,
                    floor: 0.0,
                });
            }
            out.data[[i, j]] =
                params.a_pressure * (rho0.data[[i, j]] / jv).powf(params.gamma) + 1.0 - params.p_e;
        }
    }
    Ok(out)
}

/// Q(f) = int_1^f q(m) m^{-2} dm in closed form:
/// A (f^{gamma-1} - 1)/(gamma - 1) + (1 - p_e)(1 - 1/f).
pub fn potential_q(f: f64, params: &MaterialParams) -> f64 {
    params.a_pressure * (f.powf(params.gamma - 1.0) - 1.0) / (params.gamma - 1.0)
        + (1.0 - params.p_e) * (1.0 - 1.0 / f)
}

/// (S_A v)_{ik} = (A_{kj} d_j v_i + A_{ij} d_j v_k) / 2, symmetric by
/// construction.
pub fn symmetric_gradient(v: &VectorField, inv_t: &MatrixField) -> MatrixField {
    let g = v.grid;
    let dv = [
        [g.d1(&v.data[0]), g.d2(&v.data[0])],
        [g.d1(&v.data[1]), g.d2(&v.data[1])],
    ];
    let mut out = MatrixField::zeros(g);
    for r in 0..2 {
        for c in 0..2 {
            for i in 0..g.n1 {
                for j in 0..g.n2 {
                    let mut acc = 0.0;
                    for l in 0..2 {
                        acc += inv_t.entry(c, l)[[i, j]] * dv[r][l][[i, j]]
                            + inv_t.entry(r, l)[[i, j]] * dv[c][l][[i, j]];
                    }
                    out.entry_mut(r, c)[[i, j]] = 0.5 * acc;
                }
            }
        }
    }
    out
}

/// div_A v = A_{kl} d_l v_k pointwise.
pub fn div_a(v: &VectorField, inv_t: &MatrixField) -> ScalarField {
    let g = v.grid;
    let dv = [
        [g.d1(&v.data[0]), g.d2(&v.data[0])],
        [g.d1(&v.data[1]), g.d2(&v.data[1])],
    ];
    let mut out = ScalarField::zeros(g);
    for k in 0..2 {
        for l in 0..2 {
            for i in 0..g.n1 {
                for j in 0..g.n2 {
                    out.data[[i, j]] += inv_t.entry(k, l)[[i, j]] * dv[k][l][[i, j]];
                }
            }
        }
    }
    out
}

/// Full momentum flux
/// Sigma_{ij} = -q a_{ij} + 2 mu eps (S_A v)_{ik} a_{kj}
///            + lambda eps (div_A v) a_{ij} + rho0 d_j eta_i.
/// With eps = 0 the viscous contributions are skipped entirely.
#[derive(Debug, Clone)]
pub struct PiolaStress {
    pub sigma: MatrixField,
}

pub fn piola_stress(
    velocity: &VectorField,
    cache: &GeometryCache,
    params: &MaterialParams,
) -> Result<PiolaStress, GeometryError> {
    let g = velocity.grid;
    let q = pressure(&params.rho0, &cache.jac, params)?;
    let mut sigma = MatrixField::zeros(g);
    for r in 0..2 {
        for c in 0..2 {
            for i in 0..g.n1 {
                for j in 0..g.n2 {
                    let mut val = -q.data[[i, j]] * cache.cof.entry(r, c)[[i, j]];
                    if params.elastic_flux {
                        val += params.rho0.data[[i, j]] * cache.grad_eta.entry(r, c)[[i, j]];
                    }
                    sigma.entry_mut(r, c)[[i, j]] = val;
                }
            }
        }
    }
    if params.epsilon > 0.0 {
        let s_av = symmetric_gradient(velocity, &cache.inv_t);
        let div = div_a(velocity, &cache.inv_t);
        let two_mu_eps = 2.0 * params.mu * params.epsilon;
        let lam_eps = params.lambda * params.epsilon;
        for r in 0..2 {
            for c in 0..2 {
                for i in 0..g.n1 {
                    for j in 0..g.n2 {
                        let mut visc = 0.0;
                        for k in 0..2 {
                            visc += s_av.entry(r, k)[[i, j]] * cache.cof.entry(k, c)[[i, j]];
                        }
                        sigma.entry_mut(r, c)[[i, j]] += two_mu_eps * visc
                            + lam_eps * div.data[[i, j]] * cache.cof.entry(r, c)[[i, j]];
                    }
                }
            }
        }
    }
    Ok(PiolaStress { sigma })
}

/// Surface-tension traction sigma * d1(d1 eta / |d1 eta|) on a face, computed
/// by differentiating the normalized tangent along the face row.
pub fn traction(
    displacement: &VectorField,
    face: Face,
    params: &MaterialParams,
) -> Result<BoundaryTrace, GeometryError> {
    let g = displacement.grid;
    let tan = face_tangent(displacement, face);
    let mut unit = [vec![0.0; g.n1], vec![0.0; g.n1]];
    for i in 0..g.n1 {
        let (t1, t2) = (tan.values[[0, i]], tan.values[[1, i]]);
        let norm = (t1 * t1 + t2 * t2).sqrt();
        if norm < 1e-8 {
            return Err(GeometryError::DegenerateTangent(norm));
        }
        unit[0][i] = t1 / norm;
        unit[1][i] = t2 / norm;
    }
    let mut out = BoundaryTrace::zeros(&g, face, 2);
    for k in 0..2 {
        let d = g.d1_row(&unit[k]);
        for i in 0..g.n1 {
            out.values[[k, i]] = params.sigma * d[i];
        }
    }
    Ok(out)
}

/// Residual of the boundary identity obtained by contracting the dynamic
/// boundary condition with a_{.2}/|d1 eta|^2:
///   s * sigma (d1^2 eta_k a_{k2}) / |d1 eta|^3 + q
///     = 2 mu eps (S_A v)_{ik} a_{k2} a_{i2} / |d1 eta|^2
///     + lambda eps div_A v + rho0 J / |d1 eta|^2,
/// with s the outward-normal sign of the face. Small iff the dynamic BC
/// holds at the face nodes.
pub fn boundary_b_residual(
    velocity: &VectorField,
    displacement: &VectorField,
    cache: &GeometryCache,
    params: &MaterialParams,
    face: Face,
) -> Result<f64, GeometryError> {
    let g = displacement.grid;
    let row = face.row(&g);
    let s = face.sign();
    let q = pressure(&params.rho0, &cache.jac, params)?;
    let tan = face_tangent(displacement, face);
    // d1^2 eta on the face row: second derivative of the displacement only.
    let mut d2eta = [vec![0.0; g.n1], vec![0.0; g.n1]];
    for k in 0..2 {
        let u_row: Vec<f64> = (0..g.n1).map(|i| displacement.data[k][[i, row]]).collect();
        d2eta[k] = g.d1_row(&g.d1_row(&u_row));
    }
    let s_av = symmetric_gradient(velocity, &cache.inv_t);
    let div = div_a(velocity, &cache.inv_t);
    let mut max_res = 0.0f64;
    for i in 0..g.n1 {
        let a2 = [cache.cof.entry(0, 1)[[i, row]], cache.cof.entry(1, 1)[[i, row]]];
        let t = [tan.values[[0, i]], tan.values[[1, i]]];
        let metric = t[0] * t[0] + t[1] * t[1];
        let curl = d2eta[0][i] * a2[0] + d2eta[1][i] * a2[1];
        let lhs = s * params.sigma * curl / metric.powf(1.5) + q.data[[i, row]];
        let mut visc = 0.0;
        if params.epsilon > 0.0 {
            let mut sa = 0.0;
            for bi in 0..2 {
                for bk in 0..2 {
                    sa += s_av.entry(bi, bk)[[i, row]] * a2[bk] * a2[bi];
                }
            }
            visc = 2.0 * params.mu * params.epsilon * sa / metric
                + params.lambda * params.epsilon * div.data[[i, row]];
        }
        let rhs = visc + params.rho0.data[[i, row]] * cache.jac.data[[i, row]] / metric;
        max_res = max_res.max((lhs - rhs).abs());
    }
    Ok(max_res)
}
