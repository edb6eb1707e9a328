//! Uniform grid on T x (0, 1) and second-order finite-difference operators.
//!
//! `d1` is a centered periodic difference, `d2` is centered in the interior
//! with second-order one-sided closures at the two boundary rows. Both are
//! exact on affine fields, and `d2` is exact on quadratics in `x2`. Mixed
//! discrete partials commute exactly on interior nodes, which is what makes
//! the discrete Piola identity hold to rounding.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::field::{BoundaryTrace, Face, ScalarField, VectorField};

/// Node-centered uniform grid: `n1` cells in the periodic direction,
/// `n2` node rows in `x2` including both boundary rows.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    pub n1: usize,
    pub n2: usize,
    pub h1: f64,
    pub h2: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("n1 must be even and >= 8, got {0}")]
    BadN1(usize),
    #[error("n2 must be >= 5, got {0}")]
    BadN2(usize),
    #[error("non-finite value passed to {0}")]
    NonFinite(&'static str),
}

impl Grid {
    pub fn new(n1: usize, n2: usize) -> Result<Self, GridError> {
        if n1 < 8 || n1 % 2 != 0 {
            return Err(GridError::BadN1(n1));
        }
        if n2 < 5 {
            return Err(GridError::BadN2(n2));
        }
        Ok(Self {
            n1,
            n2,
            h1: 1.0 / n1 as f64,
            h2: 1.0 / (n2 - 1) as f64,
        })
    }

    /// Coordinates of node (i, j).
    #[inline]
    pub fn node(&self, i: usize, j: usize) -> (f64, f64) {
        (i as f64 * self.h1, j as f64 * self.h2)
    }

    /// Trapezoidal weight in x2 times the (exact) rectangle weight in x1.
    #[inline]
    pub fn quad_weight(&self, j: usize) -> f64 {
        let w2 = if j == 0 || j == self.n2 - 1 { 0.5 } else { 1.0 };
        self.h1 * self.h2 * w2
    }

    /// d/dx1, centered second order with periodic wrap.
    pub fn d1(&self, f: &Array2<f64>) -> Array2<f64> {
        let n1 = self.n1;
        let inv = 1.0 / (2.0 * self.h1);
        let mut out = Array2::zeros(f.raw_dim());
        for i in 0..n1 {
            let ip = (i + 1) % n1;
            let im = (i + n1 - 1) % n1;
            for j in 0..self.n2 {
                out[[i, j]] = (f[[ip, j]] - f[[im, j]]) * inv;
            }
        }
        out
    }

    /// d/dx2, centered in the interior, one-sided second order at j = 0 and
    /// j = n2-1. Exact for polynomials of degree <= 2 in x2.
    pub fn d2(&self, f: &Array2<f64>) -> Array2<f64> {
        let n2 = self.n2;
        let inv = 1.0 / (2.0 * self.h2);
        let mut out = Array2::zeros(f.raw_dim());
        for i in 0..self.n1 {
            out[[i, 0]] = (-3.0 * f[[i, 0]] + 4.0 * f[[i, 1]] - f[[i, 2]]) * inv;
            for j in 1..n2 - 1 {
                out[[i, j]] = (f[[i, j + 1]] - f[[i, j - 1]]) * inv;
            }
            out[[i, n2 - 1]] =
                (3.0 * f[[i, n2 - 1]] - 4.0 * f[[i, n2 - 2]] + f[[i, n2 - 3]]) * inv;
        }
        out
    }

    /// D2 of an x2-flux with the flux value at each boundary face replaced by
    /// `sign * traction`. The replacement is what enforces the traction
    /// boundary condition weakly: rows 0 and 1 (and their mirrors) see the
    /// prescribed boundary flux instead of the field value.
    pub fn flux_div2(
        &self,
        flux: &VectorField,
        traction_bottom: &BoundaryTrace,
        traction_top: &BoundaryTrace,
    ) -> VectorField {
        debug_assert_eq!(traction_bottom.face, Face::Bottom);
        debug_assert_eq!(traction_top.face, Face::Top);
        let n2 = self.n2;
        let inv = 1.0 / (2.0 * self.h2);
        let mut out = VectorField::zeros(*self);
        for k in 0..2 {
            let f = &flux.data[k];
            let o = &mut out.data[k];
            for i in 0..self.n1 {
                let gb = Face::Bottom.sign() * traction_bottom.values[[k, i]];
                let gt = Face::Top.sign() * traction_top.values[[k, i]];
                o[[i, 0]] = (-3.0 * gb + 4.0 * f[[i, 1]] - f[[i, 2]]) * inv;
                o[[i, 1]] = (f[[i, 2]] - gb) * inv;
                for j in 2..n2 - 2 {
                    o[[i, j]] = (f[[i, j + 1]] - f[[i, j - 1]]) * inv;
                }
                o[[i, n2 - 2]] = (gt - f[[i, n2 - 3]]) * inv;
                o[[i, n2 - 1]] = (3.0 * gt - 4.0 * f[[i, n2 - 2]] + f[[i, n2 - 3]]) * inv;
            }
        }
        out
    }

    /// Periodic centered difference along a single face row.
    pub fn d1_row(&self, row: &[f64]) -> Vec<f64> {
        let n1 = self.n1;
        let inv = 1.0 / (2.0 * self.h1);
        (0..n1)
            .map(|i| (row[(i + 1) % n1] - row[(i + n1 - 1) % n1]) * inv)
            .collect()
    }

    /// Volume integral with trapezoid weights in x2.
    pub fn integrate(&self, f: &Array2<f64>) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n1 {
            for j in 0..self.n2 {
                acc += self.quad_weight(j) * f[[i, j]];
            }
        }
        acc
    }

    /// L2(Omega)^2 inner-product norm squared of a scalar plane.
    pub fn l2_sq(&self, f: &Array2<f64>) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n1 {
            for j in 0..self.n2 {
                acc += self.quad_weight(j) * f[[i, j]] * f[[i, j]];
            }
        }
        acc
    }

    /// Boundary integral over one face (rectangle rule, exact for periodic).
    pub fn integrate_face(&self, row: &[f64]) -> f64 {
        self.h1 * row.iter().sum::<f64>()
    }
}

/// Fractional Sobolev norm |g|_s on the periodic boundary circle:
/// `(sum_k (1 + k^2)^s |ghat_k|^2)^{1/2}` with the DFT normalized by 1/n1 and
/// angular wavenumbers k in {-n1/2, ..., n1/2 - 1}. For s = 0 this is the
/// h1-weighted l2 norm (Parseval).
pub fn boundary_norm(trace: &BoundaryTrace, s: f64) -> Result<f64, GridError> {
    if !trace.is_finite() || !s.is_finite() {
        return Err(GridError::NonFinite("boundary_norm"));
    }
    let n = trace.len();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut total = 0.0;
    for c in 0..trace.components() {
        let mut buf: Vec<Complex<f64>> = (0..n)
            .map(|i| Complex::new(trace.values[[c, i]], 0.0))
            .collect();
        fft.process(&mut buf);
        for (idx, z) in buf.iter().enumerate() {
            // FFT bin idx maps to wavenumber idx for idx < n/2, idx - n otherwise.
            let k = if idx <= n / 2 - 1 {
                idx as f64
            } else {
                idx as f64 - n as f64
            };
            let ghat = z / n as f64;
            total += (1.0 + k * k).powf(s) * ghat.norm_sqr();
        }
    }
    Ok(total.sqrt())
}

/// All discrete partials of `f` up to total order `k` (repeated d1/d2).
/// Entry `(a1, a2)` holds d1^a1 d2^a2 f.
pub fn derivatives_up_to(grid: &Grid, f: &Array2<f64>, k: usize) -> Vec<((usize, usize), Array2<f64>)> {
    assert!(k <= 3, "sobolev_norm supports k <= 3");
    let mut out: Vec<((usize, usize), Array2<f64>)> = vec![((0, 0), f.clone())];
    for order in 1..=k {
        for a1 in (0..=order).rev() {
            let a2 = order - a1;
            let prev = if a1 > 0 {
                let p = out
                    .iter()
                    .find(|((b1, b2), _)| *b1 == a1 - 1 && *b2 == a2)
                    .unwrap();
                grid.d1(&p.1)
            } else {
                let p = out
                    .iter()
                    .find(|((b1, b2), _)| *b1 == 0 && *b2 == a2 - 1)
                    .unwrap();
                grid.d2(&p.1)
            };
            out.push(((a1, a2), prev));
        }
    }
    out
}

/// Discrete H^k norm of a scalar field, 0 <= k <= 3.
pub fn sobolev_norm_scalar(f: &ScalarField, k: usize) -> f64 {
    let derivs = derivatives_up_to(&f.grid, &f.data, k);
    derivs
        .iter()
        .map(|(_, d)| f.grid.l2_sq(d))
        .sum::<f64>()
        .sqrt()
}

/// Discrete H^k norm of a vector field (components summed in quadrature).
pub fn sobolev_norm_vector(f: &VectorField, k: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..2 {
        let derivs = derivatives_up_to(&f.grid, &f.data[c], k);
        total += derivs.iter().map(|(_, d)| f.grid.l2_sq(d)).sum::<f64>();
    }
    total.sqrt()
}
