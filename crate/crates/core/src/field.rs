//! Node-centered field storage on the reference domain.
//!
//! All fields live on the nodes of a [`Grid`]: periodic in `x1`, bounded in
//! `x2` with both boundary rows stored. Components are kept as separate
//! `Array2<f64>` planes indexed `[i, j]` with `i` the periodic direction.

use ndarray::Array2;

use crate::grid::Grid;

/// One scalar unknown per node.
#[derive(Debug, Clone)]
pub struct ScalarField {
    pub grid: Grid,
    pub data: Array2<f64>,
}

/// Two components per node.
#[derive(Debug, Clone)]
pub struct VectorField {
    pub grid: Grid,
    pub data: [Array2<f64>; 2],
}

/// Four components per node, row-major: `m[k]` holds entry (k / 2, k % 2).
#[derive(Debug, Clone)]
pub struct MatrixField {
    pub grid: Grid,
    pub data: [Array2<f64>; 4],
}

/// Which horizontal face of the reference domain a trace lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Face {
    /// x2 = 0, outward normal N = -e2.
    Bottom,
    /// x2 = 1, outward normal N = +e2.
    Top,
}

impl Face {
    /// Outward-normal sign s = N2.
    pub fn sign(self) -> f64 {
        match self {
            Face::Bottom => -1.0,
            Face::Top => 1.0,
        }
    }

    /// Row index of the face in a field array.
    pub fn row(self, grid: &Grid) -> usize {
        match self {
            Face::Bottom => 0,
            Face::Top => grid.n2 - 1,
        }
    }

    pub const BOTH: [Face; 2] = [Face::Bottom, Face::Top];
}

/// Values of a (possibly vector) quantity restricted to one face.
#[derive(Debug, Clone)]
pub struct BoundaryTrace {
    pub face: Face,
    /// Shape (components, n1).
    pub values: Array2<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            data: Array2::zeros((grid.n1, grid.n2)),
        }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Self {
            grid,
            data: Array2::from_elem((grid.n1, grid.n2), c),
        }
    }

    /// Fill from a closure of the node coordinates.
    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            grid,
            data: Array2::from_shape_fn((grid.n1, grid.n2), |(i, j)| {
                let (x1, x2) = grid.node(i, j);
                f(x1, x2)
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Restriction to one face as a 1-component trace.
    pub fn trace(&self, face: Face) -> BoundaryTrace {
        let j = face.row(&self.grid);
        let mut values = Array2::zeros((1, self.grid.n1));
        for i in 0..self.grid.n1 {
            values[[0, i]] = self.data[[i, j]];
        }
        BoundaryTrace { face, values }
    }
}

impl VectorField {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            data: [
                Array2::zeros((grid.n1, grid.n2)),
                Array2::zeros((grid.n1, grid.n2)),
            ],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> [f64; 2]) -> Self {
        let mut out = Self::zeros(grid);
        for i in 0..grid.n1 {
            for j in 0..grid.n2 {
                let (x1, x2) = grid.node(i, j);
                let v = f(x1, x2);
                out.data[0][[i, j]] = v[0];
                out.data[1][[i, j]] = v[1];
            }
        }
        out
    }

    pub fn component(&self, k: usize) -> ScalarField {
        ScalarField {
            grid: self.grid,
            data: self.data[k].clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self, face: Face) -> BoundaryTrace {
        let j = face.row(&self.grid);
        let mut values = Array2::zeros((2, self.grid.n1));
        for k in 0..2 {
            for i in 0..self.grid.n1 {
                values[[k, i]] = self.data[k][[i, j]];
            }
        }
        BoundaryTrace { face, values }
    }

    /// self + c * other, elementwise.
    pub fn add_scaled(&self, other: &VectorField, c: f64) -> VectorField {
        VectorField {
            grid: self.grid,
            data: [
                &self.data[0] + &(c * &other.data[0]),
                &self.data[1] + &(c * &other.data[1]),
            ],
        }
    }
}

impl MatrixField {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            data: [
                Array2::zeros((grid.n1, grid.n2)),
                Array2::zeros((grid.n1, grid.n2)),
                Array2::zeros((grid.n1, grid.n2)),
                Array2::zeros((grid.n1, grid.n2)),
            ],
        }
    }

    /// Entry (r, c) plane, r, c in {0, 1}.
    pub fn entry(&self, r: usize, c: usize) -> &Array2<f64> {
        &self.data[2 * r + c]
    }

    pub fn entry_mut(&mut self, r: usize, c: usize) -> &mut Array2<f64> {
        &mut self.data[2 * r + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl BoundaryTrace {
    pub fn zeros(grid: &Grid, face: Face, components: usize) -> Self {
        Self {
            face,
            values: Array2::zeros((components, grid.n1)),
        }
    }

    pub fn components(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}
