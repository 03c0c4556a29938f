//! Scalar and vector fields on a grid: expression-backed (with exact
//! symbolic derivatives) or grid-sampled (with central finite differences,
//! one-sided at the boundary).

pub mod expr;

pub use expr::{parse, parse_vector, Expr, Var};

use crate::error::{Error, Result};
use crate::geometry::Grid;

/// Scalar field storage.
#[derive(Debug, Clone)]
pub enum ScalarField {
    /// Analytic expression over x1, x2, t.
    Expr(Expr),
    /// One value per cell, constant in time.
    Cells(Vec<f64>),
    /// `values[time_node][cell]`, linear interpolation between time nodes.
    SpaceTime(Vec<Vec<f64>>),
}

impl ScalarField {
    pub fn constant(c: f64) -> ScalarField {
        ScalarField::Expr(Expr::Const(c))
    }

    pub fn from_expr_str(src: &str) -> Result<ScalarField> {
        Ok(ScalarField::Expr(parse(src)?))
    }

    /// Value at a cell center at time t.
    pub fn eval_cell(&self, grid: &Grid, cell: usize, t: f64) -> f64 {
        match self {
            ScalarField::Expr(e) => e.eval(&grid.cell_center(cell), t),
            ScalarField::Cells(v) => v[cell],
            ScalarField::SpaceTime(v) => {
                let (k, w) = time_bracket(grid, t, v.len());
                if w == 0.0 {
                    v[k][cell]
                } else {
                    (1.0 - w) * v[k][cell] + w * v[k + 1][cell]
                }
            }
        }
    }

    /// Value at an arbitrary point. Sampled fields return the value of the
    /// nearest cell (piecewise-constant reconstruction).
    pub fn eval_point(&self, grid: &Grid, x: &[f64; 2], t: f64) -> Result<f64> {
        if !grid.contains(x) {
            return Err(Error::Field(format!("point {x:?} outside the domain")));
        }
        match self {
            ScalarField::Expr(e) => Ok(e.eval(x, t)),
            _ => Ok(self.eval_cell(grid, nearest_cell(grid, x), t)),
        }
    }

    /// Sample at all cell centers at time t.
    pub fn sample_cells(&self, grid: &Grid, t: f64) -> Vec<f64> {
        (0..grid.n_cells())
            .map(|c| self.eval_cell(grid, c, t))
            .collect()
    }

    /// Check evaluability (finite values) on all grid nodes and time nodes.
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        match self {
            ScalarField::Expr(_) => {
                for &t in &[0.0, 0.5 * grid.t_final, grid.t_final] {
                    for c in 0..grid.n_cells() {
                        let v = self.eval_cell(grid, c, t);
                        if !v.is_finite() {
                            return Err(Error::Field(format!(
                                "non-finite value at cell {c}, t={t}"
                            )));
                        }
                    }
                }
                Ok(())
            }
            ScalarField::Cells(v) => {
                if v.len() != grid.n_cells() {
                    return Err(Error::Field("cell sample shape mismatch".into()));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Field("non-finite cell sample".into()));
                }
                Ok(())
            }
            ScalarField::SpaceTime(v) => {
                if v.len() != grid.n_steps + 1 || v.iter().any(|s| s.len() != grid.n_cells()) {
                    return Err(Error::Field("space-time sample shape mismatch".into()));
                }
                Ok(())
            }
        }
    }

    /// Gradient: symbolic for expressions, central differences for cell
    /// samples (one-sided at the boundary).
    pub fn gradient(&self, grid: &Grid) -> Result<VectorField> {
        match self {
            ScalarField::Expr(e) => {
                let comps = (0..grid.dim)
                    .map(|a| ScalarField::Expr(e.diff(Var::X(a))))
                    .collect();
                Ok(VectorField { components: comps })
            }
            ScalarField::Cells(v) => {
                let comps = (0..grid.dim)
                    .map(|a| ScalarField::Cells(fd_derivative(grid, v, a)))
                    .collect();
                Ok(VectorField { components: comps })
            }
            ScalarField::SpaceTime(_) => {
                Err(Error::Field("gradient of a space-time sample is not supported".into()))
            }
        }
    }

    /// Laplacian: symbolic for expressions, second differences for samples.
    pub fn laplacian(&self, grid: &Grid) -> Result<ScalarField> {
        match self {
            ScalarField::Expr(e) => {
                let mut acc = Expr::Const(0.0);
                for a in 0..grid.dim {
                    let second = e.diff(Var::X(a)).diff(Var::X(a));
                    acc = Expr::Add(Box::new(acc), Box::new(second));
                }
                Ok(ScalarField::Expr(acc))
            }
            ScalarField::Cells(v) => {
                let mut out = vec![0.0; grid.n_cells()];
                for a in 0..grid.dim {
                    let d2 = fd_second_derivative(grid, v, a);
                    for (o, d) in out.iter_mut().zip(d2) {
                        *o += d;
                    }
                }
                Ok(ScalarField::Cells(out))
            }
            ScalarField::SpaceTime(_) => {
                Err(Error::Field("laplacian of a space-time sample is not supported".into()))
            }
        }
    }

    /// Symbolic time derivative (expressions only).
    pub fn dt(&self) -> Result<ScalarField> {
        match self {
            ScalarField::Expr(e) => Ok(ScalarField::Expr(e.diff(Var::T))),
            _ => Err(Error::Field("time derivative needs an expression-backed field".into())),
        }
    }

    /// Grid sup norm at t=0.
    pub fn sup_norm(&self, grid: &Grid) -> f64 {
        (0..grid.n_cells())
            .map(|c| self.eval_cell(grid, c, 0.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Vector field with `grid.dim` scalar components.
#[derive(Debug, Clone)]
pub struct VectorField {
    pub components: Vec<ScalarField>,
}

impl VectorField {
    pub fn constant(v: &[f64]) -> VectorField {
        VectorField {
            components: v.iter().map(|&c| ScalarField::constant(c)).collect(),
        }
    }

    pub fn from_expr_str(src: &str) -> Result<VectorField> {
        let comps = parse_vector(src)?;
        Ok(VectorField {
            components: comps.into_iter().map(ScalarField::Expr).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if self.dim() != grid.dim {
            return Err(Error::Field(format!(
                "vector field has {} components, grid dim is {}",
                self.dim(),
                grid.dim
            )));
        }
        for c in &self.components {
            c.validate(grid)?;
        }
        Ok(())
    }

    pub fn eval_cell(&self, grid: &Grid, cell: usize, t: f64) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (a, c) in self.components.iter().enumerate() {
            out[a] = c.eval_cell(grid, cell, t);
        }
        out
    }

    pub fn eval_point(&self, grid: &Grid, x: &[f64; 2], t: f64) -> Result<[f64; 2]> {
        let mut out = [0.0; 2];
        for (a, c) in self.components.iter().enumerate() {
            out[a] = c.eval_point(grid, x, t)?;
        }
        Ok(out)
    }

    /// Divergence: sum of component derivatives along their own axes.
    pub fn divergence(&self, grid: &Grid) -> Result<ScalarField> {
        let mut exprs = Vec::new();
        let mut sampled: Option<Vec<f64>> = None;
        for (a, c) in self.components.iter().enumerate() {
            match c {
                ScalarField::Expr(e) => exprs.push(e.diff(Var::X(a))),
                ScalarField::Cells(v) => {
                    let d = fd_derivative(grid, v, a);
                    let acc = sampled.get_or_insert_with(|| vec![0.0; grid.n_cells()]);
                    for (o, dv) in acc.iter_mut().zip(d) {
                        *o += dv;
                    }
                }
                ScalarField::SpaceTime(_) => {
                    return Err(Error::Field(
                        "divergence of a space-time sample is not supported".into(),
                    ))
                }
            }
        }
        match sampled {
            None => {
                let mut acc = Expr::Const(0.0);
                for e in exprs {
                    acc = Expr::Add(Box::new(acc), Box::new(e));
                }
                Ok(ScalarField::Expr(acc))
            }
            Some(mut v) => {
                // mixed storage: sample the expression parts too
                for e in exprs {
                    for (c, o) in v.iter_mut().enumerate() {
                        *o += e.eval(&grid.cell_center(c), 0.0);
                    }
                }
                Ok(ScalarField::Cells(v))
            }
        }
    }

    /// Dot product with another vector field, sampled at cell centers.
    pub fn dot_cells(&self, grid: &Grid, other: &VectorField, t: f64) -> Vec<f64> {
        (0..grid.n_cells())
            .map(|c| {
                let a = self.eval_cell(grid, c, t);
                let b = other.eval_cell(grid, c, t);
                a[0] * b[0] + a[1] * b[1]
            })
            .collect()
    }

    /// Grid sup norm of the Euclidean magnitude at t=0.
    pub fn sup_norm(&self, grid: &Grid) -> f64 {
        (0..grid.n_cells())
            .map(|c| {
                let v = self.eval_cell(grid, c, 0.0);
                (v[0] * v[0] + v[1] * v[1]).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

fn nearest_cell(grid: &Grid, x: &[f64; 2]) -> usize {
    let mut ij = [0usize; 2];
    for a in 0..grid.dim {
        let f = ((x[a] - grid.lo[a]) / grid.h[a] - 0.5).round();
        ij[a] = f.clamp(0.0, (grid.n[a] - 1) as f64) as usize;
    }
    grid.cell_index(ij[0], ij[1])
}

fn time_bracket(grid: &Grid, t: f64, n_nodes: usize) -> (usize, f64) {
    let dt = grid.dt();
    let pos = (t / dt).clamp(0.0, (n_nodes - 1) as f64);
    let k = pos.floor() as usize;
    if k + 1 >= n_nodes {
        (n_nodes - 1, 0.0)
    } else {
        (k, pos - k as f64)
    }
}

/// Central first derivative along `axis`, second-order one-sided at the
/// boundary.
pub fn fd_derivative(grid: &Grid, v: &[f64], axis: usize) -> Vec<f64> {
    let (nx, ny) = (grid.n[0], grid.n[1]);
    let h = grid.h[axis];
    let mut out = vec![0.0; v.len()];
    let n_axis = grid.n[axis];
    for j in 0..ny {
        for i in 0..nx {
            let idx = grid.cell_index(i, j);
            let pos = if axis == 0 { i } else { j };
            let at = |p: usize| {
                let (ii, jj) = if axis == 0 { (p, j) } else { (i, p) };
                v[grid.cell_index(ii, jj)]
            };
            out[idx] = if pos == 0 {
                (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
            } else if pos == n_axis - 1 {
                (3.0 * at(n_axis - 1) - 4.0 * at(n_axis - 2) + at(n_axis - 3)) / (2.0 * h)
            } else {
                (at(pos + 1) - at(pos - 1)) / (2.0 * h)
            };
        }
    }
    out
}

/// Second derivative along `axis`; the boundary rows reuse the adjacent
/// interior 3-point stencil.
pub fn fd_second_derivative(grid: &Grid, v: &[f64], axis: usize) -> Vec<f64> {
    let (nx, ny) = (grid.n[0], grid.n[1]);
    let h2 = grid.h[axis] * grid.h[axis];
    let mut out = vec![0.0; v.len()];
    let n_axis = grid.n[axis];
    for j in 0..ny {
        for i in 0..nx {
            let idx = grid.cell_index(i, j);
            let pos = if axis == 0 { i } else { j };
            let at = |p: usize| {
                let (ii, jj) = if axis == 0 { (p, j) } else { (i, p) };
                v[grid.cell_index(ii, jj)]
            };
            let p = pos.clamp(1, n_axis - 2);
            out[idx] = (at(p - 1) - 2.0 * at(p) + at(p + 1)) / h2;
        }
    }
    out
}
