//! Axis-aligned rectangular grids on Omega x (0,T), boundary faces with
//! outward normals, inflow/outflow classification, and the quadrature
//! rules used by every integral in the library (midpoint in space,
//! trapezoid in time).

use crate::error::{Error, Result};
use crate::fields::VectorField;

/// Which side of the axis a boundary face sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Low,
    High,
}

/// A boundary face of the rectangular domain.
#[derive(Debug, Clone)]
pub struct Face {
    /// Face center coordinates (second entry unused in 1D).
    pub center: [f64; 2],
    /// Outward unit normal.
    pub normal: [f64; 2],
    /// Face measure (1 in 1D, edge length in 2D).
    pub area: f64,
    /// Axis the normal is aligned with.
    pub axis: usize,
    pub side: Side,
    /// Index of the cell adjacent to this face.
    pub cell: usize,
}

/// Uniform rectangular space grid plus a uniform time axis.
#[derive(Debug, Clone)]
pub struct Grid {
    pub dim: usize,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub n: [usize; 2],
    pub t_final: f64,
    pub n_steps: usize,
    pub h: [f64; 2],
    faces: Vec<Face>,
}

impl Grid {
    /// Build a grid; rejects non-positive extents or too-coarse resolutions.
    pub fn new(
        dim: usize,
        lo: &[f64],
        hi: &[f64],
        n_cells: &[usize],
        t_final: f64,
        n_steps: usize,
    ) -> Result<Grid> {
        if dim != 1 && dim != 2 {
            return Err(Error::Grid(format!("dim must be 1 or 2, got {dim}")));
        }
        if lo.len() != dim || hi.len() != dim || n_cells.len() != dim {
            return Err(Error::Grid("bounds/resolution length must equal dim".into()));
        }
        for a in 0..dim {
            if !(hi[a] > lo[a]) {
                return Err(Error::Grid(format!(
                    "axis {a}: hi ({}) must exceed lo ({})",
                    hi[a], lo[a]
                )));
            }
            if n_cells[a] < 2 {
                return Err(Error::Grid(format!("axis {a}: need at least 2 cells")));
            }
        }
        if !(t_final > 0.0) {
            return Err(Error::Grid("final time must be positive".into()));
        }
        if n_steps < 2 {
            return Err(Error::Grid("need at least 2 time steps".into()));
        }
        let mut glo = [0.0; 2];
        let mut ghi = [0.0; 2];
        let mut gn = [1usize; 2];
        for a in 0..dim {
            glo[a] = lo[a];
            ghi[a] = hi[a];
            gn[a] = n_cells[a];
        }
        let mut h = [1.0; 2];
        for a in 0..dim {
            h[a] = (ghi[a] - glo[a]) / gn[a] as f64;
        }
        let mut grid = Grid {
            dim,
            lo: glo,
            hi: ghi,
            n: gn,
            t_final,
            n_steps,
            h,
            faces: Vec::new(),
        };
        grid.faces = grid.build_faces();
        Ok(grid)
    }

    fn build_faces(&self) -> Vec<Face> {
        let mut faces = Vec::new();
        if self.dim == 1 {
            faces.push(Face {
                center: [self.lo[0], 0.0],
                normal: [-1.0, 0.0],
                area: 1.0,
                axis: 0,
                side: Side::Low,
                cell: 0,
            });
            faces.push(Face {
                center: [self.hi[0], 0.0],
                normal: [1.0, 0.0],
                area: 1.0,
                axis: 0,
                side: Side::High,
                cell: self.n[0] - 1,
            });
        } else {
            let (nx, ny) = (self.n[0], self.n[1]);
            // x1 = lo and x1 = hi faces
            for j in 0..ny {
                let yc = self.lo[1] + (j as f64 + 0.5) * self.h[1];
                faces.push(Face {
                    center: [self.lo[0], yc],
                    normal: [-1.0, 0.0],
                    area: self.h[1],
                    axis: 0,
                    side: Side::Low,
                    cell: self.cell_index(0, j),
                });
                faces.push(Face {
                    center: [self.hi[0], yc],
                    normal: [1.0, 0.0],
                    area: self.h[1],
                    axis: 0,
                    side: Side::High,
                    cell: self.cell_index(nx - 1, j),
                });
            }
            // x2 = lo and x2 = hi faces
            for i in 0..nx {
                let xc = self.lo[0] + (i as f64 + 0.5) * self.h[0];
                faces.push(Face {
                    center: [xc, self.lo[1]],
                    normal: [0.0, -1.0],
                    area: self.h[0],
                    axis: 1,
                    side: Side::Low,
                    cell: self.cell_index(i, 0),
                });
                faces.push(Face {
                    center: [xc, self.hi[1]],
                    normal: [0.0, 1.0],
                    area: self.h[0],
                    axis: 1,
                    side: Side::High,
                    cell: self.cell_index(i, ny - 1),
                });
            }
        }
        faces
    }

    pub fn n_cells(&self) -> usize {
        self.n[0] * self.n[1]
    }

    pub fn cell_volume(&self) -> f64 {
        if self.dim == 1 {
            self.h[0]
        } else {
            self.h[0] * self.h[1]
        }
    }

    #[inline]
    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n[0] && j < self.n[1]);
        j * self.n[0] + i
    }

    #[inline]
    pub fn cell_ij(&self, c: usize) -> (usize, usize) {
        (c % self.n[0], c / self.n[0])
    }

    /// Center of cell `c`.
    pub fn cell_center(&self, c: usize) -> [f64; 2] {
        let (i, j) = self.cell_ij(c);
        [
            self.lo[0] + (i as f64 + 0.5) * self.h[0],
            self.lo[1] + (j as f64 + 0.5) * self.h[1],
        ]
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.n_steps as f64
    }

    /// Time nodes 0..=n_steps.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| k as f64 * self.dt()).collect()
    }

    pub fn contains(&self, x: &[f64; 2]) -> bool {
        (0..self.dim).all(|a| x[a] >= self.lo[a] && x[a] <= self.hi[a])
    }

    /// Midpoint-rule integral of cellwise samples over Omega.
    pub fn integrate_cells(&self, samples: &[f64]) -> f64 {
        assert_eq!(samples.len(), self.n_cells(), "cell sample shape mismatch");
        samples.iter().sum::<f64>() * self.cell_volume()
    }

    /// Integral over a subset of boundary faces of per-face samples.
    pub fn integrate_faces(&self, face_ids: &[usize], samples: &[f64]) -> f64 {
        assert_eq!(face_ids.len(), samples.len(), "face sample shape mismatch");
        face_ids
            .iter()
            .zip(samples)
            .map(|(&f, v)| v * self.faces[f].area)
            .sum()
    }

    /// Trapezoid rule over the time axis for nodal values.
    pub fn integrate_time(&self, nodal: &[f64]) -> f64 {
        assert_eq!(nodal.len(), self.n_steps + 1, "time sample shape mismatch");
        let dt = self.dt();
        let inner: f64 = nodal[1..nodal.len() - 1].iter().sum();
        dt * (0.5 * nodal[0] + inner + 0.5 * nodal[nodal.len() - 1])
    }

    /// Space-time integral: midpoint in space, trapezoid in time.
    /// `samples[k][c]` is the value at time node k, cell c.
    pub fn integrate_space_time(&self, samples: &[Vec<f64>]) -> f64 {
        let per_node: Vec<f64> = samples.iter().map(|s| self.integrate_cells(s)).collect();
        self.integrate_time(&per_node)
    }

    /// Integral over faces x (0,T): `samples[k][m]` at time node k, m-th face
    /// of `face_ids`.
    pub fn integrate_faces_time(&self, face_ids: &[usize], samples: &[Vec<f64>]) -> f64 {
        let per_node: Vec<f64> = samples
            .iter()
            .map(|s| self.integrate_faces(face_ids, s))
            .collect();
        self.integrate_time(&per_node)
    }
}

/// Disjoint classification of boundary faces by the sign of H.nu.
#[derive(Debug, Clone)]
pub struct BoundaryPartition {
    pub plus_faces: Vec<usize>,
    pub minus_faces: Vec<usize>,
    pub characteristic_faces: Vec<usize>,
    /// Tolerance band used for the characteristic class.
    pub eps_nu: f64,
    /// H.nu at each face center (indexed by face id).
    pub h_dot_nu: Vec<f64>,
}

/// Classify boundary faces into outflow (H.nu > eps), inflow (H.nu < -eps)
/// and characteristic (|H.nu| <= eps).
pub fn classify_boundary(grid: &Grid, h_field: &VectorField, eps_nu: f64) -> Result<BoundaryPartition> {
    let mut plus = Vec::new();
    let mut minus = Vec::new();
    let mut chars = Vec::new();
    let mut h_dot_nu = Vec::with_capacity(grid.faces().len());
    for (id, face) in grid.faces().iter().enumerate() {
        let hv = h_field.eval_point(grid, &face.center, 0.0)?;
        let dn: f64 = (0..grid.dim).map(|a| hv[a] * face.normal[a]).sum();
        h_dot_nu.push(dn);
        if dn > eps_nu {
            plus.push(id);
        } else if dn < -eps_nu {
            minus.push(id);
        } else {
            chars.push(id);
        }
    }
    Ok(BoundaryPartition {
        plus_faces: plus,
        minus_faces: minus,
        characteristic_faces: chars,
        eps_nu,
        h_dot_nu,
    })
}

/// Default characteristic-band tolerance, scaled to the field magnitude.
pub fn default_eps_nu(h_sup: f64) -> f64 {
    1e-12 * h_sup.max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::VectorField;
    use approx::assert_relative_eq;

    #[test]
    fn grid_1d_centers() {
        let g = Grid::new(1, &[0.0], &[1.0], &[4], 1.0, 4).unwrap();
        let centers: Vec<f64> = (0..4).map(|c| g.cell_center(c)[0]).collect();
        assert_eq!(centers, vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn grid_2d_boundary_measure() {
        let g = Grid::new(2, &[0.0, 0.0], &[1.0, 1.0], &[4, 4], 1.0, 4).unwrap();
        assert_eq!(g.faces().len(), 16);
        let total: f64 = g.faces().iter().map(|f| f.area).sum();
        assert_relative_eq!(total, 4.0, epsilon = 1e-14);
    }

    #[test]
    fn opposite_normals_negate() {
        let g = Grid::new(2, &[0.0, 0.0], &[2.0, 1.0], &[4, 3], 1.0, 4).unwrap();
        for f in g.faces() {
            let nrm: f64 = f.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_relative_eq!(nrm, 1.0, epsilon = 1e-15);
        }
        let low_x: Vec<_> = g.faces().iter().filter(|f| f.axis == 0 && f.side == Side::Low).collect();
        let high_x: Vec<_> = g.faces().iter().filter(|f| f.axis == 0 && f.side == Side::High).collect();
        assert_eq!(low_x.len(), high_x.len());
        assert_eq!(low_x[0].normal[0], -high_x[0].normal[0]);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(Grid::new(1, &[1.0], &[0.0], &[4], 1.0, 4).is_err());
        assert!(Grid::new(1, &[0.0], &[1.0], &[1], 1.0, 4).is_err());
        assert!(Grid::new(1, &[0.0], &[1.0], &[4], -1.0, 4).is_err());
    }

    #[test]
    fn quadrature_measures() {
        let g = Grid::new(2, &[0.0, 0.0], &[1.0, 1.0], &[8, 8], 1.0, 4).unwrap();
        let ones = vec![1.0; g.n_cells()];
        assert_relative_eq!(g.integrate_cells(&ones), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn quadrature_sine_midpoint_order() {
        // integral of sin(pi x) over (0,1) = 2/pi
        let exact = 2.0 / std::f64::consts::PI;
        let g = Grid::new(1, &[0.0], &[1.0], &[256], 1.0, 4).unwrap();
        let v: Vec<f64> = (0..256)
            .map(|c| (std::f64::consts::PI * g.cell_center(c)[0]).sin())
            .collect();
        assert!((g.integrate_cells(&v) - exact).abs() < 1e-4);

        // refining by 2 shrinks the error by about 4 (midpoint is O(h^2))
        let g2 = Grid::new(1, &[0.0], &[1.0], &[512], 1.0, 4).unwrap();
        let v2: Vec<f64> = (0..512)
            .map(|c| (std::f64::consts::PI * g2.cell_center(c)[0]).sin())
            .collect();
        let e1 = (g.integrate_cells(&v) - exact).abs();
        let e2 = (g2.integrate_cells(&v2) - exact).abs();
        assert!(e1 / e2 > 3.5 && e1 / e2 < 4.5);
    }

    #[test]
    fn classify_constant_field_1d() {
        let g = Grid::new(1, &[0.0], &[1.0], &[8], 1.5, 8).unwrap();
        let h = VectorField::constant(&[1.0]);
        let p = classify_boundary(&g, &h, 1e-12).unwrap();
        assert_eq!(p.plus_faces.len(), 1);
        assert_eq!(p.minus_faces.len(), 1);
        assert!(p.characteristic_faces.is_empty());
        assert_eq!(g.faces()[p.plus_faces[0]].center[0], 1.0);
        assert_eq!(g.faces()[p.minus_faces[0]].center[0], 0.0);
    }

    #[test]
    fn classify_constant_field_2d() {
        let g = Grid::new(2, &[0.0, 0.0], &[1.0, 1.0], &[4, 4], 2.0, 8).unwrap();
        let h = VectorField::constant(&[1.0, 0.5]);
        let p = classify_boundary(&g, &h, 1e-12).unwrap();
        // plus: x1 = 1 and x2 = 1 faces; minus: x1 = 0 and x2 = 0 faces
        assert_eq!(p.plus_faces.len(), 8);
        assert_eq!(p.minus_faces.len(), 8);
        for &f in &p.plus_faces {
            let face = &g.faces()[f];
            assert!(face.side == Side::High);
        }
    }

    #[test]
    fn classify_orthogonal_flow_characteristic() {
        let g = Grid::new(2, &[0.0, 0.0], &[1.0, 1.0], &[4, 4], 2.0, 8).unwrap();
        let h = VectorField::constant(&[1.0, 0.0]);
        let p = classify_boundary(&g, &h, 1e-12).unwrap();
        assert_eq!(p.characteristic_faces.len(), 8); // all x2 faces
        assert_eq!(p.plus_faces.len(), 4);
        assert_eq!(p.minus_faces.len(), 4);
    }

    #[test]
    fn boundary_time_measure() {
        // constant 1 over outflow x (0,T), Omega=(0,1), H=1, T=1.5 -> 1.5
        let g = Grid::new(1, &[0.0], &[1.0], &[8], 1.5, 6).unwrap();
        let h = VectorField::constant(&[1.0]);
        let p = classify_boundary(&g, &h, 1e-12).unwrap();
        let samples = vec![vec![1.0]; g.n_steps + 1];
        assert_relative_eq!(
            g.integrate_faces_time(&p.plus_faces, &samples),
            1.5,
            epsilon = 1e-14
        );
    }
}
