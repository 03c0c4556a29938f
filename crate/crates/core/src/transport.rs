//! Forward solvers for the transport equation
//! dy/dt + H.grad y + V y = F on Omega x (0,T), with inflow data on the
//! faces where H.nu < 0.
//!
//! Two discretizations share one sparse substep matrix: the donor-cell
//! upwind scheme in advective form (generic variant) and in flux form
//! (conservative variant, which telescopes mass exactly). A
//! semi-Lagrangian characteristics evaluator serves as an independent
//! oracle. Trace output goes to CSV (`face,t,value`) or a little-endian
//! binary dump (format documented at [`write_field_bin`]).

use std::io::{Read as _, Write as _};

use crate::error::{Error, Result};
use crate::fields::{ScalarField, VectorField};
use crate::geometry::{BoundaryPartition, Grid, Side};
use crate::par;

/// Which form of the equation the scheme discretizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// dy/dt + H.grad y + V y = F (advective upwind).
    Generic,
    /// d rho/dt + div(rho H) = F (flux-form upwind; V is ignored and the
    /// effective reaction is div H).
    Conservative,
}

/// The assembled scheme: a sparse rate matrix A with du/dt = -A u +
/// inflow + source, its transpose, the inflow injection terms, and the
/// substep count chosen so every explicit update coefficient stays
/// non-negative.
pub struct UpwindScheme {
    pub variant: Variant,
    /// Rows of A: (column, coefficient), duplicates merged.
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Rows of A transposed.
    pub rows_t: Vec<Vec<(usize, f64)>>,
    /// (cell, face id, coefficient): du/dt at `cell` gains coef * g(face, t).
    pub inflow_terms: Vec<(usize, usize, f64)>,
    /// (cell, face id, H.nu): boundary flux bookkeeping for the mass ledger.
    pub boundary_flux: Vec<(usize, usize, f64)>,
    pub n_sub: usize,
    pub dt_sub: f64,
}

fn push_entry(row: &mut Vec<(usize, f64)>, col: usize, coef: f64) {
    for e in row.iter_mut() {
        if e.0 == col {
            e.1 += coef;
            return;
        }
    }
    row.push((col, coef));
}

impl UpwindScheme {
    pub fn assemble(
        grid: &Grid,
        h_field: &VectorField,
        v_field: &ScalarField,
        variant: Variant,
    ) -> Result<UpwindScheme> {
        h_field.validate(grid)?;
        v_field.validate(grid)?;
        let n = grid.n_cells();
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut inflow_terms = Vec::new();
        let mut boundary_flux = Vec::new();

        // face lookup: (cell, axis, side) -> face id
        let face_id = |cell: usize, axis: usize, side: Side| -> usize {
            grid.faces()
                .iter()
                .position(|f| f.cell == cell && f.axis == axis && f.side == side)
                .expect("boundary cell must own a face")
        };

        match variant {
            Variant::Generic => {
                for c in 0..n {
                    let (i, j) = grid.cell_ij(c);
                    let hv = h_field.eval_cell(grid, c, 0.0);
                    for a in 0..grid.dim {
                        let ha = hv[a];
                        let inv_h = 1.0 / grid.h[a];
                        let pos = if a == 0 { i } else { j };
                        let n_axis = grid.n[a];
                        if ha > 0.0 {
                            push_entry(&mut rows[c], c, ha * inv_h);
                            if pos > 0 {
                                let nb = if a == 0 {
                                    grid.cell_index(i - 1, j)
                                } else {
                                    grid.cell_index(i, j - 1)
                                };
                                push_entry(&mut rows[c], nb, -ha * inv_h);
                            } else {
                                inflow_terms.push((c, face_id(c, a, Side::Low), ha * inv_h));
                            }
                        } else if ha < 0.0 {
                            push_entry(&mut rows[c], c, -ha * inv_h);
                            if pos + 1 < n_axis {
                                let nb = if a == 0 {
                                    grid.cell_index(i + 1, j)
                                } else {
                                    grid.cell_index(i, j + 1)
                                };
                                push_entry(&mut rows[c], nb, ha * inv_h);
                            } else {
                                inflow_terms.push((c, face_id(c, a, Side::High), -ha * inv_h));
                            }
                        }
                    }
                    let vv = v_field.eval_cell(grid, c, 0.0);
                    push_entry(&mut rows[c], c, vv);
                }
            }
            Variant::Conservative => {
                // interior faces, per axis
                for a in 0..grid.dim {
                    let n_axis = grid.n[a];
                    let inv_h = 1.0 / grid.h[a];
                    let other = 1 - a;
                    let n_other = if grid.dim == 2 { grid.n[other] } else { 1 };
                    for q in 0..n_other {
                        for p in 0..n_axis - 1 {
                            let (lo_cell, hi_cell, xf) = if a == 0 {
                                let lo = grid.cell_index(p, q.min(grid.n[1] - 1));
                                let hi = grid.cell_index(p + 1, q.min(grid.n[1] - 1));
                                let mut x = grid.cell_center(lo);
                                x[0] = grid.lo[0] + (p as f64 + 1.0) * grid.h[0];
                                (lo, hi, x)
                            } else {
                                let lo = grid.cell_index(q, p);
                                let hi = grid.cell_index(q, p + 1);
                                let mut x = grid.cell_center(lo);
                                x[1] = grid.lo[1] + (p as f64 + 1.0) * grid.h[1];
                                (lo, hi, x)
                            };
                            let hf = h_field.eval_point(grid, &xf, 0.0)?[a];
                            let (hp, hm) = (hf.max(0.0), hf.min(0.0));
                            // flux = hp*u_lo + hm*u_hi leaves lo, enters hi
                            push_entry(&mut rows[lo_cell], lo_cell, hp * inv_h);
                            push_entry(&mut rows[lo_cell], hi_cell, hm * inv_h);
                            push_entry(&mut rows[hi_cell], lo_cell, -hp * inv_h);
                            push_entry(&mut rows[hi_cell], hi_cell, -hm * inv_h);
                        }
                    }
                }
                // boundary faces
                for (id, face) in grid.faces().iter().enumerate() {
                    let hv = h_field.eval_point(grid, &face.center, 0.0)?;
                    let hnu: f64 = (0..grid.dim).map(|a| hv[a] * face.normal[a]).sum();
                    let inv_h = 1.0 / grid.h[face.axis];
                    boundary_flux.push((face.cell, id, hnu));
                    if hnu > 0.0 {
                        push_entry(&mut rows[face.cell], face.cell, hnu * inv_h);
                    } else if hnu < 0.0 {
                        inflow_terms.push((face.cell, id, -hnu * inv_h));
                    }
                }
            }
        }

        // substep count: ceil(dt * max cell rate); the rate also dominates
        // every diagonal of A, so each update coefficient of I - dt_sub*A
        // stays non-negative
        let mut rate: f64 = 0.0;
        for c in 0..n {
            let hv = h_field.eval_cell(grid, c, 0.0);
            let mut r: f64 = (0..grid.dim).map(|a| hv[a].abs() / grid.h[a]).sum();
            if variant == Variant::Generic {
                r += v_field.eval_cell(grid, c, 0.0).max(0.0);
            }
            rate = rate.max(r);
        }
        for (c, row) in rows.iter().enumerate() {
            for &(col, coef) in row {
                if col == c {
                    rate = rate.max(coef);
                }
            }
        }
        let dt = grid.dt();
        let n_sub = ((dt * rate).ceil() as usize).max(1);
        let dt_sub = dt / n_sub as f64;

        let mut rows_t: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (r, row) in rows.iter().enumerate() {
            for &(col, coef) in row {
                rows_t[col].push((r, coef));
            }
        }

        Ok(UpwindScheme {
            variant,
            rows,
            rows_t,
            inflow_terms,
            boundary_flux,
            n_sub,
            dt_sub,
        })
    }

    /// out = A u.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        let vals = par::map_range(u.len(), |c| {
            self.rows[c].iter().map(|&(col, coef)| coef * u[col]).sum::<f64>()
        });
        out.copy_from_slice(&vals);
    }

    /// out = A^T u.
    pub fn apply_t(&self, u: &[f64], out: &mut [f64]) {
        let vals = par::map_range(u.len(), |c| {
            self.rows_t[c].iter().map(|&(col, coef)| coef * u[col]).sum::<f64>()
        });
        out.copy_from_slice(&vals);
    }
}

/// Source term of a forward solve.
pub enum SourceTerm<'a> {
    None,
    /// F(x,t) = f(x) R(x,t) with f given per cell.
    Separated { f: &'a [f64], r: &'a ScalarField },
    /// General F(x,t).
    Field(&'a ScalarField),
}

impl SourceTerm<'_> {
    fn eval(&self, grid: &Grid, cell: usize, t: f64) -> f64 {
        match self {
            SourceTerm::None => 0.0,
            SourceTerm::Separated { f, r } => f[cell] * r.eval_cell(grid, cell, t),
            SourceTerm::Field(s) => s.eval_cell(grid, cell, t),
        }
    }
}

/// Conservative-variant mass bookkeeping over the whole solve.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MassLedger {
    pub initial_mass: f64,
    pub final_mass: f64,
    pub injected: f64,
    pub outflux: f64,
    /// |(final - initial) - (injected - outflux)| / max(1, scale).
    pub defect: f64,
}

/// Forward solution recorded at the coarse time nodes.
pub struct ForwardSolution {
    /// `values[k][c]`: state at time node k, cell c.
    pub values: Vec<Vec<f64>>,
    /// Face ids the traces are recorded on (the outflow faces).
    pub trace_faces: Vec<usize>,
    /// `traces[k][m]`: adjacent-cell trace at node k on trace face m.
    pub traces: Vec<Vec<f64>>,
    pub mass_ledger: Option<MassLedger>,
}

/// March the upwind scheme from `a0`, recording states and outflow traces
/// at every coarse node. `inflow` gives boundary data g(face id, t) on the
/// inflow faces (zero when absent).
pub fn solve_upwind(
    grid: &Grid,
    scheme: &UpwindScheme,
    partition: &BoundaryPartition,
    a0: &[f64],
    source: &SourceTerm,
    inflow: Option<&dyn Fn(usize, f64) -> f64>,
) -> Result<ForwardSolution> {
    let n = grid.n_cells();
    if a0.len() != n {
        return Err(Error::Solver("initial state shape mismatch".into()));
    }
    let vol = grid.cell_volume();
    let mut u = a0.to_vec();
    let mut au = vec![0.0; n];
    let mut values = Vec::with_capacity(grid.n_steps + 1);
    let trace_faces = partition.plus_faces.clone();
    let mut traces = Vec::with_capacity(grid.n_steps + 1);
    let record = |u: &[f64], values: &mut Vec<Vec<f64>>, traces: &mut Vec<Vec<f64>>| {
        values.push(u.to_vec());
        traces.push(trace_faces.iter().map(|&f| u[grid.faces()[f].cell]).collect());
    };
    record(&u, &mut values, &mut traces);

    let conservative = scheme.variant == Variant::Conservative;
    let mut injected = 0.0;
    let mut outflux = 0.0;
    let initial_mass = if conservative { grid.integrate_cells(&u) } else { 0.0 };

    let dt_s = scheme.dt_sub;
    for k in 0..grid.n_steps {
        for s in 0..scheme.n_sub {
            let t = (k * scheme.n_sub + s) as f64 * dt_s;
            scheme.apply(&u, &mut au);
            if conservative {
                // ledger uses the pre-update state (forward Euler in time)
                for &(cell, face, hnu) in &scheme.boundary_flux {
                    let g = inflow.map_or(0.0, |g| g(face, t));
                    let flux = hnu.max(0.0) * u[cell] + hnu.min(0.0) * g;
                    outflux += dt_s * flux * grid.faces()[face].area;
                }
            }
            let next = par::map_range(n, |c| u[c] - dt_s * au[c]);
            u = next;
            match source {
                SourceTerm::None => {}
                _ => {
                    for c in 0..n {
                        let sv = dt_s * source.eval(grid, c, t);
                        u[c] += sv;
                        if conservative {
                            injected += sv * vol;
                        }
                    }
                }
            }
            if let Some(g) = inflow {
                for &(cell, face, coef) in &scheme.inflow_terms {
                    u[cell] += dt_s * coef * g(face, t);
                }
            }
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver(format!(
                "non-finite state at t = {}",
                (k + 1) as f64 * grid.dt()
            )));
        }
        record(&u, &mut values, &mut traces);
    }

    let mass_ledger = if conservative {
        let final_mass = grid.integrate_cells(&u);
        let scale = initial_mass.abs().max(injected.abs()).max(outflux.abs()).max(1.0);
        let defect = ((final_mass - initial_mass) - (injected - outflux)).abs() / scale;
        Some(MassLedger {
            initial_mass,
            final_mass,
            injected,
            outflux,
            defect,
        })
    } else {
        None
    };

    Ok(ForwardSolution {
        values,
        trace_faces,
        traces,
        mass_ledger,
    })
}

/// Semi-Lagrangian point evaluation for the generic variant: RK4
/// backtracking along dX/ds = H(X), an integrating factor for V, and
/// trapezoid accumulation of the source along the characteristic. Inflow
/// data is taken as zero. `n_rk` is the number of backtracking steps over
/// (0, t).
pub fn solve_characteristics(
    grid: &Grid,
    h_field: &VectorField,
    v_field: &ScalarField,
    a0: &ScalarField,
    source: &SourceTerm,
    x: &[f64; 2],
    t: f64,
    n_rk: usize,
) -> Result<f64> {
    let clamp = |p: &[f64; 2]| -> [f64; 2] {
        let mut q = *p;
        for a in 0..grid.dim {
            q[a] = q[a].clamp(grid.lo[a], grid.hi[a]);
        }
        q
    };
    let h_at = |p: &[f64; 2]| -> Result<[f64; 2]> { h_field.eval_point(grid, &clamp(p), 0.0) };

    // backtrack and store the path: path[k] is the foot at time t - k*ds
    let ds = t / n_rk as f64;
    let mut path = Vec::with_capacity(n_rk + 1);
    let mut exited_at: Option<usize> = None;
    let mut p = *x;
    path.push(p);
    for k in 0..n_rk {
        let k1 = h_at(&p)?;
        let half1 = [p[0] - 0.5 * ds * k1[0], p[1] - 0.5 * ds * k1[1]];
        let k2 = h_at(&half1)?;
        let half2 = [p[0] - 0.5 * ds * k2[0], p[1] - 0.5 * ds * k2[1]];
        let k3 = h_at(&half2)?;
        let full = [p[0] - ds * k3[0], p[1] - ds * k3[1]];
        let k4 = h_at(&full)?;
        let q = [
            p[0] - ds / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            p[1] - ds / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ];
        if !grid.contains(&q) {
            exited_at = Some(k + 1);
            path.push(clamp(&q));
            break;
        }
        p = q;
        path.push(p);
    }

    // integrate forward from the start of the kept path segment
    let last = path.len() - 1;
    let start_value = match exited_at {
        Some(_) => 0.0, // inflow datum
        None => a0.eval_point(grid, &path[last], 0.0)?,
    };
    // value(t) = start * exp(-int V) + int source * exp(-int_s^t V)
    // accumulate by marching forward: w_{k-1} = (w_k + ds*avg(Fe)) stepwise
    let mut value = start_value;
    for k in (0..last).rev() {
        // segment from time node k+1 (earlier) to k (later)
        let t_late = t - k as f64 * ds;
        let t_early = t - (k + 1) as f64 * ds;
        let p_late = path[k];
        let p_early = path[k + 1];
        let v_late = v_field.eval_point(grid, &p_late, t_late)?;
        let v_early = v_field.eval_point(grid, &p_early, t_early)?;
        let f_late = source_at(grid, source, &p_late, t_late)?;
        let f_early = source_at(grid, source, &p_early, t_early)?;
        let decay = (-0.5 * ds * (v_late + v_early)).exp();
        value = value * decay + 0.5 * ds * (f_early * decay + f_late);
    }
    Ok(value)
}

fn source_at(grid: &Grid, source: &SourceTerm, x: &[f64; 2], t: f64) -> Result<f64> {
    Ok(match source {
        SourceTerm::None => 0.0,
        SourceTerm::Separated { f, r } => {
            // per-cell f: piecewise-constant reconstruction
            let c = nearest_cell_pub(grid, x);
            f[c] * r.eval_point(grid, x, t)?
        }
        SourceTerm::Field(s) => s.eval_point(grid, x, t)?,
    })
}

fn nearest_cell_pub(grid: &Grid, x: &[f64; 2]) -> usize {
    let mut ij = [0usize; 2];
    for a in 0..grid.dim {
        let f = ((x[a] - grid.lo[a]) / grid.h[a] - 0.5).round();
        ij[a] = f.clamp(0.0, (grid.n[a] - 1) as f64) as usize;
    }
    grid.cell_index(ij[0], ij[1])
}

/// Nodal time derivative of recorded trace series: centered differences,
/// second-order one-sided at both ends. `series[k][m]`.
pub fn time_derivative_trace(dt: f64, series: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = series.len();
    let m = if n > 0 { series[0].len() } else { 0 };
    let mut out = vec![vec![0.0; m]; n];
    if n < 3 {
        return out;
    }
    for j in 0..m {
        out[0][j] = (-3.0 * series[0][j] + 4.0 * series[1][j] - series[2][j]) / (2.0 * dt);
        out[n - 1][j] =
            (3.0 * series[n - 1][j] - 4.0 * series[n - 2][j] + series[n - 3][j]) / (2.0 * dt);
        for k in 1..n - 1 {
            out[k][j] = (series[k + 1][j] - series[k - 1][j]) / (2.0 * dt);
        }
    }
    out
}

/// Both sides of the weighted energy inequality
/// E(t) + int_0^t int_{outflow} (H.nu) w^2
///   <= e^{Kt} (||a||^2 + ||F||^2_Q + int_Sigma^- |H.nu| w^2),
/// with the constructive constant K = 2||V|| + ||div H|| + 1, evaluated at
/// every time node.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EnergyReport {
    pub k_const: f64,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub max_ratio: f64,
}

pub fn energy_report(
    grid: &Grid,
    h_field: &VectorField,
    v_field: &ScalarField,
    partition: &BoundaryPartition,
    sol: &ForwardSolution,
    source: &SourceTerm,
    inflow: Option<&dyn Fn(usize, f64) -> f64>,
) -> Result<EnergyReport> {
    let v_sup = v_field.sup_norm(grid);
    let div_sup = h_field.divergence(grid)?.sup_norm(grid);
    let k_const = 2.0 * v_sup + div_sup + 1.0;
    let dt = grid.dt();
    let n_nodes = grid.n_steps + 1;

    let energy: Vec<f64> = sol
        .values
        .iter()
        .map(|u| grid.integrate_cells(&u.iter().map(|v| v * v).collect::<Vec<_>>()))
        .collect();

    // outflow boundary integrand per node: sum over plus faces of
    // (H.nu) w^2 area
    let out_nodal: Vec<f64> = (0..n_nodes)
        .map(|k| {
            sol.trace_faces
                .iter()
                .enumerate()
                .map(|(m, &f)| {
                    let w = sol.traces[k][m];
                    partition.h_dot_nu[f] * w * w * grid.faces()[f].area
                })
                .sum()
        })
        .collect();

    // full-cylinder source norm and inflow term (the right side uses the
    // integrals over all of (0,T))
    let f_sq: Vec<Vec<f64>> = (0..n_nodes)
        .map(|k| {
            let t = k as f64 * dt;
            (0..grid.n_cells())
                .map(|c| {
                    let s = source.eval(grid, c, t);
                    s * s
                })
                .collect()
        })
        .collect();
    let f_norm_q = grid.integrate_space_time(&f_sq);

    let in_nodal: Vec<f64> = (0..n_nodes)
        .map(|k| {
            let t = k as f64 * dt;
            partition
                .minus_faces
                .iter()
                .map(|&f| {
                    let g = inflow.map_or(0.0, |g| g(f, t));
                    partition.h_dot_nu[f].abs() * g * g * grid.faces()[f].area
                })
                .sum()
        })
        .collect();
    let in_total = grid.integrate_time(&in_nodal);

    let a_norm = energy[0];
    let mut lhs = Vec::with_capacity(n_nodes);
    let mut rhs = Vec::with_capacity(n_nodes);
    let mut acc_out = 0.0;
    let mut max_ratio: f64 = 0.0;
    for k in 0..n_nodes {
        if k > 0 {
            acc_out += 0.5 * dt * (out_nodal[k - 1] + out_nodal[k]);
        }
        let t = k as f64 * dt;
        let l = energy[k] + acc_out;
        let r = (k_const * t).exp() * (a_norm + f_norm_q + in_total);
        if r > 0.0 {
            max_ratio = max_ratio.max(l / r);
        }
        lhs.push(l);
        rhs.push(r);
    }
    Ok(EnergyReport {
        k_const,
        lhs,
        rhs,
        max_ratio,
    })
}

/// Write trace series as CSV with header `face,t,value`, one row per
/// (face, time node).
pub fn write_trace_csv(
    path: &std::path::Path,
    dt: f64,
    trace_faces: &[usize],
    traces: &[Vec<f64>],
) -> Result<()> {
    let mut out = String::from("face,t,value\n");
    for (k, row) in traces.iter().enumerate() {
        let t = k as f64 * dt;
        for (m, v) in row.iter().enumerate() {
            out.push_str(&format!("{},{:.17e},{:.17e}\n", trace_faces[m], t, v));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

const BIN_MAGIC: &[u8; 8] = b"TRNSDMP1";

/// Binary dump of nodal fields, little-endian throughout:
/// - magic `TRNSDMP1` (8 bytes)
/// - u32 dim, u32 nx, u32 ny, u32 number of time nodes
/// - f64 lo\[0\], lo\[1\], hi\[0\], hi\[1\], t_final
/// - then `n_nodes * nx * ny` f64 cell values, node-major.
pub fn write_field_bin(path: &std::path::Path, grid: &Grid, values: &[Vec<f64>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(BIN_MAGIC)?;
    for v in [grid.dim as u32, grid.n[0] as u32, grid.n[1] as u32, values.len() as u32] {
        f.write_all(&v.to_le_bytes())?;
    }
    for v in [grid.lo[0], grid.lo[1], grid.hi[0], grid.hi[1], grid.t_final] {
        f.write_all(&v.to_le_bytes())?;
    }
    for node in values {
        if node.len() != grid.n_cells() {
            return Err(Error::Solver("binary dump shape mismatch".into()));
        }
        for v in node {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read back a [`write_field_bin`] dump: returns (dim, n, lo, hi, t_final,
/// values).
#[allow(clippy::type_complexity)]
pub fn read_field_bin(
    path: &std::path::Path,
) -> Result<(usize, [usize; 2], [f64; 2], [f64; 2], f64, Vec<Vec<f64>>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != BIN_MAGIC {
        return Err(Error::Solver("bad binary dump magic".into()));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |f: &mut dyn std::io::Read| -> Result<u32> {
        f.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let dim = read_u32(&mut f)? as usize;
    let nx = read_u32(&mut f)? as usize;
    let ny = read_u32(&mut f)? as usize;
    let n_nodes = read_u32(&mut f)? as usize;
    let mut f64buf = [0u8; 8];
    let mut read_f64 = |f: &mut dyn std::io::Read| -> Result<f64> {
        f.read_exact(&mut f64buf)?;
        Ok(f64::from_le_bytes(f64buf))
    };
    let lo = [read_f64(&mut f)?, read_f64(&mut f)?];
    let hi = [read_f64(&mut f)?, read_f64(&mut f)?];
    let t_final = read_f64(&mut f)?;
    let n_cells = nx * ny;
    let mut values = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let mut node = Vec::with_capacity(n_cells);
        for _ in 0..n_cells {
            node.push(read_f64(&mut f)?);
        }
        values.push(node);
    }
    Ok((dim, [nx, ny], lo, hi, t_final, values))
}
