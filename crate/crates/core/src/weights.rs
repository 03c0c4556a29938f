//! Weight functions and derived constants for the weighted energy
//! inequalities: the linear-in-t weight phi = -beta*t + psi(x) with its
//! admissibility machinery (mu, beta window, B, M0, s0, level constants,
//! cut-off), and the two-parameter weight phi_d = exp(lambda*(-beta*t + d))
//! with its constants (m0, mu0, r0, delta1).

use crate::error::{Error, Result};
use crate::fields::{Expr, ScalarField, VectorField};
use crate::geometry::Grid;

/// One checked hypothesis: name, left and right side of the inequality,
/// and whether it holds.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Check {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

impl Check {
    fn lt(name: &str, lhs: f64, rhs: f64) -> Check {
        Check { name: name.into(), lhs, rhs, pass: lhs < rhs }
    }
    fn gt(name: &str, lhs: f64, rhs: f64) -> Check {
        Check { name: name.into(), lhs, rhs, pass: lhs > rhs }
    }
}

/// Minimum of H.grad(psi) over all cell centers and boundary face centers.
pub fn compute_mu(grid: &Grid, h_field: &VectorField, psi: &ScalarField) -> Result<f64> {
    let grad = psi.gradient(grid)?;
    let mut mu = f64::INFINITY;
    for c in 0..grid.n_cells() {
        let hv = h_field.eval_cell(grid, c, 0.0);
        let gv = grad.eval_cell(grid, c, 0.0);
        mu = mu.min(hv[0] * gv[0] + hv[1] * gv[1]);
    }
    for face in grid.faces() {
        let hv = h_field.eval_point(grid, &face.center, 0.0)?;
        let gv = grad.eval_point(grid, &face.center, 0.0)?;
        mu = mu.min(hv[0] * gv[0] + hv[1] * gv[1]);
    }
    Ok(mu)
}

/// Midpoint of the admissible beta window ((max psi - min psi)/T, mu).
/// Errors when the window is empty, reporting the minimal admissible T.
pub fn choose_beta(mu: f64, psi_max: f64, psi_min: f64, t_final: f64) -> Result<f64> {
    let lower = (psi_max - psi_min) / t_final;
    if !(lower < mu) {
        let t_min = (psi_max - psi_min) / mu;
        return Err(Error::Gate(format!(
            "time threshold fails: need T > (max psi - min psi)/mu = {t_min:.6} strictly, got T = {t_final}"
        )));
    }
    Ok(0.5 * (lower + mu))
}

/// The constants of the linear-weight estimate: B(x) = -beta + H.grad(psi),
/// M0, and the s-threshold s0 (floored at 1).
pub struct CarlemanConstants {
    pub b: ScalarField,
    pub m0: f64,
    pub s0: f64,
}

pub fn carleman_constants(
    grid: &Grid,
    h_field: &VectorField,
    v_field: &ScalarField,
    psi: &ScalarField,
    beta: f64,
    mu: f64,
) -> Result<CarlemanConstants> {
    if mu <= beta {
        return Err(Error::Gate(format!("need beta < mu, got beta={beta}, mu={mu}")));
    }
    let grad = psi.gradient(grid)?;
    // B as an expression when possible, else sampled
    let b = match build_b_expr(h_field, &grad, beta) {
        Some(e) => ScalarField::Expr(e),
        None => {
            let mut cells = h_field.dot_cells(grid, &grad, 0.0);
            for v in cells.iter_mut() {
                *v -= beta;
            }
            ScalarField::Cells(cells)
        }
    };
    let div_h = h_field.divergence(grid)?;
    let div_h_sup = div_h.sup_norm(grid);
    // div(H * (H.grad psi))
    let hgp = dot_field(grid, h_field, &grad)?;
    let weighted = scale_vector(grid, h_field, &hgp)?;
    let div_weighted_sup = weighted.divergence(grid)?.sup_norm(grid);
    let m0 = beta * div_h_sup * div_weighted_sup;
    let v_sup = v_field.sup_norm(grid);
    let gap = mu - beta;
    let s0 = (4.0 * m0 / (gap * gap)).max(8f64.sqrt() * v_sup / gap).max(1.0);
    Ok(CarlemanConstants { b, m0, s0 })
}

fn build_b_expr(h_field: &VectorField, grad_psi: &VectorField, beta: f64) -> Option<Expr> {
    let mut acc = Expr::Const(-beta);
    for (hc, gc) in h_field.components.iter().zip(&grad_psi.components) {
        match (hc, gc) {
            (ScalarField::Expr(he), ScalarField::Expr(ge)) => {
                acc = Expr::Add(
                    Box::new(acc),
                    Box::new(Expr::Mul(Box::new(he.clone()), Box::new(ge.clone()))),
                );
            }
            _ => return None,
        }
    }
    Some(acc)
}

fn dot_field(grid: &Grid, a: &VectorField, b: &VectorField) -> Result<ScalarField> {
    let mut acc: Option<Expr> = Some(Expr::Const(0.0));
    for (ac, bc) in a.components.iter().zip(&b.components) {
        match (ac, bc, acc.take()) {
            (ScalarField::Expr(ae), ScalarField::Expr(be), Some(e)) => {
                acc = Some(Expr::Add(
                    Box::new(e),
                    Box::new(Expr::Mul(Box::new(ae.clone()), Box::new(be.clone()))),
                ));
            }
            _ => {
                acc = None;
                break;
            }
        }
    }
    match acc {
        Some(e) => Ok(ScalarField::Expr(e)),
        None => Ok(ScalarField::Cells(a.dot_cells(grid, b, 0.0))),
    }
}

fn scale_vector(grid: &Grid, v: &VectorField, s: &ScalarField) -> Result<VectorField> {
    let mut comps = Vec::new();
    for vc in &v.components {
        match (vc, s) {
            (ScalarField::Expr(ve), ScalarField::Expr(se)) => comps.push(ScalarField::Expr(
                Expr::Mul(Box::new(ve.clone()), Box::new(se.clone())),
            )),
            _ => {
                let a = vc.sample_cells(grid, 0.0);
                let b = s.sample_cells(grid, 0.0);
                comps.push(ScalarField::Cells(
                    a.iter().zip(&b).map(|(x, y)| x * y).collect(),
                ));
            }
        }
    }
    Ok(VectorField { components: comps })
}

/// The linear weight phi(x,t) = -beta*t + psi(x) with every derived
/// constant the estimates need.
pub struct LinearWeight {
    pub psi: ScalarField,
    pub beta: f64,
    pub mu: f64,
    pub psi_max: f64,
    pub psi_min: f64,
    pub b: ScalarField,
    pub m0: f64,
    pub s0: f64,
    pub r0: f64,
    pub r1: f64,
    pub delta1: f64,
    pub t_final: f64,
    pub checks: Vec<Check>,
}

impl LinearWeight {
    /// Full construction from psi: mu, beta (interval midpoint), B, M0, s0,
    /// levels r0 < r1 (trisection), delta1 (bisection on the level
    /// conditions checked at grid time nodes).
    pub fn build(
        grid: &Grid,
        h_field: &VectorField,
        v_field: &ScalarField,
        psi: ScalarField,
        beta_override: Option<f64>,
    ) -> Result<LinearWeight> {
        let mu = compute_mu(grid, h_field, &psi)?;
        if mu <= 0.0 {
            return Err(Error::Gate(format!("admissibility fails: mu = {mu} <= 0")));
        }
        let (psi_min, psi_max) = psi_extremes(grid, &psi)?;
        let t_final = grid.t_final;
        let beta = match beta_override {
            Some(b) => {
                if !(b > (psi_max - psi_min) / t_final && b < mu) {
                    return Err(Error::Gate(format!(
                        "beta override {b} outside the window ({}, {mu})",
                        (psi_max - psi_min) / t_final
                    )));
                }
                b
            }
            None => choose_beta(mu, psi_max, psi_min, t_final)?,
        };
        let consts = carleman_constants(grid, h_field, v_field, &psi, beta, mu)?;

        // levels: trisection of (psi_max - beta*T, psi_min)
        let lo = psi_max - beta * t_final;
        let hi = psi_min;
        debug_assert!(lo < hi);
        let r0 = lo + (hi - lo) / 3.0;
        let r1 = lo + 2.0 * (hi - lo) / 3.0;

        // delta1: largest width with phi > r1 for t <= delta1 and
        // phi < r0 for t >= T - 2*delta1, checked on the time grid
        let ok = |delta: f64| -> bool {
            if !(2.0 * delta < t_final) || delta <= 0.0 {
                return false;
            }
            for t in grid.times() {
                if t <= delta && !(psi_min - beta * t > r1) {
                    return false;
                }
                if t >= t_final - 2.0 * delta && !(psi_max - beta * t < r0) {
                    return false;
                }
            }
            true
        };
        let mut a = 0.0;
        let mut b_hi = 0.5 * t_final;
        if !ok(grid.dt() * 1e-3) {
            return Err(Error::Gate("no admissible delta1 for the level conditions".into()));
        }
        for _ in 0..60 {
            let mid = 0.5 * (a + b_hi);
            if ok(mid) {
                a = mid;
            } else {
                b_hi = mid;
            }
        }
        let delta1 = a;

        let mut checks = Vec::new();
        checks.gt_push("mu > 0", mu, 0.0);
        checks.push(Check::lt("(psi_max - psi_min)/T < beta", (psi_max - psi_min) / t_final, beta));
        checks.push(Check::lt("beta < mu", beta, mu));
        let b_min = consts.b.sup_min(grid)?;
        checks.gt_push("min B >= mu - beta > 0", b_min + 1e-12, mu - beta);
        checks.push(Check::lt("psi_max - beta*T < r0", lo, r0));
        checks.push(Check::lt("r0 < r1", r0, r1));
        checks.push(Check::lt("r1 < psi_min", r1, hi));
        checks.gt_push("delta1 > 0", delta1, 0.0);

        if let Some(c) = checks.iter().find(|c| !c.pass) {
            return Err(Error::Gate(format!(
                "linear weight check '{}' failed: lhs={}, rhs={}",
                c.name, c.lhs, c.rhs
            )));
        }

        Ok(LinearWeight {
            psi,
            beta,
            mu,
            psi_max,
            psi_min,
            b: consts.b,
            m0: consts.m0,
            s0: consts.s0,
            r0,
            r1,
            delta1,
            t_final,
            checks,
        })
    }

    /// phi(x,t) at a cell center.
    pub fn phi_cell(&self, grid: &Grid, cell: usize, t: f64) -> f64 {
        self.psi.eval_cell(grid, cell, 0.0) - self.beta * t
    }

    /// phi at an arbitrary point.
    pub fn phi_point(&self, grid: &Grid, x: &[f64; 2], t: f64) -> Result<f64> {
        Ok(self.psi.eval_point(grid, x, 0.0)? - self.beta * t)
    }
}

trait ChecksExt {
    fn gt_push(&mut self, name: &str, lhs: f64, rhs: f64);
}
impl ChecksExt for Vec<Check> {
    fn gt_push(&mut self, name: &str, lhs: f64, rhs: f64) {
        self.push(Check::gt(name, lhs, rhs));
    }
}

fn psi_extremes(grid: &Grid, psi: &ScalarField) -> Result<(f64, f64)> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for c in 0..grid.n_cells() {
        let v = psi.eval_cell(grid, c, 0.0);
        min = min.min(v);
        max = max.max(v);
    }
    for face in grid.faces() {
        let v = psi.eval_point(grid, &face.center, 0.0)?;
        min = min.min(v);
        max = max.max(v);
    }
    Ok((min, max))
}

impl ScalarField {
    /// Grid minimum at t=0 over cells and faces.
    fn sup_min(&self, grid: &Grid) -> Result<f64> {
        let mut min = f64::INFINITY;
        for c in 0..grid.n_cells() {
            min = min.min(self.eval_cell(grid, c, 0.0));
        }
        for face in grid.faces() {
            if let ScalarField::Expr(_) = self {
                min = min.min(self.eval_point(grid, &face.center, 0.0)?);
            }
        }
        Ok(min)
    }
}

/// Which of the four constructions of psi to use.
#[derive(Debug, Clone)]
pub enum PsiCase {
    /// Case 1: H = grad d with |grad d| > 0; psi = d.
    Potential { d: ScalarField },
    /// Case 2: range of H separated from the origin by a hyperplane a.x = 0;
    /// psi = +-(a.x).
    Separating { a: Vec<f64> },
    /// Case 3: 0 in Omega, |H| >= delta0, domain small; psi = sum x_j h_j.
    RadialSmall { delta0: f64 },
    /// Case 4: h_{i0} > 0 on the closure, Omega subset {x_{i0} > b};
    /// psi = (x_{i0} - b)^2.
    CoordinateShift { i0: usize, b: f64 },
}

/// Construct psi for the chosen case, failing closed (with the checked
/// inequality values) when the case hypothesis does not hold on the grid.
pub fn construct_psi(
    grid: &Grid,
    h_field: &VectorField,
    case: &PsiCase,
) -> Result<(ScalarField, Vec<Check>)> {
    let mut checks = Vec::new();
    let psi = match case {
        PsiCase::Potential { d } => {
            let grad = d.gradient(grid)?;
            let min_grad = min_magnitude(grid, &grad)?;
            checks.push(Check::gt("min |grad d| > 0", min_grad, 0.0));
            // hypothesis: H equals grad d
            let mut max_dev: f64 = 0.0;
            for c in 0..grid.n_cells() {
                let hv = h_field.eval_cell(grid, c, 0.0);
                let gv = grad.eval_cell(grid, c, 0.0);
                max_dev = max_dev
                    .max((hv[0] - gv[0]).abs())
                    .max((hv[1] - gv[1]).abs());
            }
            checks.push(Check::lt("max |H - grad d| < 1e-8", max_dev, 1e-8));
            d.clone()
        }
        PsiCase::Separating { a } => {
            if a.len() != grid.dim {
                return Err(Error::Gate("separating vector dimension mismatch".into()));
            }
            let dot_min_plus = extremum_dot(grid, h_field, a, false)?;
            let dot_max = extremum_dot(grid, h_field, a, true)?;
            if dot_min_plus > 0.0 {
                checks.push(Check::gt("min H.a > 0", dot_min_plus, 0.0));
                linear_psi(a, 1.0)
            } else if dot_max < 0.0 {
                checks.push(Check::lt("max H.a < 0", dot_max, 0.0));
                linear_psi(a, -1.0)
            } else {
                checks.push(Check::gt("min H.a > 0", dot_min_plus, 0.0));
                checks.push(Check::lt("max H.a < 0", dot_max, 0.0));
                return Err(Error::Gate(format!(
                    "separation fails: H.a ranges over [{dot_min_plus}, {dot_max}], straddling 0"
                )));
            }
        }
        PsiCase::RadialSmall { delta0 } => {
            // 0 must lie inside Omega
            let inside = (0..grid.dim).all(|ax| grid.lo[ax] < 0.0 && grid.hi[ax] > 0.0);
            checks.push(Check {
                name: "0 in Omega".into(),
                lhs: if inside { 1.0 } else { 0.0 },
                rhs: 0.5,
                pass: inside,
            });
            let min_h = min_magnitude(grid, h_field)?;
            checks.push(Check::gt("min |H| >= delta0", min_h + 1e-15, *delta0));
            let h_sup = h_field.sup_norm(grid);
            let grad_h_sup = jacobian_sup(grid, h_field)?;
            let max_x = max_radius(grid);
            let bound = min_h * min_h / (h_sup * grad_h_sup);
            checks.push(Check::lt("max |x| < min|H|^2 / (||H|| ||grad H||)", max_x, bound));
            if checks.iter().any(|c| !c.pass) {
                return Err(Error::Gate(format!(
                    "Case 3 smallness fails: max|x| = {max_x}, bound = {bound}"
                )));
            }
            // psi = sum x_j h_j
            let mut acc: Option<Expr> = Some(Expr::Const(0.0));
            for (ax, comp) in h_field.components.iter().enumerate() {
                match (comp, acc.take()) {
                    (ScalarField::Expr(e), Some(prev)) => {
                        acc = Some(Expr::Add(
                            Box::new(prev),
                            Box::new(Expr::Mul(Box::new(Expr::Coord(ax)), Box::new(e.clone()))),
                        ));
                    }
                    _ => break,
                }
            }
            match acc {
                Some(e) => ScalarField::Expr(e),
                None => {
                    let vals: Vec<f64> = (0..grid.n_cells())
                        .map(|c| {
                            let x = grid.cell_center(c);
                            let hv = h_field.eval_cell(grid, c, 0.0);
                            x[0] * hv[0] + x[1] * hv[1]
                        })
                        .collect();
                    ScalarField::Cells(vals)
                }
            }
        }
        PsiCase::CoordinateShift { i0, b } => {
            if *i0 >= grid.dim {
                return Err(Error::Gate(format!("axis {i0} out of range")));
            }
            checks.push(Check::gt("lo_{i0} > b", grid.lo[*i0], *b));
            let mut min_h = f64::INFINITY;
            for c in 0..grid.n_cells() {
                min_h = min_h.min(h_field.eval_cell(grid, c, 0.0)[*i0]);
            }
            checks.push(Check::gt("min h_{i0} > 0", min_h, 0.0));
            if checks.iter().any(|c| !c.pass) {
                return Err(Error::Gate("Case 4 hypothesis fails on the grid".into()));
            }
            ScalarField::Expr(Expr::Pow(
                Box::new(Expr::Sub(
                    Box::new(Expr::Coord(*i0)),
                    Box::new(Expr::Const(*b)),
                )),
                2.0,
            ))
        }
    };
    if let Some(c) = checks.iter().find(|c| !c.pass) {
        return Err(Error::Gate(format!(
            "psi case check '{}' failed: lhs={}, rhs={}",
            c.name, c.lhs, c.rhs
        )));
    }
    Ok((psi, checks))
}

fn linear_psi(a: &[f64], sign: f64) -> ScalarField {
    let mut acc = Expr::Const(0.0);
    for (ax, &coef) in a.iter().enumerate() {
        acc = Expr::Add(
            Box::new(acc),
            Box::new(Expr::Mul(
                Box::new(Expr::Const(sign * coef)),
                Box::new(Expr::Coord(ax)),
            )),
        );
    }
    ScalarField::Expr(acc)
}

fn extremum_dot(grid: &Grid, h_field: &VectorField, a: &[f64], want_max: bool) -> Result<f64> {
    let mut ext = if want_max { f64::NEG_INFINITY } else { f64::INFINITY };
    for c in 0..grid.n_cells() {
        let hv = h_field.eval_cell(grid, c, 0.0);
        let d: f64 = (0..grid.dim).map(|ax| hv[ax] * a[ax]).sum();
        ext = if want_max { ext.max(d) } else { ext.min(d) };
    }
    Ok(ext)
}

fn min_magnitude(grid: &Grid, v: &VectorField) -> Result<f64> {
    let mut min = f64::INFINITY;
    for c in 0..grid.n_cells() {
        let x = v.eval_cell(grid, c, 0.0);
        min = min.min((x[0] * x[0] + x[1] * x[1]).sqrt());
    }
    for face in grid.faces() {
        let x = v.eval_point(grid, &face.center, 0.0)?;
        min = min.min((x[0] * x[0] + x[1] * x[1]).sqrt());
    }
    Ok(min)
}

fn jacobian_sup(grid: &Grid, h_field: &VectorField) -> Result<f64> {
    let mut sup: f64 = 0.0;
    let grads: Vec<VectorField> = h_field
        .components
        .iter()
        .map(|c| c.gradient(grid))
        .collect::<Result<_>>()?;
    for c in 0..grid.n_cells() {
        let mut frob = 0.0;
        for g in &grads {
            let v = g.eval_cell(grid, c, 0.0);
            frob += v[0] * v[0] + v[1] * v[1];
        }
        sup = sup.max(frob.sqrt());
    }
    Ok(sup)
}

fn max_radius(grid: &Grid) -> f64 {
    let mut r2: f64 = 0.0;
    // corners of the rectangle realize the max
    let corners = [
        [grid.lo[0], grid.lo[1]],
        [grid.lo[0], grid.hi[1]],
        [grid.hi[0], grid.lo[1]],
        [grid.hi[0], grid.hi[1]],
    ];
    for c in corners {
        let v: f64 = (0..grid.dim).map(|a| c[a] * c[a]).sum();
        r2 = r2.max(v);
    }
    r2.sqrt()
}

/// Smooth time cut-off: 1 on [0, T-2*delta1], 0 on [T-delta1, T], quintic
/// smoothstep descent in between.
#[derive(Debug, Clone)]
pub struct Cutoff {
    pub t_final: f64,
    pub delta1: f64,
}

impl Cutoff {
    pub fn new(t_final: f64, delta1: f64) -> Result<Cutoff> {
        if !(delta1 > 0.0 && 2.0 * delta1 < t_final) {
            return Err(Error::Gate(format!(
                "cut-off needs 0 < 2*delta1 < T, got delta1={delta1}, T={t_final}"
            )));
        }
        Ok(Cutoff { t_final, delta1 })
    }

    pub fn value(&self, t: f64) -> f64 {
        let t0 = self.t_final - 2.0 * self.delta1;
        let t1 = self.t_final - self.delta1;
        if t <= t0 {
            1.0
        } else if t >= t1 {
            0.0
        } else {
            let u = (t - t0) / self.delta1;
            1.0 - (6.0 * u.powi(5) - 15.0 * u.powi(4) + 10.0 * u.powi(3))
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let t0 = self.t_final - 2.0 * self.delta1;
        let t1 = self.t_final - self.delta1;
        if t <= t0 || t >= t1 {
            0.0
        } else {
            let u = (t - t0) / self.delta1;
            -30.0 * u * u * (1.0 - u) * (1.0 - u) / self.delta1
        }
    }
}

/// The two-parameter weight phi_d(x,t) = exp(lambda*(-beta*t + d(x))) with
/// its derived constants.
pub struct ExpWeight {
    pub d: ScalarField,
    pub grad_d: VectorField,
    pub beta: f64,
    pub lambda: f64,
    pub delta0: f64,
    pub m_bound: f64,
    /// sup over the supplied candidates of (max d - min d).
    pub m0: f64,
    /// sup over the supplied candidates of min_x exp(lambda*d).
    pub mu0: f64,
    pub r0: f64,
    pub delta1: f64,
    pub t_final: f64,
    pub checks: Vec<Check>,
}

impl ExpWeight {
    pub fn phi_cell(&self, grid: &Grid, cell: usize, t: f64) -> f64 {
        (self.lambda * (self.d.eval_cell(grid, cell, 0.0) - self.beta * t)).exp()
    }

    pub fn phi_point(&self, grid: &Grid, x: &[f64; 2], t: f64) -> Result<f64> {
        Ok((self.lambda * (self.d.eval_point(grid, x, 0.0)? - self.beta * t)).exp())
    }

    /// J_d = lambda * phi_d * (-beta + |grad d|^2).
    pub fn jd_point(&self, grid: &Grid, x: &[f64; 2], t: f64) -> Result<f64> {
        let g = self.grad_d.eval_point(grid, x, t)?;
        let g2 = g[0] * g[0] + g[1] * g[1];
        Ok(self.lambda * self.phi_point(grid, x, t)? * (g2 - self.beta))
    }
}

/// Derive all constants of the two-parameter weight. `candidates` are the
/// finitely many configured admissible potentials over which the
/// sup-defined constants m0 and mu0 are approximated (the restriction is
/// reported in the checks).
pub fn exp_weight_constants(
    grid: &Grid,
    d: ScalarField,
    candidates: &[&ScalarField],
    beta: f64,
    lambda: f64,
    delta0: f64,
    m_bound: f64,
) -> Result<ExpWeight> {
    let t_final = grid.t_final;
    let mut checks = Vec::new();
    checks.push(Check::lt("beta < delta0^2", beta, delta0 * delta0));
    if !(beta < delta0 * delta0) {
        return Err(Error::Gate(format!(
            "need 0 < beta < delta0^2 = {}, got beta = {beta}",
            delta0 * delta0
        )));
    }

    let mut all: Vec<&ScalarField> = vec![&d];
    all.extend_from_slice(candidates);
    let mut m0: f64 = 0.0;
    let mut mu0 = f64::NEG_INFINITY;
    for cand in &all {
        let (min, max) = psi_extremes(grid, cand)?;
        m0 = m0.max(max - min);
        mu0 = mu0.max((lambda * min).exp());
    }
    checks.push(Check::gt("T > m0/beta", t_final, m0 / beta));
    if !(t_final > m0 / beta) {
        return Err(Error::Gate(format!(
            "time threshold fails: need T > m0/beta = {}, got T = {t_final}",
            m0 / beta
        )));
    }

    // r0 with the exponent exp(-lambda*beta*T - lambda*M): the form the
    // (4.11) derivation needs; the discrepancy with the in-text display is
    // flagged here.
    let r0 = 0.5 * lambda * (-lambda * beta * t_final - lambda * m_bound).exp()
        * (beta * t_final - m0);
    let delta1 = r0 / (4.0 * (lambda * m_bound).exp() * lambda * beta);
    checks.push(Check::gt("r0 > 0", r0, 0.0));
    checks.push(Check::lt(
        "2*exp(lambda*M)*lambda*beta*delta1 < r0",
        2.0 * (lambda * m_bound).exp() * lambda * beta * delta1,
        r0,
    ));
    checks.push(Check {
        name: "r0 exponent uses beta*T form (in-text display uses beta)".into(),
        lhs: (-lambda * beta * t_final - lambda * m_bound).exp(),
        rhs: (-lambda * beta - lambda * m_bound).exp(),
        pass: true,
    });

    let grad_d = d.gradient(grid)?;
    let w = ExpWeight {
        d,
        grad_d,
        beta,
        lambda,
        delta0,
        m_bound,
        m0,
        mu0,
        r0,
        delta1,
        t_final,
        checks,
    };

    // pointwise lower bound J_d >= lambda*phi_d*(delta0^2 - beta)
    let mut min_margin = f64::INFINITY;
    for c in 0..grid.n_cells() {
        for &t in &[0.0, 0.5 * t_final, t_final] {
            let x = grid.cell_center(c);
            let jd = w.jd_point(grid, &x, t)?;
            let bound = lambda * w.phi_point(grid, &x, t)? * (delta0 * delta0 - beta);
            min_margin = min_margin.min(jd - bound);
        }
    }
    // max_x phi_d(x,t) < mu0 - r0 on [T - 2*delta1, T]
    let mut level_margin = f64::INFINITY;
    for t in grid.times() {
        if t >= t_final - 2.0 * w.delta1 {
            for c in 0..grid.n_cells() {
                let phi = w.phi_cell(grid, c, t);
                level_margin = level_margin.min((w.mu0 - w.r0) - phi);
            }
        }
    }
    let mut w = w;
    w.checks.push(Check::gt("min (J_d - lambda*phi_d*(delta0^2-beta)) >= 0", min_margin + 1e-12, 0.0));
    w.checks.push(Check::gt("max phi_d < mu0 - r0 on the tail window", level_margin, 0.0));
    if let Some(c) = w.checks.iter().find(|c| !c.pass) {
        return Err(Error::Gate(format!(
            "exp weight check '{}' failed: lhs={}, rhs={}",
            c.name, c.lhs, c.rhs
        )));
    }
    Ok(w)
}

/// Admissible-set specification: gradient floor, C^2 bound, and the shared
/// boundary traces g1 (Dirichlet) and g2 (normal derivative).
pub struct AdmissibleSetSpec {
    pub delta0: f64,
    pub m_bound: f64,
    pub g1: ScalarField,
    pub g2: ScalarField,
    pub gamma_plus: Vec<usize>,
    pub gamma_minus: Vec<usize>,
    pub trace_tol: f64,
}

impl AdmissibleSetSpec {
    /// Build the spec, classifying Gamma+- from the sign of g2 at face
    /// centers.
    pub fn new(
        grid: &Grid,
        delta0: f64,
        m_bound: f64,
        g1: ScalarField,
        g2: ScalarField,
        trace_tol: f64,
    ) -> Result<AdmissibleSetSpec> {
        let mut plus = Vec::new();
        let mut minus = Vec::new();
        for (id, face) in grid.faces().iter().enumerate() {
            let v = g2.eval_point(grid, &face.center, 0.0)?;
            if v > 0.0 {
                plus.push(id);
            } else if v < 0.0 {
                minus.push(id);
            }
        }
        Ok(AdmissibleSetSpec {
            delta0,
            m_bound,
            g1,
            g2,
            gamma_plus: plus,
            gamma_minus: minus,
            trace_tol,
        })
    }
}

/// Per-condition admissibility margins for a candidate potential.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AdmissibilityReport {
    pub admissible: bool,
    /// min |grad d| - delta0 over the grid.
    pub grad_margin: f64,
    /// M - C^2-type grid norm of d.
    pub c2_margin: f64,
    /// max |d - g1| over boundary face centers.
    pub g1_residual: f64,
    /// max |grad d . nu - g2| over boundary face centers.
    pub g2_residual: f64,
    pub trace_tol: f64,
}

/// Check membership of d in the admissible set, reporting margins.
pub fn check_admissible(
    grid: &Grid,
    d: &ScalarField,
    spec: &AdmissibleSetSpec,
) -> Result<AdmissibilityReport> {
    let grad = d.gradient(grid)?;
    let min_grad = min_magnitude(grid, &grad)?;

    // C^2-type grid norm: sup over |d|, first and second partials
    let mut c2: f64 = d.sup_norm(grid);
    for comp in &grad.components {
        c2 = c2.max(comp.sup_norm(grid));
        if let Ok(second) = comp.gradient(grid) {
            for s in &second.components {
                c2 = c2.max(s.sup_norm(grid));
            }
        }
    }

    let mut g1_res: f64 = 0.0;
    let mut g2_res: f64 = 0.0;
    for face in grid.faces() {
        let dv = d.eval_point(grid, &face.center, 0.0)?;
        let g1v = spec.g1.eval_point(grid, &face.center, 0.0)?;
        g1_res = g1_res.max((dv - g1v).abs());
        let gv = grad.eval_point(grid, &face.center, 0.0)?;
        let dn: f64 = (0..grid.dim).map(|a| gv[a] * face.normal[a]).sum();
        let g2v = spec.g2.eval_point(grid, &face.center, 0.0)?;
        g2_res = g2_res.max((dn - g2v).abs());
    }

    let grad_margin = min_grad - spec.delta0;
    let c2_margin = spec.m_bound - c2;
    let admissible = grad_margin >= 0.0
        && c2_margin >= 0.0
        && g1_res <= spec.trace_tol
        && g2_res <= spec.trace_tol;
    Ok(AdmissibilityReport {
        admissible,
        grad_margin,
        c2_margin,
        g1_residual: g1_res,
        g2_residual: g2_res,
        trace_tol: spec.trace_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid_1d() -> Grid {
        Grid::new(1, &[0.0], &[1.0], &[64], 1.5, 96).unwrap()
    }

    #[test]
    fn mu_constant_case() {
        let g = Grid::new(2, &[0.0, 0.0], &[1.0, 1.0], &[16, 16], 2.0, 16).unwrap();
        let h = VectorField::constant(&[1.0, 0.0]);
        let psi = ScalarField::from_expr_str("x1").unwrap();
        assert_relative_eq!(compute_mu(&g, &h, &psi).unwrap(), 1.0);
        let psi_neg = ScalarField::from_expr_str("-x1").unwrap();
        assert_relative_eq!(compute_mu(&g, &h, &psi_neg).unwrap(), -1.0);
    }

    #[test]
    fn mu_case4_quadratic() {
        // H=(1,0), psi=(x1+1)^2 -> H.grad psi = 2(x1+1), min at the x1=0 face
        let g = Grid::new(2, &[0.0, 0.0], &[1.0, 1.0], &[32, 32], 2.0, 16).unwrap();
        let h = VectorField::constant(&[1.0, 0.0]);
        let psi = ScalarField::from_expr_str("(x1+1)^2").unwrap();
        let mu = compute_mu(&g, &h, &psi).unwrap();
        assert_relative_eq!(mu, 2.0, epsilon = 1e-12); // face center sits at x1=0
    }

    #[test]
    fn beta_midpoint_and_gate() {
        let b = choose_beta(1.0, 1.0, 0.0, 1.5).unwrap();
        assert_relative_eq!(b, 0.5 * (2.0 / 3.0 + 1.0), epsilon = 1e-12);
        assert!(choose_beta(1.0, 1.0, 0.0, 1.0).is_err()); // strict inequality
        let b = choose_beta(1.25, 1.5, 0.0, 2.0).unwrap();
        assert_relative_eq!(b, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constants_case_a() {
        // H=1, psi=x, V=0: M0=0, s0 floored at 1, B = 1/6
        let g = grid_1d();
        let h = VectorField::constant(&[1.0]);
        let v = ScalarField::constant(0.0);
        let psi = ScalarField::from_expr_str("x1").unwrap();
        let w = LinearWeight::build(&g, &h, &v, psi, None).unwrap();
        assert_relative_eq!(w.beta, 0.8333333333333334, epsilon = 1e-12);
        assert_relative_eq!(w.m0, 0.0);
        assert_relative_eq!(w.s0, 1.0);
        assert_relative_eq!(w.b.eval_cell(&g, 10, 0.0), 1.0 - w.beta, epsilon = 1e-12);
        // level ordering
        assert!(w.psi_max - w.beta * w.t_final < w.r0);
        assert!(w.r0 < w.r1 && w.r1 < w.psi_min);
        assert!(w.delta1 > 0.0 && 2.0 * w.delta1 < w.t_final);
        // phi(x,T) < r0 and phi(x',0) > r1 for all grid nodes
        for c in 0..g.n_cells() {
            assert!(w.phi_cell(&g, c, g.t_final) < w.r0);
            assert!(w.phi_cell(&g, c, 0.0) > w.r1);
        }
    }

    #[test]
    fn s0_formula_with_potential() {
        let g = grid_1d();
        let h = VectorField::constant(&[1.0]);
        let v = ScalarField::constant(0.5);
        let psi = ScalarField::from_expr_str("x1").unwrap();
        let mu = 1.0;
        let beta = choose_beta(mu, 1.0, 0.0, 1.5).unwrap(); // gap = 1/6
        let c = carleman_constants(&g, &h, &v, &psi, beta, mu).unwrap();
        assert_relative_eq!(c.s0, 8f64.sqrt() * 0.5 * 6.0, epsilon = 1e-10);
    }

    #[test]
    fn psi_case2_and_case4() {
        let g = Grid::new(2, &[0.0, 0.0], &[1.0, 1.0], &[16, 16], 2.0, 16).unwrap();
        let h = VectorField::constant(&[1.0, 0.5]);
        let (psi, _) = construct_psi(&g, &h, &PsiCase::Separating { a: vec![1.0, 0.5] }).unwrap();
        let mu = compute_mu(&g, &h, &psi).unwrap();
        assert_relative_eq!(mu, 1.25, epsilon = 1e-12);

        let h = VectorField::constant(&[1.0, 0.0]);
        let (psi, _) =
            construct_psi(&g, &h, &PsiCase::CoordinateShift { i0: 0, b: -1.0 }).unwrap();
        let mu = compute_mu(&g, &h, &psi).unwrap();
        assert_relative_eq!(mu, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn psi_case3_smallness_rejection() {
        // domain too far from the origin for the Case-3 bound
        let g = Grid::new(1, &[-2.0], &[2.0], &[32], 1.0, 8).unwrap();
        let h = VectorField::from_expr_str("1 + 0.5*x1").unwrap();
        let err = construct_psi(&g, &h, &PsiCase::RadialSmall { delta0: 0.1 });
        assert!(err.is_err());
        let msg = format!("{}", err.err().unwrap());
        assert!(msg.contains("bound"), "diagnostic should carry both sides: {msg}");
    }

    #[test]
    fn psi_case1_potential() {
        let g = Grid::new(2, &[0.0, 0.0], &[1.0, 1.0], &[16, 16], 3.0, 16).unwrap();
        let d = ScalarField::from_expr_str("x1").unwrap();
        let h = VectorField::constant(&[1.0, 0.0]);
        let (psi, _) = construct_psi(&g, &h, &PsiCase::Potential { d }).unwrap();
        assert_relative_eq!(compute_mu(&g, &h, &psi).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cutoff_profile() {
        let t_final = 1.5;
        let d1 = 0.05;
        let chi = Cutoff::new(t_final, d1).unwrap();
        assert_eq!(chi.value(0.0), 1.0);
        assert_eq!(chi.value(t_final), 0.0);
        assert_relative_eq!(chi.value(t_final - 1.5 * d1), 0.5, epsilon = 1e-12);
        // integral of |chi'| over (0,T) = 1 (monotone descent)
        let n = 20000;
        let dt = t_final / n as f64;
        let total: f64 = (0..=n)
            .map(|k| {
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                w * chi.derivative(k as f64 * dt).abs() * dt
            })
            .sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-6);
        assert!(Cutoff::new(1.0, 0.6).is_err());
    }

    #[test]
    fn exp_weight_constants_basic() {
        let g = Grid::new(2, &[0.0, 0.0], &[1.0, 1.0], &[16, 16], 3.0, 24).unwrap();
        let d = ScalarField::from_expr_str("x1").unwrap();
        let w = exp_weight_constants(&g, d, &[], 0.5, 1.0, 0.9, 2.0).unwrap();
        assert_relative_eq!(w.m0, 1.0, epsilon = 1e-14); // oscillation of x1 incl. faces
        assert!(w.r0 > 0.0 && w.delta1 > 0.0);
        // delta1 definition forces 2 e^{lM} l b d1 = r0/2
        assert_relative_eq!(
            2.0 * (w.lambda * w.m_bound).exp() * w.lambda * w.beta * w.delta1,
            0.5 * w.r0,
            epsilon = 1e-12
        );
        // beta >= delta0^2 rejected
        let d = ScalarField::from_expr_str("x1").unwrap();
        assert!(exp_weight_constants(&g, d, &[], 0.85, 1.0, 0.9, 2.0).is_err());
    }

    #[test]
    fn admissibility_margins() {
        let g = Grid::new(1, &[0.0], &[1.0], &[64], 3.0, 32).unwrap();
        let g1 = ScalarField::from_expr_str("x1").unwrap();
        // normal derivative of x1: -1 at x=0, +1 at x=1 -> expression 2*x1 - 1
        let g2 = ScalarField::from_expr_str("2*x1 - 1").unwrap();
        let spec = AdmissibleSetSpec::new(&g, 1.0, 2.0, g1, g2, 1e-9).unwrap();
        let d = ScalarField::from_expr_str("x1").unwrap();
        let rep = check_admissible(&g, &d, &spec).unwrap();
        assert!(rep.admissible, "{rep:?}");

        // interior critical point: rejected
        let d = ScalarField::from_expr_str("(x1-0.5)^2").unwrap();
        let rep = check_admissible(&g, &d, &spec).unwrap();
        assert!(!rep.admissible);
        assert!(rep.grad_margin < 0.0);
    }
}
