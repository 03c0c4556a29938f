//! Property tests for the structural invariants: grid geometry, boundary
//! classification, log-scale accumulation, quadrature linearity, and the
//! homogeneity of the inequality reports and the measurement operator.

use proptest::prelude::*;

use transport_inverse::carleman::{verify_lemma1, Lemma1Part, EPS_DISC};
use transport_inverse::fields::{ScalarField, VectorField};
use transport_inverse::geometry::{classify_boundary, default_eps_nu, Grid};
use transport_inverse::inverse::{MeasurementOperator, TraceWeighting};
use transport_inverse::logscale::LogScaled;
use transport_inverse::weights::LinearWeight;

fn grid_2d(nx: usize, ny: usize, lx: f64, ly: f64) -> Grid {
    Grid::new(2, &[0.0, 0.0], &[lx, ly], &[nx, ny], 1.0, 8).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Face areas of a rectangle sum to its perimeter; cell volumes tile it.
    #[test]
    fn rectangle_measures(nx in 2usize..12, ny in 2usize..12,
                          lx in 0.2f64..5.0, ly in 0.2f64..5.0) {
        let g = grid_2d(nx, ny, lx, ly);
        let perimeter: f64 = g.faces().iter().map(|f| f.area).sum();
        prop_assert!((perimeter - 2.0 * (lx + ly)).abs() <= 1e-12 * (lx + ly));
        let total = g.cell_volume() * g.n_cells() as f64;
        prop_assert!((total - lx * ly).abs() <= 1e-12 * lx * ly);
    }

    /// Every boundary face lands in exactly one of the inflow/outflow sets
    /// when H is constant with both components bounded away from zero.
    #[test]
    fn boundary_partition_is_complete(hx in prop::sample::select(vec![-2.0, -1.0, 0.5, 1.0, 2.0]),
                                      hy in prop::sample::select(vec![-2.0, -1.0, 0.5, 1.0, 2.0]),
                                      nx in 2usize..10, ny in 2usize..10) {
        let g = grid_2d(nx, ny, 1.0, 1.0);
        let h = VectorField::constant(&[hx, hy]);
        let part = classify_boundary(&g, &h, default_eps_nu(hx.abs().max(hy.abs()))).unwrap();
        let mut seen = vec![0usize; g.faces().len()];
        for &f in part.plus_faces.iter().chain(part.minus_faces.iter()) {
            seen[f] += 1;
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        for &f in &part.plus_faces {
            prop_assert!(part.h_dot_nu[f] > 0.0);
        }
        for &f in &part.minus_faces {
            prop_assert!(part.h_dot_nu[f] < 0.0);
        }
    }

    /// LogScaled addition agrees with plain f64 arithmetic when nothing
    /// overflows, regardless of the scale split.
    #[test]
    fn logscale_matches_naive(a in 0.0f64..1e6, b in 0.0f64..1e6,
                              sa in -30.0f64..30.0, sb in -30.0f64..30.0) {
        let x = LogScaled::new(sa, a);
        let y = LogScaled::new(sb, b);
        let sum = x.add(y).to_f64();
        let naive = a * sa.exp() + b * sb.exp();
        prop_assert!((sum - naive).abs() <= 1e-9 * naive.max(1.0));
    }

    /// Quadrature is linear: integrate(c1*u + c2*v) = c1*I(u) + c2*I(v).
    #[test]
    fn quadrature_linearity(c1 in -5.0f64..5.0, c2 in -5.0f64..5.0, seed in 0u64..1000) {
        let g = grid_2d(6, 5, 1.0, 1.0);
        let n = g.n_cells();
        let u: Vec<f64> = (0..n).map(|i| ((i as f64 + seed as f64) * 0.7).sin()).collect();
        let v: Vec<f64> = (0..n).map(|i| ((i as f64 * 1.3 + seed as f64) * 0.4).cos()).collect();
        let mix: Vec<f64> = (0..n).map(|i| c1 * u[i] + c2 * v[i]).collect();
        let lhs = g.integrate_cells(&mix);
        let rhs = c1 * g.integrate_cells(&u) + c2 * g.integrate_cells(&v);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (lhs.abs() + rhs.abs() + 1.0));
    }

    /// Inequality reports are quadratically homogeneous: u -> alpha*u moves
    /// ln LHS and ln RHS by ln(alpha^2) and leaves every ratio unchanged.
    #[test]
    fn lemma1_quadratic_homogeneity(alpha in prop::sample::select(vec![0.01, 0.5, 3.0, 250.0]),
                                    s in 1.0f64..6.0) {
        let g = Grid::new(1, &[0.0], &[1.0], &[24], 1.5, 24).unwrap();
        let h = VectorField::constant(&[1.0]);
        let v = ScalarField::constant(0.0);
        let w = LinearWeight::build(&g, &h, &v, ScalarField::from_expr_str("x1").unwrap(), None)
            .unwrap();
        let part = classify_boundary(&g, &h, default_eps_nu(1.0)).unwrap();
        let u: Vec<Vec<f64>> = (0..=g.n_steps)
            .map(|k| {
                let t = k as f64 * g.dt();
                (0..g.n_cells())
                    .map(|c| {
                        let x = g.cell_center(c)[0];
                        (std::f64::consts::PI * x).sin() * (g.t_final - t) * (g.t_final - t)
                    })
                    .collect()
            })
            .collect();
        let ua: Vec<Vec<f64>> =
            u.iter().map(|r| r.iter().map(|v| alpha * v).collect()).collect();
        let r1 = verify_lemma1(&g, &h, &v, &part, &w, &u, Lemma1Part::II, &[s], EPS_DISC).unwrap();
        let r2 = verify_lemma1(&g, &h, &v, &part, &w, &ua, Lemma1Part::II, &[s], EPS_DISC).unwrap();
        let shift = (alpha * alpha).ln();
        prop_assert!((r2.ln_lhs[0] - r1.ln_lhs[0] - shift).abs() <= 1e-8);
        prop_assert!((r2.ln_rhs[0] - r1.ln_rhs[0] - shift).abs() <= 1e-8);
        prop_assert!((r2.ratios[0] - r1.ratios[0]).abs() <= 1e-9 * r1.ratios[0].max(1.0));
    }

    /// The measurement operator is linear: A(c1 f + c2 g) = c1 Af + c2 Ag.
    #[test]
    fn measurement_operator_linearity(c1 in -3.0f64..3.0, c2 in -3.0f64..3.0) {
        let g = Grid::new(1, &[0.0], &[1.0], &[16], 1.5, 24).unwrap();
        let h = VectorField::constant(&[1.0]);
        let v = ScalarField::constant(0.0);
        let r = ScalarField::constant(1.0);
        let op = MeasurementOperator::build(&g, &h, &v, r, TraceWeighting::HNu).unwrap();
        let n = g.n_cells();
        let f: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let q: Vec<f64> = (0..n).map(|i| (i as f64 * 0.9).cos()).collect();
        let mix: Vec<f64> = (0..n).map(|i| c1 * f[i] + c2 * q[i]).collect();
        let a_mix = op.apply(&mix);
        let af = op.apply(&f);
        let aq = op.apply(&q);
        let mut diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for k in 0..a_mix.len() {
            for m in 0..a_mix[k].len() {
                let want = c1 * af[k][m] + c2 * aq[k][m];
                diff = diff.max((a_mix[k][m] - want).abs());
                scale = scale.max(want.abs());
            }
        }
        prop_assert!(diff <= 1e-10 * scale.max(1.0));
    }
}
