//! Acceptance suite: one test per criterion, each printing a single
//! pass/fail line with the measured quantities before asserting.

use std::f64::consts::PI;
use std::time::Instant;

use transport_inverse::carleman::{
    calibrate_lemma4, h02_ensemble, trig_poly_ensemble, verify_lemma1, verify_lemma4, Lemma1Part,
    EPS_DISC,
};
use transport_inverse::fields::{ScalarField, VectorField};
use transport_inverse::geometry::{classify_boundary, default_eps_nu, Grid};
use transport_inverse::harness::{cmd_carleman, Experiment, ExperimentConfig};
use transport_inverse::inverse::{
    adjoint_gate, linearity_gate, reconstruct_source, singular_extremes, stability_ratio_theorem3,
    MeasurementOperator, TraceWeighting,
};
use transport_inverse::transport::{solve_upwind, SourceTerm, UpwindScheme, Variant};
use transport_inverse::weights::{exp_weight_constants, AdmissibleSetSpec, LinearWeight};

fn verdict(criterion: u32, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn case_a_grid(n: usize) -> Grid {
    Grid::new(1, &[0.0], &[1.0], &[n], 1.5, (3 * n) / 2).unwrap()
}

fn case_a_operator(n: usize, t_final: f64) -> MeasurementOperator {
    let steps = (n as f64 * t_final).round() as usize;
    let g = Grid::new(1, &[0.0], &[1.0], &[n], t_final, steps).unwrap();
    MeasurementOperator::build(
        &g,
        &VectorField::constant(&[1.0]),
        &ScalarField::constant(0.0),
        ScalarField::constant(1.0),
        TraceWeighting::HNu,
    )
    .unwrap()
}

/// Criterion 1: 1D Case A oracle — trace vs f(1-t), norm identity,
/// noiseless reconstruction. Runtime <= 10 s.
#[test]
fn criterion_1_case_a_oracle() {
    let t0 = Instant::now();
    let op = case_a_operator(256, 1.5);
    let f: Vec<f64> = (0..256)
        .map(|c| (PI * op.grid.cell_center(c)[0]).sin())
        .collect();
    let trace = op.apply(&f);
    let (mut num, mut den) = (0.0, 0.0);
    for (k, row) in trace.iter().enumerate() {
        let t = k as f64 * op.grid.dt();
        let exact = if t < 1.0 { (PI * (1.0 - t)).sin() } else { 0.0 };
        num += (row[0] - exact) * (row[0] - exact);
        den += exact * exact;
    }
    let trace_err = (num / den).sqrt();
    let norm_ratio = op.trace_norm(&trace) / op.field_norm(&f);
    let recon = reconstruct_source(&op, &trace, 0.0, 200, Some(&f)).unwrap();
    let recon_err = recon.rel_error.unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = trace_err <= 0.05
        && (0.9..=1.1).contains(&norm_ratio)
        && recon_err <= 0.02
        && elapsed <= 10.0;
    verdict(
        1,
        pass,
        &format!(
            "trace err {trace_err:.4}, |Af|/|f| {norm_ratio:.4}, recon err {recon_err:.2e}, {elapsed:.1}s"
        ),
    );
}

/// Criterion 2: Lemma 1(ii) over a 20-member trig ensemble at
/// s in {s0, 2s0, 3s0}, pass preserved at doubled resolution. <= 60 s.
#[test]
fn criterion_2_lemma1_suite() {
    let t0 = Instant::now();
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut pass = true;
    for n in [64usize, 128] {
        let g = case_a_grid(n);
        let h = VectorField::constant(&[1.0]);
        let v = ScalarField::constant(0.0);
        let w = LinearWeight::build(&g, &h, &v, ScalarField::from_expr_str("x1").unwrap(), None)
            .unwrap();
        let part = classify_boundary(&g, &h, default_eps_nu(1.0)).unwrap();
        let s_values = [w.s0, 2.0 * w.s0, 3.0 * w.s0];
        for u in trig_poly_ensemble(&g, 20, 3, 2, 2024) {
            let rep =
                verify_lemma1(&g, &h, &v, &part, &w, &u, Lemma1Part::II, &s_values, EPS_DISC)
                    .unwrap();
            pass &= rep.pass;
            worst = worst.max(rep.ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    pass &= elapsed <= 60.0;
    verdict(
        2,
        pass,
        &format!("worst ratio {worst:.4} (tol 1.05) at n=64 and n=128, {elapsed:.1}s"),
    );
}

/// Criterion 3: Lemma-2 energy estimate with constructive K, Case A and
/// the 2D configuration, max ratio <= 1.05.
#[test]
fn criterion_3_energy_estimate() {
    let mut details = Vec::new();
    let mut pass = true;

    // Case A with source f = sin(pi x)
    {
        let g = case_a_grid(256);
        let h = VectorField::constant(&[1.0]);
        let v = ScalarField::constant(0.0);
        let scheme = UpwindScheme::assemble(&g, &h, &v, Variant::Generic).unwrap();
        let part = classify_boundary(&g, &h, default_eps_nu(1.0)).unwrap();
        let f: Vec<f64> = (0..256).map(|c| (PI * g.cell_center(c)[0]).sin()).collect();
        let r = ScalarField::constant(1.0);
        let src = SourceTerm::Separated { f: &f, r: &r };
        let sol = solve_upwind(&g, &scheme, &part, &vec![0.0; 256], &src, None).unwrap();
        let rep =
            transport_inverse::transport::energy_report(&g, &h, &v, &part, &sol, &src, None)
                .unwrap();
        pass &= rep.max_ratio <= 1.05;
        details.push(format!("1D ratio {:.4}", rep.max_ratio));
    }

    // 2D: H = (1, 0.5), V = 0.3, 64^2, T = 2
    {
        let g = Grid::new(2, &[0.0, 0.0], &[1.0, 1.0], &[64, 64], 2.0, 192).unwrap();
        let h = VectorField::constant(&[1.0, 0.5]);
        let v = ScalarField::constant(0.3);
        let scheme = UpwindScheme::assemble(&g, &h, &v, Variant::Generic).unwrap();
        let part = classify_boundary(&g, &h, default_eps_nu(1.5)).unwrap();
        let a0: Vec<f64> = (0..g.n_cells())
            .map(|c| {
                let x = g.cell_center(c);
                (PI * x[0]).sin() * (PI * x[1]).sin()
            })
            .collect();
        let f: Vec<f64> = (0..g.n_cells())
            .map(|c| {
                let x = g.cell_center(c);
                (PI * x[0]).sin() * (PI * x[1]).sin()
            })
            .collect();
        let r = ScalarField::constant(1.0);
        let src = SourceTerm::Separated { f: &f, r: &r };
        let sol = solve_upwind(&g, &scheme, &part, &a0, &src, None).unwrap();
        let rep =
            transport_inverse::transport::energy_report(&g, &h, &v, &part, &sol, &src, None)
                .unwrap();
        pass &= rep.max_ratio <= 1.05;
        details.push(format!("2D ratio {:.4} (K = {:.2})", rep.max_ratio, rep.k_const));
    }
    verdict(3, pass, &details.join(", "));
}

/// Criterion 4: sigma_max/sigma_min refinement-stable within 2x in 1D and
/// 2D above the (1.7) threshold; sigma_min collapses >= 100x at half
/// threshold.
#[test]
fn criterion_4_both_sided_stability() {
    let mut details = Vec::new();
    let mut pass = true;

    // 1D: n = 128 vs 256 at T = 1.5 > 1
    let mut kappa_1d = Vec::new();
    for n in [128usize, 256] {
        let e = singular_extremes(&case_a_operator(n, 1.5), 80, 10, 200, 4).unwrap();
        kappa_1d.push(e.sigma_max / e.sigma_min);
    }
    let change_1d = (kappa_1d[1] / kappa_1d[0]).max(kappa_1d[0] / kappa_1d[1]);
    pass &= change_1d <= 2.0;
    details.push(format!("1D kappa change {change_1d:.3}"));

    // 2D: 32^2 vs 64^2, H = (1, 0.5), psi = x1 + 0.5 x2, T = 2 > 1.2
    let mut kappa_2d = Vec::new();
    for n in [32usize, 64] {
        let g = Grid::new(2, &[0.0, 0.0], &[1.0, 1.0], &[n, n], 2.0, 3 * n).unwrap();
        let op = MeasurementOperator::build(
            &g,
            &VectorField::constant(&[1.0, 0.5]),
            &ScalarField::constant(0.0),
            ScalarField::constant(1.0),
            TraceWeighting::HNu,
        )
        .unwrap();
        let e = singular_extremes(&op, 60, 8, 150, 4).unwrap();
        kappa_2d.push(e.sigma_max / e.sigma_min);
    }
    let change_2d = (kappa_2d[1] / kappa_2d[0]).max(kappa_2d[0] / kappa_2d[1]);
    pass &= change_2d <= 2.0;
    details.push(format!("2D kappa change {change_2d:.3}"));

    // half threshold: T = 0.5 in Case A
    let healthy = singular_extremes(&case_a_operator(128, 1.5), 80, 10, 200, 4).unwrap();
    let short = singular_extremes(&case_a_operator(128, 0.5), 80, 10, 200, 4).unwrap();
    let drop = if short.sigma_min > 0.0 {
        healthy.sigma_min / short.sigma_min
    } else {
        f64::INFINITY
    };
    pass &= drop >= 100.0;
    details.push(format!("sigma_min drop {drop:.1}x"));
    verdict(4, pass, &details.join(", "));
}

fn theorem2_run(n: usize) -> (f64, f64) {
    let g = Grid::new(1, &[0.0], &[1.0], &[n], 1.5, (3 * n) / 2).unwrap();
    let h = VectorField::constant(&[1.0]);
    let v2 = ScalarField::constant(0.0);
    let v1 = ScalarField::from_expr_str("0.3*sin(pi*x1)").unwrap();
    let a = ScalarField::constant(1.0);
    let inflow = |_f: usize, _t: f64| 1.0;
    let scheme1 = UpwindScheme::assemble(&g, &h, &v1, Variant::Generic).unwrap();
    let part = classify_boundary(&g, &h, default_eps_nu(1.0)).unwrap();
    let u1 = solve_upwind(
        &g,
        &scheme1,
        &part,
        &a.sample_cells(&g, 0.0),
        &SourceTerm::None,
        Some(&inflow),
    )
    .unwrap();
    let truth: Vec<f64> = (0..n).map(|c| v1.eval_cell(&g, c, 0.0)).collect();
    let out = transport_inverse::inverse::recover_coefficient_v(
        &g,
        &h,
        &v2,
        &a,
        Some(&inflow),
        &u1.traces,
        0.0,
        200,
        Some(&truth),
    )
    .unwrap();
    (out.recon.rel_error.unwrap(), out.report.ratio)
}

/// Criterion 5: Theorem 2 one-shot recovery <= 5% and (1.15) ratio
/// refinement-stable within 2x.
#[test]
fn criterion_5_theorem2_reduction() {
    let (err_256, ratio_256) = theorem2_run(256);
    let (_, ratio_128) = theorem2_run(128);
    let change = (ratio_256 / ratio_128).max(ratio_128 / ratio_256);
    let pass = err_256 <= 0.05 && ratio_256.is_finite() && change <= 2.0;
    verdict(
        5,
        pass,
        &format!("one-shot err {err_256:.4}, ratio {ratio_256:.3}, refinement change {change:.3}"),
    );
}

fn theorem3_run(n: usize) -> transport_inverse::inverse::StabilityRatioReport {
    let g = Grid::new(2, &[0.0, 0.0], &[1.0, 1.0], &[n, n], 3.0, 4 * n).unwrap();
    let d1 = ScalarField::from_expr_str("x1").unwrap();
    let d2 = ScalarField::from_expr_str(
        "x1 + 0.05*sin(pi*x1)*sin(pi*x1)*sin(pi*x2)*sin(pi*x2)",
    )
    .unwrap();
    let a = ScalarField::constant(1.0);
    let spec = AdmissibleSetSpec::new(
        &g,
        0.9,
        2.0,
        ScalarField::from_expr_str("x1").unwrap(),
        ScalarField::from_expr_str("2*x1 - 1").unwrap(),
        1e-9,
    )
    .unwrap();
    let inflow = |_f: usize, _t: f64| 1.0;
    stability_ratio_theorem3(&g, &d1, &d2, &a, &spec, Some(&inflow)).unwrap()
}

/// Criterion 6: Theorem 3 ratios finite and refinement-stable within 2x;
/// (4.10) identity residual <= 10% at 64^2. Runtime <= 120 s.
#[test]
fn criterion_6_theorem3_ratios() {
    let t0 = Instant::now();
    let r32 = theorem3_run(32);
    let r64 = theorem3_run(64);
    let change = (r64.ratio / r32.ratio).max(r32.ratio / r64.ratio);
    let identity = r64.aux["identity_rel_error"];
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = r32.ratio.is_finite()
        && r64.ratio.is_finite()
        && change <= 2.0
        && identity <= 0.10
        && elapsed <= 120.0;
    verdict(
        6,
        pass,
        &format!(
            "ratios {:.4e}/{:.4e}, change {change:.3}, (4.10) residual {identity:.4}, {elapsed:.1}s",
            r32.ratio, r64.ratio
        ),
    );
}

/// Criterion 7: Lemma 4 — calibrate on 5 probes, then a disjoint
/// 10-member test set passes the frozen-constant inequality at
/// s in {s1, 2 s1}.
#[test]
fn criterion_7_lemma4_suite() {
    let g = Grid::new(2, &[0.0, 0.0], &[1.0, 1.0], &[32, 32], 3.0, 48).unwrap();
    let make = |lam: f64| {
        exp_weight_constants(
            &g,
            ScalarField::from_expr_str("x1").unwrap(),
            &[],
            0.5,
            lam,
            0.9,
            2.0,
        )
    };
    let cal = calibrate_lemma4(&g, &make, &h02_ensemble(&g, 5, 11), 1.5).unwrap();
    let w = make(cal.lambda0).unwrap();
    let mut pass = true;
    let mut worst: f64 = f64::NEG_INFINITY;
    for f in &h02_ensemble(&g, 10, 99) {
        let rep = verify_lemma4(&g, &w, f, cal.c_const, &[cal.s1, 2.0 * cal.s1], EPS_DISC).unwrap();
        pass &= rep.pass;
        worst = worst.max(rep.ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
    verdict(
        7,
        pass,
        &format!(
            "lambda0 {}, s1 {:.3}, C {:.3}, worst test ratio {worst:.4}",
            cal.lambda0, cal.s1, cal.c_const
        ),
    );
}

/// Criterion 8: structural gates — adjoint, linearity, max principle,
/// mass balance, determinism hash.
#[test]
fn criterion_8_structural_gates() {
    let mut details = Vec::new();
    let mut pass = true;

    let op = case_a_operator(64, 1.5);
    let adj = adjoint_gate(&op, 50, 808);
    let lin = linearity_gate(&op, 20, 809);
    pass &= adj <= 1e-10 && lin <= 1e-12;
    details.push(format!("adjoint {adj:.2e}, linearity {lin:.2e}"));

    // max principle: no source, data in [0, 1] stays in [-eps, 1 + eps]
    {
        let g = case_a_grid(64);
        let h = VectorField::constant(&[1.0]);
        let v = ScalarField::constant(0.0);
        let scheme = UpwindScheme::assemble(&g, &h, &v, Variant::Generic).unwrap();
        let part = classify_boundary(&g, &h, default_eps_nu(1.0)).unwrap();
        let a0: Vec<f64> = (0..64)
            .map(|c| 0.5 + 0.5 * (3.0 * PI * g.cell_center(c)[0]).sin())
            .collect();
        let inflow = |_f: usize, t: f64| 0.5 + 0.5 * (5.0 * t).cos();
        let sol = solve_upwind(&g, &scheme, &part, &a0, &SourceTerm::None, Some(&inflow)).unwrap();
        let mut viol: f64 = 0.0;
        for node in &sol.values {
            for v in node {
                viol = viol.max(-v).max(v - 1.0);
            }
        }
        pass &= viol <= 1e-12;
        details.push(format!("max principle {viol:.2e}"));
    }

    // conservative mass balance
    {
        let g = case_a_grid(64);
        let h = VectorField::constant(&[1.0]);
        let v = ScalarField::constant(0.0);
        let scheme = UpwindScheme::assemble(&g, &h, &v, Variant::Conservative).unwrap();
        let part = classify_boundary(&g, &h, default_eps_nu(1.0)).unwrap();
        let a0: Vec<f64> = (0..64).map(|c| 1.0 + g.cell_center(c)[0]).collect();
        let sol = solve_upwind(&g, &scheme, &part, &a0, &SourceTerm::None, None).unwrap();
        let defect = sol.mass_ledger.as_ref().unwrap().defect;
        pass &= defect <= 1e-12;
        details.push(format!("mass defect {defect:.2e}"));
    }

    // determinism: identical config, identical report hash
    {
        let cfg_src = r#"
[domain]
dim = 1
lo = [0.0]
hi = [1.0]
n = [32]
t_final = 1.5
n_steps = 48

[fields]
H = "1"

[weights]
psi = "x1"

[sweep]
ensemble_members = 5

[run]
seed = 99
"#;
        let cfg = ExperimentConfig::from_toml_str(cfg_src).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut hashes = Vec::new();
        for _ in 0..2 {
            let e = Experiment::resolve(cfg.clone(), 0, None, Some(dir.path())).unwrap();
            cmd_carleman(&e, true).unwrap();
            let rep: serde_json::Value = serde_json::from_str(
                &std::fs::read_to_string(dir.path().join("carleman.json")).unwrap(),
            )
            .unwrap();
            hashes.push(rep["content_hash"].as_str().unwrap().to_string());
        }
        pass &= hashes[0] == hashes[1];
        details.push(format!("determinism hash match {}", hashes[0] == hashes[1]));
    }

    verdict(8, pass, &details.join(", "));
}
