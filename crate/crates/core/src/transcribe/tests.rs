use super::*;
use crate::basis::PointFamily;
use crate::integrator::{simulate_controls, NewtonOptions};
use crate::model::library::{DenseProblem, DenseSizes, FreeMotion};
use crate::model::{make_crane_ocp, CraneParams, OdeDims, SecondOrderOde};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scheme(family: PointFamily, d: usize) -> CollocationScheme {
    CollocationScheme::new(family, d).unwrap()
}

fn frictionless() -> CraneParams {
    CraneParams {
        beta: 0.0,
        ..CraneParams::default()
    }
}

fn random_w(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn fd_gradient(nlp: &TranscribedNlp<'_>, w: &[f64]) -> Vec<f64> {
    let eps = 1e-6;
    let mut wp = w.to_vec();
    (0..w.len())
        .map(|i| {
            wp[i] = w[i] + eps;
            let fp = nlp.objective(&wp).unwrap();
            wp[i] = w[i] - eps;
            let fm = nlp.objective(&wp).unwrap();
            wp[i] = w[i];
            (fp - fm) / (2.0 * eps)
        })
        .collect()
}

/// Dense central-difference Jacobian, column by column.
fn fd_jacobian(nlp: &TranscribedNlp<'_>, w: &[f64]) -> DMatrix<f64> {
    let eps = 1e-6;
    let m = nlp.layout().n_constraints();
    let mut out = DMatrix::zeros(m, w.len());
    let mut wp = w.to_vec();
    let mut cp = vec![0.0; m];
    let mut cm = vec![0.0; m];
    for i in 0..w.len() {
        wp[i] = w[i] + eps;
        nlp.constraints(&wp, &mut cp).unwrap();
        wp[i] = w[i] - eps;
        nlp.constraints(&wp, &mut cm).unwrap();
        wp[i] = w[i];
        for r in 0..m {
            out[(r, i)] = (cp[r] - cm[r]) / (2.0 * eps);
        }
    }
    out
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

#[test]
fn crane_counts_against_closed_forms() {
    let ocp = make_crane_ocp(1.0, 0.3, frictionless()).unwrap();
    let s = scheme(PointFamily::GaussLegendre, 2);
    let sc = transcribe(&ocp, Method::Standard, &s).unwrap();
    let pc = transcribe(&ocp, Method::PositionBased, &s).unwrap();

    let (sc_c, pc_c) = (sc.structure_counts(), pc.structure_counts());
    let (sc_f, pc_f) = (sc.closed_form(), pc.closed_form());
    assert_eq!((sc_f.c1, sc_f.c2, sc_f.c3), (104, 132, 488));
    assert_eq!((sc_f.n_var, sc_f.n_constraints, sc_f.jac_nnz), (264, 292, 1368));
    assert_eq!((pc_f.n_var, pc_f.n_constraints, pc_f.jac_nnz), (184, 212, 1128));

    // Variables agree with the closed form; the built NLP has no extra rows.
    assert_eq!(sc_c.n_var, 264);
    assert_eq!(pc_c.n_var, 184);
    assert_eq!(sc_c.n_constraints, 288);
    assert_eq!(pc_c.n_constraints, 208);
    // Method-dependent blocks match the per-interval polynomials exactly.
    let n = 20;
    let nq = 2;
    let d = 2;
    let shared = n * nq * d * (nq + 1);
    assert_eq!(sc_c.blocks.dynamics.nnz + sc_c.blocks.stage.nnz, n * nq * (2 * d * d + 5 * d + 4) + shared);
    assert_eq!(pc_c.blocks.dynamics.nnz + pc_c.blocks.stage.nnz, n * nq * (d * d + 3 * d + 6) + shared);
    assert_eq!(sc_c.blocks.path.nnz, n * 2 * (1 + 2 * nq));
    assert_eq!(sc_c.blocks.boundary.nnz, 8 * 4 * nq);
    assert_eq!(sc_c.jac_nnz, 1384);
    assert_eq!(pc_c.jac_nnz, 1144);
    assert!(!sc_c.assumption_violated);
}

#[test]
fn counts_differ_by_the_expected_gaps() {
    for d in 1..=5 {
        let ocp = make_crane_ocp(0.5, 0.1, frictionless()).unwrap();
        let s = scheme(PointFamily::RadauIIA, d);
        let sc = transcribe(&ocp, Method::Standard, &s).unwrap().structure_counts();
        let pc = transcribe(&ocp, Method::PositionBased, &s).unwrap().structure_counts();
        let (n, nq) = (20, 2);
        assert_eq!(sc.n_var - pc.n_var, n * nq * d);
        assert_eq!(sc.jac_nnz - pc.jac_nnz, n * nq * (d * d + 2 * d - 2));
    }
}

#[test]
fn friction_flags_assumption() {
    let ocp = make_crane_ocp(1.0, 0.3, CraneParams::default()).unwrap();
    let pc = transcribe(&ocp, Method::PositionBased, &scheme(PointFamily::GaussLegendre, 2)).unwrap();
    assert!(pc.structure_counts().assumption_violated);
}

#[test]
fn single_interval_has_one_stage_block() {
    let params = CraneParams {
        intervals: 1,
        ..frictionless()
    };
    let ocp = make_crane_ocp(1.0, 0.3, params).unwrap();
    let nlp = transcribe(&ocp, Method::PositionBased, &scheme(PointFamily::GaussLegendre, 3)).unwrap();
    let c = nlp.structure_counts();
    assert_eq!(c.blocks.stage.rows, 3 * 2);
    assert_eq!(c.blocks.dynamics.rows, 4);
    assert!(make_crane_ocp(1.0, 0.3, CraneParams { intervals: 0, ..frictionless() }).is_err());
}

#[test]
fn pattern_is_sorted_and_unique() {
    let ocp = DenseProblem::new(dense_sizes(), 1, true, 1.0);
    for method in [Method::Standard, Method::PositionBased] {
        let nlp = transcribe(&ocp, method, &scheme(PointFamily::GaussLegendre, 3)).unwrap();
        let pat = nlp.pattern();
        assert!(pat.windows(2).all(|w| w[0] < w[1]));
    }
}

fn dense_sizes() -> DenseSizes {
    DenseSizes {
        nq: 2,
        nu: 2,
        np: 1,
        nc: 2,
        nr: 3,
        intervals: 3,
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let crane = make_crane_ocp(1.0, 0.3, CraneParams::default()).unwrap();
    let dense = DenseProblem::new(dense_sizes(), 2, true, 0.7);
    let problems: [&dyn OptimalControlProblem; 2] = [&crane, &dense];
    for ocp in problems {
        for method in [Method::Standard, Method::PositionBased] {
            for family in [PointFamily::GaussLegendre, PointFamily::RadauIIA] {
                let nlp = transcribe(ocp, method, &scheme(family, 2)).unwrap();
                for _ in 0..3 {
                    let w = random_w(&mut rng, nlp.n_var());
                    let ev = nlp.eval_full(&w).unwrap();
                    let fd = fd_gradient(&nlp, &w);
                    for i in 0..w.len() {
                        assert!(rel(ev.gradient[i], fd[i]) < 1e-5, "{method} {family} grad[{i}]: {} vs {}", ev.gradient[i], fd[i]);
                    }
                }
            }
        }
    }
}

#[test]
fn jacobian_matches_finite_differences_and_pattern_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for accel_reads_v in [false, true] {
        let ocp = DenseProblem::new(dense_sizes(), 3, accel_reads_v, 0.0);
        for method in [Method::Standard, Method::PositionBased] {
            let nlp = transcribe(&ocp, method, &scheme(PointFamily::GaussLegendre, 2)).unwrap();
            let pat = nlp.pattern();
            let w = random_w(&mut rng, nlp.n_var());
            let ev = nlp.eval_full(&w).unwrap();
            let fd = fd_jacobian(&nlp, &w);
            let mut declared = DMatrix::<f64>::zeros(fd.nrows(), fd.ncols());
            for (t, &(r, c)) in pat.iter().enumerate() {
                declared[(r, c)] = ev.jacobian[t];
                assert!(ev.jacobian[t] != 0.0, "{method} v={accel_reads_v} declared entry ({r}, {c}) is zero, fd {}", fd[(r, c)]);
            }
            for r in 0..fd.nrows() {
                for c in 0..fd.ncols() {
                    assert!(
                        rel(declared[(r, c)], fd[(r, c)]) < 1e-5,
                        "{method} v={accel_reads_v} ({r}, {c}) [{:?}]: {} vs {}",
                        nlp.row_block(r),
                        declared[(r, c)],
                        fd[(r, c)]
                    );
                }
            }
        }
    }
}

#[test]
fn simulated_trajectory_is_feasible() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let ocp = make_crane_ocp(1.0, 0.3, CraneParams::default()).unwrap();
    for method in [Method::Standard, Method::PositionBased] {
        for family in [PointFamily::GaussLegendre, PointFamily::RadauIIA] {
            let s = scheme(family, 3);
            let nlp = transcribe(&ocp, method, &s).unwrap();
            let controls: Vec<Vec<f64>> = (0..20).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
            let traj = simulate_controls(ocp.ode(), method, &s, &[1.0, 0.3, 0.0, 0.0], 10.0, &controls, &[], NewtonOptions::default()).unwrap();
            let w = nlp.embed(&traj, &controls, &[]).unwrap();
            let ev = nlp.eval_full(&w).unwrap();
            let worst = ev.constraints[..nlp.layout().boundary_row()].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(worst <= 1e-10, "{method} {family}: {worst:e}");
        }
    }
}

#[test]
fn crane_guess_is_linear_homotopy() {
    let ocp = make_crane_ocp(1.5, -0.4, CraneParams::default()).unwrap();
    let nlp = transcribe(&ocp, Method::PositionBased, &scheme(PointFamily::RadauIIA, 2)).unwrap();
    let w = nlp.initial_guess();
    let l = nlp.layout();
    for k in 0..=20 {
        let s = 1.0 - k as f64 / 20.0;
        assert!((w[l.x(k)] - 1.5 * s).abs() < 1e-14);
        assert!((w[l.x(k) + 1] + 0.4 * s).abs() < 1e-14);
    }
    assert!(nlp.controls(&w).iter().all(|u| u[0] == 0.0));
}

/// `q̈ = 0` with both endpoints pinned.
struct Glide {
    motion: FreeMotion,
    start: Vec<f64>,
    end: Vec<f64>,
}

impl OptimalControlProblem for Glide {
    fn ode(&self) -> &dyn SecondOrderOde {
        &self.motion
    }
    fn horizon(&self) -> f64 {
        2.0
    }
    fn intervals(&self) -> usize {
        4
    }
    fn n_path(&self) -> usize {
        0
    }
    fn n_boundary(&self) -> usize {
        0
    }
    fn stage_cost_velocity_dependent(&self) -> bool {
        false
    }
    /// `q^(2d−1)` for the quadrature check, with `d` packed into the first position.
    fn stage_cost(&self, x: &[f64], _u: &[f64], _p: &[f64]) -> f64 {
        x[0].powi(self.start.len() as i32 - 1)
    }
    fn stage_cost_gradient(&self, _x: &[f64], _u: &[f64], _p: &[f64], _gx: &mut [f64], _gu: &mut [f64], _gp: &mut [f64]) {}
    fn terminal_cost(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn terminal_cost_gradient(&self, _x: &[f64], _gx: &mut [f64]) {}
    fn path(&self, _x: &[f64], _u: &[f64], _p: &[f64], _out: &mut [f64]) {}
    fn path_jacobian(&self, _x: &[f64], _u: &[f64], _p: &[f64], _dx: &mut DMatrix<f64>, _du: &mut DMatrix<f64>, _dp: &mut DMatrix<f64>) {}
    fn boundary(&self, _x_end: &[f64], _x_start: &[f64], _p: &[f64], _out: &mut [f64]) {}
    fn boundary_jacobian(&self, _e: &[f64], _s: &[f64], _p: &[f64], _de: &mut DMatrix<f64>, _ds: &mut DMatrix<f64>, _dp: &mut DMatrix<f64>) {}
    fn fixed_endpoints(&self) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        (Some(self.start.clone()), Some(self.end.clone()))
    }
}

#[test]
fn linear_guess_solves_free_motion_exactly() {
    let glide = Glide {
        motion: FreeMotion { nq: 1 },
        start: vec![0.0, 0.0],
        end: vec![2.0, 0.0],
    };
    for method in [Method::Standard, Method::PositionBased] {
        for family in [PointFamily::GaussLegendre, PointFamily::RadauIIA] {
            let nlp = transcribe(&glide, method, &scheme(family, 3)).unwrap();
            let w = nlp.initial_guess();
            let mut c = vec![0.0; nlp.layout().n_constraints()];
            nlp.constraints(&w, &mut c).unwrap();
            assert!(c.iter().all(|v| v.abs() < 1e-11), "{method} {family}: {c:?}");
        }
    }
}

#[test]
fn equal_endpoints_give_constant_guess() {
    let glide = Glide {
        motion: FreeMotion { nq: 1 },
        start: vec![0.7, 0.0],
        end: vec![0.7, 0.0],
    };
    let nlp = transcribe(&glide, Method::Standard, &scheme(PointFamily::GaussLegendre, 2)).unwrap();
    for x in nlp.states(&nlp.initial_guess()) {
        assert_eq!(x, vec![0.7, 0.0]);
    }
}

#[test]
fn gauss_quadrature_is_exact_to_degree_2d_minus_1() {
    for d in 1..=4 {
        // q(t) = t on [0, 2]; L = q^(2d−1); the exponent is read from start.len().
        let mut start = vec![0.0; 2 * d];
        start[d] = 1.0;
        let glide = Glide {
            motion: FreeMotion { nq: d },
            start,
            end: vec![0.0; 2 * d],
        };
        let nlp = transcribe(&glide, Method::Standard, &scheme(PointFamily::GaussLegendre, d)).unwrap();
        let l = nlp.layout();
        let mut w = vec![0.0; l.n_var()];
        for k in 0..l.intervals {
            for i in 0..d {
                w[l.z_at(k, i)] = nlp.time(k, i);
            }
        }
        let exact = 2f64.powi(2 * d as i32) / (2 * d) as f64;
        let got = nlp.objective(&w).unwrap();
        assert!((got - exact).abs() < 1e-12 * exact, "d={d}: {got} vs {exact}");
    }
}

#[test]
fn zero_vector_gives_initial_offset_in_boundary_rows() {
    let ocp = make_crane_ocp(1.25, -0.5, CraneParams::default()).unwrap();
    let nlp = transcribe(&ocp, Method::Standard, &scheme(PointFamily::RadauIIA, 2)).unwrap();
    let ev = nlp.eval_full(&vec![0.0; nlp.n_var()]).unwrap();
    let b = &ev.constraints[nlp.layout().boundary_row()..nlp.layout().path_row(0)];
    assert_eq!(b, &[-1.25, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn non_finite_model_output_names_block() {
    struct Blowup;
    impl SecondOrderOde for Blowup {
        fn dims(&self) -> OdeDims {
            OdeDims::new(1, 0, 0)
        }
        fn velocity_dependent(&self) -> bool {
            false
        }
        fn accel(&self, _t: f64, q: &[f64], _v: &[f64], _u: &[f64], _p: &[f64], out: &mut [f64]) {
            out[0] = 1.0 / q[0];
        }
        fn accel_jacobian(&self, _t: f64, q: &[f64], _v: &[f64], _u: &[f64], _p: &[f64], jac: &mut AccelJacobian) {
            jac.dq[(0, 0)] = -1.0 / (q[0] * q[0]);
        }
    }
    let glide = Glide {
        motion: FreeMotion { nq: 1 },
        start: vec![0.0, 0.0],
        end: vec![0.0, 0.0],
    };
    struct Wrapper(Glide, Blowup);
    impl OptimalControlProblem for Wrapper {
        fn ode(&self) -> &dyn SecondOrderOde {
            &self.1
        }
        fn horizon(&self) -> f64 {
            self.0.horizon()
        }
        fn intervals(&self) -> usize {
            self.0.intervals()
        }
        fn n_path(&self) -> usize {
            0
        }
        fn n_boundary(&self) -> usize {
            0
        }
        fn stage_cost_velocity_dependent(&self) -> bool {
            false
        }
        fn stage_cost(&self, _x: &[f64], _u: &[f64], _p: &[f64]) -> f64 {
            0.0
        }
        fn stage_cost_gradient(&self, _x: &[f64], _u: &[f64], _p: &[f64], _gx: &mut [f64], _gu: &mut [f64], _gp: &mut [f64]) {}
        fn terminal_cost(&self, _x: &[f64]) -> f64 {
            0.0
        }
        fn terminal_cost_gradient(&self, _x: &[f64], _gx: &mut [f64]) {}
        fn path(&self, _x: &[f64], _u: &[f64], _p: &[f64], _out: &mut [f64]) {}
        fn path_jacobian(&self, _x: &[f64], _u: &[f64], _p: &[f64], _dx: &mut DMatrix<f64>, _du: &mut DMatrix<f64>, _dp: &mut DMatrix<f64>) {}
        fn boundary(&self, _x_end: &[f64], _x_start: &[f64], _p: &[f64], _out: &mut [f64]) {}
        fn boundary_jacobian(&self, _e: &[f64], _s: &[f64], _p: &[f64], _de: &mut DMatrix<f64>, _ds: &mut DMatrix<f64>, _dp: &mut DMatrix<f64>) {}
    }
    let prob = Wrapper(glide, Blowup);
    let nlp = transcribe(&prob, Method::PositionBased, &scheme(PointFamily::GaussLegendre, 1)).unwrap();
    let err = nlp.eval_full(&vec![0.0; nlp.n_var()]).unwrap_err();
    assert_eq!(
        err,
        Error::NonFinite {
            block: "stage",
            interval: Some(0)
        }
    );
}

#[test]
fn element_gradients_sum_to_full_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let ocp = DenseProblem::new(dense_sizes(), 4, true, 0.5);
    for method in [Method::Standard, Method::PositionBased] {
        let nlp = transcribe(&ocp, method, &scheme(PointFamily::RadauIIA, 2)).unwrap();
        let w = random_w(&mut rng, nlp.n_var());
        let elements = nlp.hessian_elements();
        let mut parts: Vec<Vec<f64>> = elements.iter().map(|e| vec![0.0; e.cols.len()]).collect();
        nlp.element_objective_gradients(&w, &mut parts).unwrap();
        let mut sum = vec![0.0; nlp.n_var()];
        for (e, part) in elements.iter().zip(&parts) {
            for (&c, v) in e.cols.iter().zip(part) {
                sum[c] += v;
            }
        }
        let mut full = vec![0.0; nlp.n_var()];
        nlp.gradient(&w, &mut full).unwrap();
        for i in 0..full.len() {
            assert!((sum[i] - full[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn kkt_order_is_a_permutation() {
    let ocp = DenseProblem::new(dense_sizes(), 5, false, 0.0);
    let nlp = transcribe(&ocp, Method::Standard, &scheme(PointFamily::GaussLegendre, 2)).unwrap();
    let order = nlp.kkt_order().unwrap();
    let n = nlp.n_var();
    let mut seen = vec![false; n + nlp.layout().n_constraints()];
    for node in order {
        let idx = match node {
            KktNode::Var(j) => j,
            KktNode::Row(r) => n + r,
        };
        assert!(!seen[idx]);
        seen[idx] = true;
    }
    assert!(seen.iter().all(|&s| s));
}
