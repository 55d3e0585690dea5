mod common;

use std::time::Instant;

use common::qp_oracle::{brute_force, random_qp};
use common::{c, integrator_spec, model, pendulum_spec, PENDULUM_P, PENDULUM_P_REACHABLE as PR};
use nalgebra::{DMatrix, DVector};
use nmpc_forge::ocp::{Constraint, Horizon, ObjectiveTerm, OcpSpec};
use nmpc_forge::presets;
use nmpc_forge::solver::{
    kkt_residual, solve_qp, sqp_solve, Guess, HessianMode, Qp, QpOptions, QpStatus, QpWorkspace,
    Side, SqpOptions, SqpWorkspace, Status,
};
use nmpc_forge::transcription::{rk4_step, transcribe, Nlp, TranscriptionCfg};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn qp_solve(qp: &Qp) -> nmpc_forge::solver::QpSolution {
    solve_qp(qp, &QpOptions::default(), None, &mut QpWorkspace::default())
}

#[test]
fn qp_bound_example() {
    // min x² + u² s.t. x >= 1
    let mut qp = Qp::new(2, vec![2.0, 0.0, 0.0, 2.0], vec![0.0, 0.0]);
    qp.lbx[0] = 1.0;
    let s = qp_solve(&qp);
    assert_eq!(s.status, QpStatus::Optimal);
    assert!((s.x[0] - 1.0).abs() < 1e-12 && s.x[1].abs() < 1e-12);
    // Hx + c + λx = 0: the lower bound pushes with multiplier magnitude 2.
    assert!((s.lam_x[0] + 2.0).abs() < 1e-12);
    assert_eq!(s.lam_x[1], 0.0);
    assert_eq!(s.working.vars, vec![Side::Lower, Side::Inactive]);
}

#[test]
fn qp_unconstrained() {
    let qp = Qp::new(
        3,
        DMatrix::<f64>::identity(3, 3).as_slice().to_vec(),
        vec![0.0; 3],
    );
    let s = qp_solve(&qp);
    assert_eq!(s.status, QpStatus::Optimal);
    assert_eq!(s.x, vec![0.0; 3]);
    assert_eq!(s.iterations, 0);
}

#[test]
fn qp_infeasible() {
    let mut qp = Qp::new(1, vec![1.0], vec![0.0]);
    qp.m = 2;
    qp.a = vec![1.0, 1.0];
    qp.lba = vec![1.0, f64::NEG_INFINITY];
    qp.uba = vec![f64::INFINITY, 0.0];
    assert_eq!(qp_solve(&qp).status, QpStatus::Infeasible);

    let mut qp = Qp::new(1, vec![1.0], vec![0.0]);
    qp.lbx[0] = 1.0;
    qp.ubx[0] = 0.0;
    assert_eq!(qp_solve(&qp).status, QpStatus::Infeasible);

    let mut qp = Qp::new(2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2]);
    qp.h.pop();
    assert_eq!(qp_solve(&qp).status, QpStatus::Malformed);
}

#[test]
fn qp_singular_hessian_is_regularized() {
    // min u² s.t. x + u = 1 with x free of curvature.
    let mut qp = Qp::new(2, vec![0.0, 0.0, 0.0, 2.0], vec![0.0, 0.0]);
    qp.m = 1;
    qp.a = vec![1.0, 1.0];
    qp.lba = vec![1.0];
    qp.uba = vec![1.0];
    let s = qp_solve(&qp);
    assert_eq!(s.status, QpStatus::Optimal);
    assert!(s.reg > 0.0);
    assert!((s.x[0] + s.x[1] - 1.0).abs() < 1e-12);
    assert!(s.x[1].abs() < 1e-6);
}

/// Random strictly convex QP with a known feasible point.
#[test]
fn qp_matches_active_set_enumeration() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let qp = random_qp(&mut rng);
        let s = qp_solve(&qp);
        assert_eq!(s.status, QpStatus::Optimal, "case {case}");
        let oracle = brute_force(&qp);
        for (a, b) in s.x.iter().zip(&oracle) {
            assert!(
                (a - b).abs() <= 1e-6,
                "case {case}: {:?} vs {:?}",
                s.x,
                oracle
            );
        }
        // KKT: stationarity, feasibility, complementarity.
        let n = qp.n;
        let cn = qp.c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            let mut r = qp.c[i] + s.lam_x[i];
            for j in 0..n {
                r += qp.h[i * n + j] * s.x[j];
            }
            for k in 0..qp.m {
                r += qp.a[k * n + i] * s.lam_a[k];
            }
            assert!(r.abs() <= 1e-9 * (1.0 + cn), "case {case} stationarity {r}");
        }
        for k in 0..qp.m {
            let ax: f64 = (0..n).map(|j| qp.a[k * n + j] * s.x[j]).sum();
            assert!(ax >= qp.lba[k] - 1e-10 && ax <= qp.uba[k] + 1e-10);
            if s.working.rows[k] == Side::Inactive {
                assert_eq!(s.lam_a[k], 0.0);
            }
        }
    }
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn qp_warm_start_reaches_same_solution() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..50 {
        let qp = random_qp(&mut rng);
        let cold = qp_solve(&qp);
        let warm = solve_qp(
            &qp,
            &QpOptions::default(),
            Some(&cold.working),
            &mut QpWorkspace::default(),
        );
        assert_eq!(warm.status, QpStatus::Optimal);
        assert!(warm.iterations <= cold.iterations);
        for (a, b) in warm.x.iter().zip(&cold.x) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn qp_factorization_cache_is_transparent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let qp = random_qp(&mut rng);
    let mut ws = QpWorkspace::default();
    let a = solve_qp(&qp, &QpOptions::default(), None, &mut ws);
    let mut qp2 = qp.clone();
    for v in &mut qp2.c {
        *v += 0.25;
    }
    let b = solve_qp(&qp2, &QpOptions::default(), None, &mut ws);
    assert_eq!(ws.cache_hits, 1);
    let fresh = qp_solve(&qp2);
    assert_eq!(a.status, QpStatus::Optimal);
    for (x, y) in b.x.iter().zip(&fresh.x) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

fn double_integrator() -> Nlp {
    // xdot = u over [0, 2] with N = 2 is x_{k+1} = x_k + u_k exactly.
    let mut ocp = OcpSpec::new(Horizon::Fixed(2.0)).unwrap();
    let m = ocp.add_model(model(common::INTEGRATOR_MODEL, "m")).unwrap();
    ocp.add_objective(ObjectiveTerm::integral(m.u().pow(&c(2.0)).unwrap()))
        .unwrap();
    let x = m.x();
    ocp.subject_to(Constraint::eq(ocp.at_t0(&x).unwrap(), c(1.0)))
        .unwrap();
    ocp.subject_to(Constraint::eq(ocp.at_tf(&x).unwrap(), c(0.0)))
        .unwrap();
    transcribe(
        &ocp.to_canonical().unwrap(),
        TranscriptionCfg::multiple_shooting(2),
    )
    .unwrap()
}

#[test]
fn sqp_double_integrator() {
    let nlp = double_integrator();
    let t = Instant::now();
    let sol = sqp_solve(
        &nlp,
        &[],
        None,
        &SqpOptions::default(),
        &mut SqpWorkspace::default(),
    );
    assert_eq!(sol.stats.status, Status::Solved);
    assert_eq!(sol.stats.iterations, 1);
    let u = &sol.w[3..5];
    assert!(
        (u[0] + 0.5).abs() < 1e-10 && (u[1] + 0.5).abs() < 1e-10,
        "{u:?}"
    );
    assert!((sol.f - 0.5).abs() <= 1e-10);
    assert!(t.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn kkt_residual_examples() {
    let nlp = double_integrator();
    // Hand multipliers for g = [x1-x0-u0, x2-x1-u1, x0-1, x2].
    let w = [1.0, 0.5, 0.0, -0.5, -0.5];
    let r = kkt_residual(&nlp, &w, &[-1.0, -1.0, -1.0, 1.0], &[], &[0.0; 5], &[]).unwrap();
    assert!(
        r.primal <= 1e-12 && r.dual <= 1e-12 && r.complementarity <= 1e-12,
        "{r:?}"
    );
    let r = kkt_residual(&nlp, &[0.0; 5], &[0.0; 4], &[], &[0.0; 5], &[]).unwrap();
    assert_eq!(r.primal, 1.0);

    let mut ocp = OcpSpec::new(Horizon::Fixed(1.0)).unwrap();
    ocp.add_model(model(presets::MOTOR_MODEL, "motor")).unwrap();
    let free = transcribe(
        &ocp.to_canonical().unwrap(),
        TranscriptionCfg::multiple_shooting(1),
    )
    .unwrap();
    // No objective and only the defects: pick a point on the dynamics.
    let w = [0.0, 0.0, 0.0, 0.0, 0.0];
    let r = kkt_residual(&free, &w, &[0.0, 0.0], &[], &[0.0; 5], &[]).unwrap();
    assert_eq!((r.primal, r.dual, r.complementarity), (0.0, 0.0, 0.0));
}

fn motor_qp_nlp() -> Nlp {
    let mut ocp = OcpSpec::new(Horizon::Fixed(1.0 / 6.0)).unwrap();
    let m = ocp.add_model(model(presets::MOTOR_MODEL, "motor")).unwrap();
    let x0 = ocp.parameter("x0", 2, false).unwrap();
    let x = m.x();
    let v = x
        .mul(&x)
        .unwrap()
        .sum_entries()
        .add(&m.u().pow(&c(2.0)).unwrap().scale(0.1))
        .unwrap();
    ocp.add_objective(ObjectiveTerm::integral(v)).unwrap();
    ocp.add_objective(ObjectiveTerm::at_tf(
        x.mul(&x).unwrap().sum_entries().scale(10.0),
    ))
    .unwrap();
    ocp.subject_to(Constraint::eq(ocp.at_t0(&x).unwrap(), x0))
        .unwrap();
    ocp.subject_to(Constraint::between(c(-10.0), m.u(), c(10.0)))
        .unwrap();
    transcribe(
        &ocp.to_canonical().unwrap(),
        TranscriptionCfg::multiple_shooting(20),
    )
    .unwrap()
}

#[test]
fn sqp_one_step_on_convex_qps() {
    let nlp = motor_qp_nlp();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for hessian in [HessianMode::Auto, HessianMode::Exact] {
        for _ in 0..10 {
            let p = [rng.random_range(-3.0..3.0), rng.random_range(-5.0..5.0)];
            let w: Vec<f64> = (0..nlp.nw()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let guess = Guess {
                w,
                ..Guess::default()
            };
            let opts = SqpOptions {
                hessian,
                ..SqpOptions::default()
            };
            let sol = sqp_solve(&nlp, &p, Some(&guess), &opts, &mut SqpWorkspace::default());
            assert_eq!(sol.stats.status, Status::Solved);
            assert_eq!(sol.stats.iterations, 1, "{:?}", sol.stats);
        }
    }
}

#[test]
fn sqp_warm_start_from_own_solution() {
    let nlp = pendulum_nlp();
    let mut ws = SqpWorkspace::default();
    let opts = SqpOptions::default();
    // Converge well below the default tolerances so the point is a solution
    // to working precision.
    let tight = SqpOptions {
        tol_pr: 1e-14,
        tol_du: 1e-12,
        hessian: HessianMode::Exact,
        ..SqpOptions::default()
    };
    let sol = sqp_solve(&nlp, &PR, None, &tight, &mut ws);
    assert_eq!(sol.stats.status, Status::Solved, "{:?}", sol.stats);
    let guess = Guess {
        w: sol.w.clone(),
        lam_g: Some(sol.lam_g.clone()),
        lam_h: Some(sol.lam_h.clone()),
        lam_x: Some(sol.lam_x.clone()),
        working: Some(sol.working.clone()),
    };
    let again = sqp_solve(&nlp, &PR, Some(&guess), &opts, &mut ws);
    assert_eq!(again.stats.status, Status::Solved);
    assert_eq!(again.stats.iterations, 1);
    assert!(
        again.stats.steps[0].step_inf <= 1e-12,
        "{:?}",
        again.stats.steps
    );
}

fn pendulum_nlp() -> Nlp {
    let can = pendulum_spec(Horizon::Fixed(2.0)).to_canonical().unwrap();
    transcribe(&can, TranscriptionCfg::multiple_shooting(40)).unwrap()
}

fn pendulum_rhs(x: &[f64], u: f64) -> Vec<f64> {
    vec![x[1], -(9.81 / 2.0) * x[0].sin() - 0.1 * x[1] + u / 4.0]
}

#[test]
fn sqp_pendulum_workflow() {
    let nlp = pendulum_nlp();
    let t = Instant::now();
    let sol = sqp_solve(
        &nlp,
        &PR,
        None,
        &SqpOptions::default(),
        &mut SqpWorkspace::default(),
    );
    let elapsed = t.elapsed().as_secs_f64();
    assert_eq!(sol.stats.status, Status::Solved, "{:?}", sol.stats);
    assert!(elapsed < 5.0);
    let g = nlp.g.call(&[&sol.w, &PR]).unwrap();
    assert!(g[80..].iter().all(|v| v.abs() <= 1e-8));
    for k in 0..40 {
        let f = sol.w[nlp.layout.u_offset(k)];
        assert!(f.abs() <= 2.0 + 1e-8);
    }
    // Re-simulate from x0 with the optimal controls.
    let mut x = vec![0.25, 0.0];
    for k in 0..40 {
        let u = sol.w[nlp.layout.u_offset(k)];
        x = rk4_step(&|x| pendulum_rhs(x, u), &x, 0.05);
        for i in 0..2 {
            assert!((x[i] - sol.w[2 * (k + 1) + i]).abs() <= 1e-10, "node {k}");
        }
    }
    // Merit never rises beyond the Armijo allowance.
    for s in &sol.stats.steps {
        assert!(s.merit_new <= s.merit + 1e-4 * s.alpha * s.slope.min(0.0) + 1e-12);
    }
}

#[test]
fn sqp_pendulum_from_half_radian_is_infeasible() {
    // Peak force needed from 0.5 rad is about 3.59 > 2; the first QP
    // linearization already has no feasible point.
    let nlp = pendulum_nlp();
    for hessian in [HessianMode::Auto, HessianMode::Exact] {
        let opts = SqpOptions {
            hessian,
            ..SqpOptions::default()
        };
        let sol = sqp_solve(&nlp, &PENDULUM_P, None, &opts, &mut SqpWorkspace::default());
        assert_eq!(sol.stats.status, Status::InfeasibleQp);
        assert!(sol.stats.primal_inf > 1e-3);
    }
}

#[test]
fn exact_and_gauss_newton_agree() {
    let nlp = pendulum_nlp();
    let mut f = Vec::new();
    for hessian in [HessianMode::GaussNewton, HessianMode::Exact] {
        let opts = SqpOptions {
            hessian,
            ..SqpOptions::default()
        };
        let sol = sqp_solve(&nlp, &PR, None, &opts, &mut SqpWorkspace::default());
        assert_eq!(sol.stats.status, Status::Solved);
        assert!(sol.stats.iterations <= 10, "{:?}", sol.stats.iterations);
        f.push(sol.f);
    }
    assert!((f[0] - f[1]).abs() < 1e-8);
}

#[test]
fn sqp_methods_agree_on_pendulum() {
    let can = pendulum_spec(Horizon::Fixed(2.0)).to_canonical().unwrap();
    let ms = transcribe(&can, TranscriptionCfg::multiple_shooting(40)).unwrap();
    let ss = transcribe(&can, TranscriptionCfg::single_shooting(40)).unwrap();
    let opts = SqpOptions::default();
    let a = sqp_solve(&ms, &PR, None, &opts, &mut SqpWorkspace::default());
    let b = sqp_solve(&ss, &PR, None, &opts, &mut SqpWorkspace::default());
    assert_eq!(a.stats.status, Status::Solved);
    assert_eq!(b.stats.status, Status::Solved, "{:?}", b.stats);
    assert!((a.f - b.f).abs() <= 1e-6, "{} vs {}", a.f, b.f);
}

#[test]
fn sqp_single_interval_both_methods() {
    let can = integrator_spec().to_canonical().unwrap();
    for cfg in [
        TranscriptionCfg::multiple_shooting(1),
        TranscriptionCfg::single_shooting(1),
    ] {
        let nlp = transcribe(&can, cfg).unwrap();
        let sol = sqp_solve(
            &nlp,
            &[],
            None,
            &SqpOptions::default(),
            &mut SqpWorkspace::default(),
        );
        assert_eq!(sol.stats.status, Status::Solved);
        let u = sol.w[nlp.layout.u_offset(0)];
        assert!((u - 1.0).abs() < 1e-10);
        let g = nlp.g.call(&[&sol.w, &[]]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn sqp_is_deterministic() {
    let nlp = pendulum_nlp();
    let a = sqp_solve(
        &nlp,
        &PR,
        None,
        &SqpOptions::default(),
        &mut SqpWorkspace::default(),
    );
    let b = sqp_solve(
        &nlp,
        &PR,
        None,
        &SqpOptions::default(),
        &mut SqpWorkspace::default(),
    );
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.w), bits(&b.w));
    assert_eq!(bits(&a.lam_g), bits(&b.lam_g));
    assert_eq!(a.stats.iterations, b.stats.iterations);
}

#[test]
fn gauss_newton_hessian_is_psd() {
    let nlp = pendulum_nlp();
    let gn = nlp.gn.as_ref().unwrap();
    let jr_f = nlp.gn_jac().unwrap().unwrap();
    let n = nlp.nw();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let jr = jr_f.call(&[&w, &PR]).unwrap();
        let om = gn.weight.call(&[&w, &PR]).unwrap();
        let nr = om.len();
        let j = DMatrix::from_row_slice(nr, n, &jr);
        let d = DMatrix::from_diagonal(&DVector::from_vec(om.iter().map(|v| 2.0 * v).collect()));
        let h = j.transpose() * d * &j + DMatrix::identity(n, n) * 1e-8;
        assert!(h.cholesky().is_some());
    }
}

#[test]
fn sqp_reports_infeasible_problems() {
    // x(0) = 0 and x(T) = 5 with |u| <= 1 over T = 1 cannot hold.
    let mut ocp = OcpSpec::new(Horizon::Fixed(1.0)).unwrap();
    let m = ocp.add_model(model(common::INTEGRATOR_MODEL, "m")).unwrap();
    let x = m.x();
    ocp.subject_to(Constraint::eq(ocp.at_t0(&x).unwrap(), c(0.0)))
        .unwrap();
    ocp.subject_to(Constraint::eq(ocp.at_tf(&x).unwrap(), c(5.0)))
        .unwrap();
    ocp.subject_to(Constraint::between(c(-1.0), m.u(), c(1.0)))
        .unwrap();
    let nlp = transcribe(
        &ocp.to_canonical().unwrap(),
        TranscriptionCfg::multiple_shooting(4),
    )
    .unwrap();
    let sol = sqp_solve(
        &nlp,
        &[],
        None,
        &SqpOptions::default(),
        &mut SqpWorkspace::default(),
    );
    assert_eq!(sol.stats.status, Status::InfeasibleQp);
    assert!(sol.stats.solve_time_s >= 0.0);
}

#[test]
fn sqp_max_iter() {
    let nlp = pendulum_nlp();
    let opts = SqpOptions {
        max_iter: 1,
        ..SqpOptions::default()
    };
    let sol = sqp_solve(&nlp, &PR, None, &opts, &mut SqpWorkspace::default());
    assert_eq!(sol.stats.status, Status::MaxIter);
    assert_eq!(sol.stats.iterations, 1);
}
