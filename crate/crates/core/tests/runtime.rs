mod common;

use std::sync::Arc;

use common::{c, model, pendulum_spec, INTEGRATOR_MODEL, PENDULUM_P, PENDULUM_P_REACHABLE};
use nmpc_forge::ocp::{Constraint, Horizon, ObjectiveTerm, OcpSpec};
use nmpc_forge::runtime::{
    export_bundle, flags, Bundle, HotStart, Instance, Ordering, Repetition, RuntimeError, Selector,
    Stage, StateBlob,
};
use nmpc_forge::solver::{SqpOptions, Status};
use nmpc_forge::transcription::TranscriptionCfg;
use proptest::prelude::*;

fn pendulum_bundle() -> Arc<Bundle> {
    let can = pendulum_spec(Horizon::Fixed(2.0)).to_canonical().unwrap();
    Arc::new(
        export_bundle(
            "pendulum",
            &can,
            TranscriptionCfg::multiple_shooting(40),
            SqpOptions::default(),
        )
        .unwrap(),
    )
}

fn set_pendulum(inst: &mut Instance, p: &[f64; 6]) {
    inst.set(&Selector::new("x_0", Stage::At(0)), &p[0..2])
        .unwrap();
    inst.set(&Selector::new("x_f", Stage::Everywhere), &p[2..4])
        .unwrap();
    inst.set(&Selector::new("Wt", Stage::At(0)), &p[4..6])
        .unwrap();
}

/// `xdot = u` over 4 intervals with a stage-varying reference.
fn tracking_bundle() -> Arc<Bundle> {
    let mut ocp = OcpSpec::new(Horizon::Fixed(1.0)).unwrap();
    let m = ocp.add_model(model(INTEGRATOR_MODEL, "m")).unwrap();
    let r = ocp.parameter("r", 1, true).unwrap();
    let x0 = ocp.parameter("x0", 1, false).unwrap();
    let _spare = ocp.parameter("spare", 3, true).unwrap();
    let e = m.x().sub(&r).unwrap();
    let v = e
        .pow(&c(2.0))
        .unwrap()
        .add(&m.u().pow(&c(2.0)).unwrap().scale(0.1))
        .unwrap();
    ocp.add_objective(ObjectiveTerm::integral(v)).unwrap();
    ocp.subject_to(Constraint::eq(ocp.at_t0(&m.x()).unwrap(), x0))
        .unwrap();
    ocp.subject_to(Constraint::between(c(-5.0), m.u(), c(5.0)))
        .unwrap();
    let can = ocp.to_canonical().unwrap();
    Arc::new(
        export_bundle(
            "tracking",
            &can,
            TranscriptionCfg::multiple_shooting(4),
            SqpOptions::default(),
        )
        .unwrap(),
    )
}

#[test]
fn pendulum_export_tables() {
    let b = pendulum_bundle();
    let nlp = b.nlp();
    assert_eq!(nlp.layout.intervals, 40);
    assert_eq!(nlp.nw(), 122);
    let table: Vec<(&str, usize)> = nlp
        .params
        .entries
        .iter()
        .map(|e| (e.name.as_str(), e.len))
        .collect();
    assert_eq!(table, vec![("x_0", 2), ("x_f", 2), ("Wt", 2)]);
    assert!((b.dt() - 0.05).abs() < 1e-15);
    assert!(b.to_bytes().starts_with(b"bundlev1\n"));
}

#[test]
fn export_load_export_is_byte_identical() {
    let b = pendulum_bundle();
    let loaded = Bundle::from_bytes(b.to_bytes()).unwrap();
    assert_eq!(loaded.to_bytes(), b.to_bytes());
    assert_eq!(loaded.hash(), b.hash());
    // Same bytes from a fresh export.
    assert_eq!(pendulum_bundle().to_bytes(), b.to_bytes());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pendulum.impb");
    b.save(&path).unwrap();
    assert_eq!(Bundle::load(&path).unwrap().to_bytes(), b.to_bytes());
    assert!(matches!(
        Bundle::load(&dir.path().join("missing.impb")),
        Err(RuntimeError::Io(_))
    ));
}

#[test]
fn loaded_bundle_solves_identically() {
    let b = pendulum_bundle();
    let loaded = Arc::new(Bundle::from_bytes(b.to_bytes()).unwrap());
    let mut a = Instance::new(b);
    let mut l = Instance::new(loaded);
    set_pendulum(&mut a, &PENDULUM_P_REACHABLE);
    set_pendulum(&mut l, &PENDULUM_P_REACHABLE);
    assert_eq!(a.solve(), Status::Solved);
    assert_eq!(l.solve(), Status::Solved);
    let bits = |i: &Instance| {
        i.solution()
            .unwrap()
            .w
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&l));
}

#[test]
fn corrupt_bundles_are_rejected() {
    let b = pendulum_bundle();
    let bytes = b.to_bytes();
    let truncated = &bytes[..bytes.len() / 2];
    assert!(matches!(
        Bundle::from_bytes(truncated),
        Err(RuntimeError::Corrupt(_))
    ));
    let mut flipped = bytes.to_vec();
    flipped[100] ^= 1;
    assert!(matches!(
        Bundle::from_bytes(&flipped),
        Err(RuntimeError::Corrupt(_))
    ));
    let mut v2 = bytes.to_vec();
    v2[7] = b'2';
    assert!(matches!(
        Bundle::from_bytes(&v2),
        Err(RuntimeError::Version(_))
    ));
    assert!(Bundle::from_bytes(b"").is_err());
    assert!(Bundle::from_bytes(b"hello").is_err());
}

#[test]
fn fresh_instance() {
    let inst = Instance::new(pendulum_bundle());
    assert_eq!(inst.solve_count(), 0);
    let st = inst.stats();
    assert_eq!(st.status, Status::Unsolved);
    assert_eq!((st.iterations, st.qp_iterations), (0, 0));
    assert_eq!(
        (st.solve_time_s, st.primal_inf, st.dual_inf),
        (0.0, 0.0, 0.0)
    );
    assert!(inst.parameters().iter().all(|v| *v == 0.0));
    assert_eq!(
        inst.get_vec(&Selector::new("u_opt", Stage::At(0))),
        Err(RuntimeError::NoSolution)
    );
}

#[test]
fn instances_are_independent() {
    let b = pendulum_bundle();
    let mut a = Instance::new(b.clone());
    let other = Instance::new(b);
    a.set(&Selector::new("x_0", Stage::At(0)), &[0.5, 0.0])
        .unwrap();
    assert_eq!(
        a.get_vec(&Selector::new("x_0", Stage::At(0))).unwrap(),
        vec![0.5, 0.0]
    );
    assert_eq!(
        other.get_vec(&Selector::new("x_0", Stage::At(0))).unwrap(),
        vec![0.0, 0.0]
    );
}

#[test]
fn set_get_contracts() {
    let b = tracking_bundle();
    let mut inst = Instance::new(b);
    // Stage-varying parameters have N+1 stages.
    inst.set(&Selector::new("r", Stage::Everywhere).hrep(), &[-3.0])
        .unwrap();
    for k in 0..5 {
        assert_eq!(
            inst.get_vec(&Selector::new("r", Stage::At(k))).unwrap(),
            vec![-3.0]
        );
    }
    inst.set(
        &Selector::new("spare", Stage::Everywhere).hrep(),
        &[-3.0, 0.0, 1.5],
    )
    .unwrap();
    for k in 0..5 {
        assert_eq!(
            inst.get_vec(&Selector::new("spare", Stage::At(k))).unwrap(),
            vec![-3.0, 0.0, 1.5]
        );
    }
    let err = inst.set(&Selector::new("u_opt", Stage::At(0)), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(err, Err(RuntimeError::ReadOnly("u_opt".into())));
    assert_eq!(err.unwrap_err().to_string(), "read-only identifier `u_opt`");
    assert!(matches!(
        inst.set(&Selector::new("m.x", Stage::At(0)), &[1.0]),
        Err(RuntimeError::ReadOnly(_))
    ));
    assert!(matches!(
        inst.set(&Selector::new("nope", Stage::At(0)), &[1.0]),
        Err(RuntimeError::UnknownId(_))
    ));
    assert_eq!(
        inst.set(&Selector::new("spare", Stage::At(0)), &[1.0]),
        Err(RuntimeError::Length {
            expected: 3,
            got: 1
        })
    );
    assert!(matches!(
        inst.set(&Selector::new("r", Stage::At(5)), &[1.0]),
        Err(RuntimeError::Stage {
            stage: 5,
            stages: 5,
            ..
        })
    ));
    assert!(matches!(
        inst.set(&Selector::new("x0", Stage::At(1)), &[1.0]),
        Err(RuntimeError::Stage { .. })
    ));
}

#[test]
fn one_stage_hand_solve() {
    // min (u - 1)^2 with x(0) = 0; u does not couple into the cost.
    let mut ocp = OcpSpec::new(Horizon::Fixed(1.0)).unwrap();
    let m = ocp.add_model(model(INTEGRATOR_MODEL, "m")).unwrap();
    let v = m.u().sub(&c(1.0)).unwrap().pow(&c(2.0)).unwrap();
    ocp.add_objective(ObjectiveTerm::integral(v)).unwrap();
    ocp.subject_to(Constraint::eq(ocp.at_t0(&m.x()).unwrap(), c(0.0)))
        .unwrap();
    let can = ocp.to_canonical().unwrap();
    let b = export_bundle(
        "one",
        &can,
        TranscriptionCfg::multiple_shooting(1),
        SqpOptions::default(),
    )
    .unwrap();
    let mut inst = Instance::new(Arc::new(b));
    assert_eq!(inst.solve(), Status::Solved);
    let u = inst.get_vec(&Selector::new("u_opt", Stage::At(0))).unwrap();
    assert!((u[0] - 1.0).abs() < 1e-12, "{u:?}");
    assert_eq!(
        inst.get_vec(&Selector::new("m.u", Stage::At(0))).unwrap(),
        u
    );
    let f = inst
        .get_vec(&Selector::new("f_opt", Stage::Everywhere))
        .unwrap();
    assert!(f[0].abs() < 1e-20);
}

#[test]
fn pendulum_solve_and_readout() {
    let mut inst = Instance::new(pendulum_bundle());
    set_pendulum(&mut inst, &PENDULUM_P_REACHABLE);
    assert_eq!(inst.solve(), Status::Solved);
    let x = inst
        .get_vec(&Selector::new("x_opt", Stage::Everywhere))
        .unwrap();
    assert_eq!(x.len(), 41 * 2);
    assert!((x[0] - 0.25).abs() < 1e-12);
    let xc = inst
        .get_vec(&Selector::new("x_opt", Stage::Everywhere).column_major())
        .unwrap();
    for s in 0..41 {
        for r in 0..2 {
            assert_eq!(x[s * 2 + r].to_bits(), xc[r * 41 + s].to_bits());
        }
    }
    let phi = inst
        .get_vec(&Selector::new("pendulum.phi", Stage::Everywhere))
        .unwrap();
    assert_eq!(phi, xc[..41].to_vec());
    let u = inst
        .get_vec(&Selector::new("u_opt", Stage::Everywhere))
        .unwrap();
    assert_eq!(u.len(), 40);
    assert!(u.iter().all(|v| v.abs() <= 2.0 + 1e-8));
    let first = inst
        .get_vec(&Selector::new("pendulum.F", Stage::At(0)))
        .unwrap();
    assert_eq!(first[0], u[0]);
    assert!(inst
        .get_vec(&Selector::new("z_opt", Stage::Everywhere))
        .unwrap()
        .is_empty());

    // Warm-started re-solve.
    assert_eq!(inst.solve(), Status::Solved);
    assert_eq!(inst.stats().iterations, 1);
    assert_eq!(inst.solve_count(), 2);
}

#[test]
fn pendulum_from_half_radian_reports_infeasibility() {
    let mut inst = Instance::new(pendulum_bundle());
    set_pendulum(&mut inst, &PENDULUM_P);
    assert_eq!(inst.solve(), Status::InfeasibleQp);
    assert_eq!(inst.stats().status.name(), "infeasible_qp");
    // Failure isolation: a valid solve afterwards succeeds.
    set_pendulum(&mut inst, &PENDULUM_P_REACHABLE);
    assert_eq!(inst.solve(), Status::Solved);
}

#[test]
fn save_load_solve_matches_uninterrupted_run() {
    let b = pendulum_bundle();
    let mut a = Instance::new(b.clone());
    set_pendulum(&mut a, &PENDULUM_P_REACHABLE);
    assert_eq!(a.solve(), Status::Solved);
    let blob = a.save_state();

    let mut resumed = Instance::new(b);
    resumed.load_state(&blob).unwrap();
    a.set(&Selector::new("x_0", Stage::At(0)), &[0.2, 0.1])
        .unwrap();
    resumed
        .set(&Selector::new("x_0", Stage::At(0)), &[0.2, 0.1])
        .unwrap();
    a.solve();
    resumed.solve();
    let bits = |i: &Instance| {
        i.solution()
            .unwrap()
            .w
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&resumed));
    assert_eq!(a.stats().iterations, resumed.stats().iterations);

    let mut other = Instance::new(tracking_bundle());
    assert_eq!(other.load_state(&blob), Err(RuntimeError::BundleMismatch));
}

#[test]
fn default_state_blob() {
    let inst = Instance::new(pendulum_bundle());
    let blob = StateBlob::decode(&inst.save_state()).unwrap();
    assert_eq!(blob.p, vec![0.0; 6]);
    assert_eq!(blob.iterate, None);
    assert_eq!(blob.hot_start, HotStart::Previous);
    assert_eq!(blob.bundle_hash, inst.bundle().hash());

    let mut bytes = inst.save_state();
    let n = bytes.len();
    bytes[n - 3] ^= 1;
    assert!(StateBlob::decode(&bytes).is_err());
    assert!(matches!(
        StateBlob::decode(b"impsv9\n"),
        Err(RuntimeError::Version(_))
    ));
}

#[test]
fn shift_hot_start_tracks_a_moving_window() {
    let mut inst = Instance::new(tracking_bundle());
    inst.set_hot_start(HotStart::Shift);
    inst.set(&Selector::new("r", Stage::Everywhere).hrep(), &[1.0])
        .unwrap();
    for _ in 0..3 {
        assert_eq!(inst.solve(), Status::Solved);
        let x = inst
            .get_vec(&Selector::new("x_opt", Stage::Everywhere))
            .unwrap();
        inst.set(&Selector::new("x0", Stage::At(0)), &x[1..2])
            .unwrap();
    }
    let blob = StateBlob::decode(&inst.save_state()).unwrap();
    assert_eq!(blob.hot_start, HotStart::Shift);
}

#[test]
fn selector_flags() {
    let s =
        Selector::from_flags("x_0", flags::EVERYWHERE, flags::HREP | flags::COLUMN_MAJOR).unwrap();
    assert_eq!(s.stage, Stage::Everywhere);
    assert_eq!(s.repetition, Repetition::Hrep);
    assert_eq!(s.ordering, Ordering::ColumnMajor);
    let s = Selector::from_flags("x_0", 3, flags::FULL | flags::ROW_MAJOR).unwrap();
    assert_eq!(s.stage, Stage::At(3));
    assert!(Selector::from_flags("x", 0, flags::FULL | flags::HREP | flags::ROW_MAJOR).is_err());
    assert!(Selector::from_flags("x", 0, flags::FULL).is_err());
    assert!(Selector::from_flags("x", 0, flags::FULL | flags::ROW_MAJOR | 64).is_err());
    assert!(Selector::from_flags("x", -2, flags::FULL | flags::ROW_MAJOR).is_err());
}

#[test]
fn instances_run_on_separate_threads() {
    fn is_send<T: Send>() {}
    is_send::<Instance>();
    let b = tracking_bundle();
    let handles: Vec<_> = (0..3)
        .map(|i| {
            let b = b.clone();
            std::thread::spawn(move || {
                let mut inst = Instance::new(b);
                inst.set(&Selector::new("r", Stage::Everywhere).hrep(), &[i as f64])
                    .unwrap();
                inst.solve();
                inst.get_vec(&Selector::new("u_opt", Stage::At(0))).unwrap()[0]
            })
        })
        .collect();
    let u: Vec<f64> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_eq!(u[0], 0.0);
    assert!(u[1] > 0.0 && u[2] > u[1]);
}

proptest! {
    #[test]
    fn set_get_roundtrip(
        values in prop::collection::vec(any::<f64>(), 15),
        column in any::<bool>(),
        stage in 0usize..5,
    ) {
        let b = tracking_bundle();
        let mut inst = Instance::new(b);
        let order = |s: Selector| if column { s.column_major() } else { s };
        // Full, every stage.
        let sel = order(Selector::new("spare", Stage::Everywhere));
        inst.set(&sel, &values).unwrap();
        let back = inst.get_vec(&sel).unwrap();
        prop_assert_eq!(
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        // Hrep equals Full with the vector repeated.
        let v = &values[..3];
        let mut hrep = Instance::new(inst.bundle().clone());
        hrep.set(&order(Selector::new("spare", Stage::Everywhere).hrep()), v).unwrap();
        let mut full = Instance::new(inst.bundle().clone());
        let repeated: Vec<f64> = if column {
            v.iter().flat_map(|x| std::iter::repeat_n(*x, 5)).collect()
        } else {
            v.iter().cycle().take(15).copied().collect()
        };
        full.set(&order(Selector::new("spare", Stage::Everywhere)), &repeated).unwrap();
        let bits = |i: &Instance| i.parameters().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&hrep), bits(&full));
        // Single stage.
        let one = order(Selector::new("spare", Stage::At(stage)));
        inst.set(&one, v).unwrap();
        let got = inst.get_vec(&one).unwrap();
        prop_assert_eq!(
            got.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
