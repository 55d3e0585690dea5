use std::collections::HashSet;

use nmpc_forge::expr::{self, FunctionDef};
use nmpc_forge::model_io::{bind, emit, parse_model, Equations, ModelError};
use nmpc_forge::presets::PENDULUM_MODEL;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INLINE_SNIPPET: &str = "equations:
  inline:
    ode:
      phi: dphi
      dphi: L*cos(phi)*sin(phi)...
differential_states:
  - name: phi
  - name: dphi
controls:
  - name: F
constants:
  inline:
    L: 2
";

const EXTERNAL_SNIPPET: &str = "equations:
  external:
    type: casadi_serialized
    file_name: ode.casadi
differential_states:
  - name: phi
  - name: dphi
controls:
  - name: F
";

fn no_files(name: &str) -> Result<String, ModelError> {
    Err(ModelError::External {
        file: name.to_string(),
        reason: "not available".into(),
    })
}

/// Removes the field on line `i`: list items lose their mapping (leaving a
/// null entry), keys are removed together with their nested lines.
fn delete_field(text: &str, i: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    let indent = |l: &str| l.len() - l.trim_start().len();
    let mut out = Vec::new();
    let target = lines[i];
    let mut j = 0;
    while j < lines.len() {
        if j == i {
            if target.trim_start().starts_with("- ") {
                out.push(format!("{}-", " ".repeat(indent(target))));
                j += 1;
            } else {
                j += 1;
                while j < lines.len() && indent(lines[j]) > indent(target) {
                    j += 1;
                }
            }
            continue;
        }
        out.push(lines[j].to_string());
        j += 1;
    }
    out.join("\n") + "\n"
}

#[test]
fn paper_snippets_parse() {
    let spec = parse_model(INLINE_SNIPPET).unwrap();
    assert_eq!(spec.differential_states, ["phi", "dphi"]);
    assert_eq!(spec.controls, ["F"]);
    assert_eq!(spec.constants, vec![("L".to_string(), 2.0)]);

    let spec = parse_model(EXTERNAL_SNIPPET).unwrap();
    assert_eq!(
        spec.equations,
        Equations::External {
            type_tag: "casadi_serialized".into(),
            file_name: "ode.casadi".into()
        }
    );
}

#[test]
fn every_single_field_deletion_is_rejected_distinctly() {
    for snippet in [INLINE_SNIPPET, EXTERNAL_SNIPPET] {
        let mut messages = HashSet::new();
        let n = snippet.lines().count();
        for i in 0..n {
            let text = delete_field(snippet, i);
            let err = parse_model(&text).expect_err(&text).to_string();
            assert!(
                messages.insert(err.clone()),
                "duplicate error {err:?} for\n{text}"
            );
        }
        assert_eq!(messages.len(), n);
    }
}

#[test]
fn missing_equations_message() {
    let text = "controls:\n  - name: F\ndifferential_states:\n  - name: phi\n";
    assert_eq!(
        parse_model(text).unwrap_err().to_string(),
        "missing equations"
    );
}

#[test]
fn duplicate_and_unknown_keys() {
    let dup = PENDULUM_MODEL.replace("- name: F", "- name: phi");
    assert!(matches!(parse_model(&dup), Err(ModelError::Duplicate(n)) if n == "phi"));
    let extra = format!("{PENDULUM_MODEL}author: someone\n");
    let spec = parse_model(&extra).unwrap();
    assert_eq!(spec.warnings.len(), 1);
}

#[test]
fn typo_in_equation_detected() {
    let text = INLINE_SNIPPET.replace("L*cos(phi)*sin(phi)...", "L*cos(phi)*sin(ph)");
    let err = parse_model(&text).unwrap_err().to_string();
    assert!(err.contains("undeclared name ph"), "{err}");
}

#[test]
fn truncated_snippet_fails_at_bind_with_location() {
    let spec = parse_model(INLINE_SNIPPET).unwrap();
    match bind(&spec, "pendulum", &no_files) {
        Err(ModelError::Parse {
            equation, column, ..
        }) => {
            assert_eq!(equation, "ode for dphi");
            assert_eq!(column, 20);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn pendulum_rest_is_equilibrium() {
    let spec = parse_model(PENDULUM_MODEL).unwrap();
    let m = bind(&spec, "pendulum", &no_files).unwrap();
    assert_eq!((m.nx(), m.nu(), m.nz()), (2, 1, 0));
    assert_eq!(m.lookup("dphi"), Some((nmpc_forge::model_io::Part::X, 1)));
    let f = FunctionDef::new("rhs", vec![m.x.clone(), m.u.clone()], vec![m.rhs.clone()]).unwrap();
    assert_eq!(f.call(&[&[0.0, 0.0], &[0.0]]).unwrap(), vec![0.0, 0.0]);
    // Only model symbols survive; constants are folded.
    let free: Vec<String> = m
        .rhs
        .free_symbols()
        .iter()
        .map(|s| s.symbol_name().unwrap().to_string())
        .collect();
    assert_eq!(free, ["pendulum.x", "pendulum.u"]);
    let v = f.call(&[&[0.5, 0.1], &[1.0]]).unwrap();
    let expected = -(9.81f64 / 2.0) * 0.5f64.sin() - 0.1 * 0.1 + 1.0 / (1.0 * 4.0);
    assert!((v[1] - expected).abs() < 1e-15);
}

#[test]
fn external_equivalent_matches_inline_bitwise() {
    let spec = parse_model(PENDULUM_MODEL).unwrap();
    let m = bind(&spec, "pendulum", &no_files).unwrap();
    let f = FunctionDef::new("ode", vec![m.x.clone(), m.u.clone()], vec![m.rhs.clone()]).unwrap();
    let fns = expr::serialize(&f);
    let ext_text = "equations:
  external:
    type: serialized_function
    file_name: ode.fns
differential_states:
  - name: phi
  - name: dphi
controls:
  - name: F
";
    let ext_spec = parse_model(ext_text).unwrap();
    let resolve = |name: &str| {
        assert_eq!(name, "ode.fns");
        Ok(fns.clone())
    };
    let e = bind(&ext_spec, "pendulum", &resolve).unwrap();
    let g = FunctionDef::new("ode", vec![e.x.clone(), e.u.clone()], vec![e.rhs.clone()]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let u = [rng.random_range(-2.0..2.0)];
        let a = f.call(&[&x, &u]).unwrap();
        let b = g.call(&[&x, &u]).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn external_signature_checked() {
    let x = expr::sym("x", 3).unwrap();
    let u = expr::sym("u", 1).unwrap();
    let f = FunctionDef::new("ode", vec![x.clone(), u], vec![x]).unwrap();
    let fns = expr::serialize(&f);
    let spec =
        parse_model(&EXTERNAL_SNIPPET.replace("casadi_serialized", "serialized_function")).unwrap();
    let err = bind(&spec, "pendulum", &|_| Ok(fns.clone())).unwrap_err();
    assert!(matches!(err, ModelError::External { .. }), "{err}");
}

#[test]
fn emit_round_trip_binds_identically() {
    let spec = parse_model(PENDULUM_MODEL).unwrap();
    let again = parse_model(&emit(&spec)).unwrap();
    assert_eq!(spec, again);
    let a = bind(&spec, "p", &no_files).unwrap();
    let b = bind(&again, "p", &no_files).unwrap();
    let fa = FunctionDef::new("f", vec![a.x.clone(), a.u.clone()], vec![a.rhs.clone()]).unwrap();
    let fb = FunctionDef::new("f", vec![b.x.clone(), b.u.clone()], vec![b.rhs.clone()]).unwrap();
    for x in [[0.1, 0.2], [-1.0, 3.0]] {
        assert_eq!(
            fa.call(&[&x, &[0.7]]).unwrap(),
            fb.call(&[&x, &[0.7]]).unwrap()
        );
    }
}

#[test]
fn algebraic_states_bind() {
    let text = "equations:
  inline:
    ode:
      x1: z1 - x1
    alg:
      - z1 - 2*u1
differential_states:
  - name: x1
algebraic_states:
  - name: z1
controls:
  - name: u1
";
    let spec = parse_model(text).unwrap();
    let m = bind(&spec, "dae", &no_files).unwrap();
    assert_eq!(m.nz(), 1);
    assert_eq!(m.alg.len(), 1);
    let bad = text.replace("    alg:\n      - z1 - 2*u1\n", "");
    assert!(matches!(
        parse_model(&bad),
        Err(ModelError::AlgCount {
            expected: 1,
            found: 0
        })
    ));
}
