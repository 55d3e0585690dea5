//! Target bodies shared by the fuzz binaries and the corpus replay test.
//! Every function must return normally on arbitrary input.

use std::collections::HashMap;

use nmpc_forge::expr::text::{parse_expr, parse_relation, Scope};
use nmpc_forge::expr::{deserialize, serialize, sym, Expr, FunctionDef};
use nmpc_forge::model_io::{bind, emit, parse_model, ModelError};
use nmpc_forge::offsetfree::Scenario;
use nmpc_forge::problem::{parse_problem, PresetSource};
use nmpc_forge::runtime::{Bundle, StateBlob};

fn text(data: &[u8]) -> Option<&str> {
    std::str::from_utf8(data).ok()
}

pub fn fns_deserialize(data: &[u8]) {
    let Some(s) = text(data) else { return };
    if let Ok(f) = deserialize(s) {
        let once = serialize(&f);
        let again = deserialize(&once).expect("serialized output parses");
        assert_eq!(serialize(&again), once);
    }
}

pub fn model_yaml(data: &[u8]) {
    let Some(s) = text(data) else { return };
    if let Ok(spec) = parse_model(s) {
        let canon = emit(&spec);
        let back = parse_model(&canon).expect("emitted model parses");
        assert_eq!(emit(&back), canon);
        let _ = bind(&spec, "m", &|f| Err(ModelError::Missing(f.to_string())));
    }
}

struct Names(HashMap<&'static str, Expr>);

impl Scope for Names {
    fn lookup(&self, name: &str) -> Option<Expr> {
        self.0.get(name).cloned()
    }
}

pub fn expr_text(data: &[u8]) {
    let Some(s) = text(data) else { return };
    let x = sym("x", 2).unwrap();
    let y = sym("y", 1).unwrap();
    let scope = Names(HashMap::from([("x", x.clone()), ("y", y.clone())]));
    if let Ok(e) = parse_expr(s, &scope) {
        if let Ok(f) = FunctionDef::new("f", vec![x, y], vec![e]) {
            let _ = f.call(&[&[0.5, -1.5], &[2.0]]);
        }
    }
    let _ = parse_relation(s, &scope);
}

pub fn bundle_load(data: &[u8]) {
    if let Ok(b) = Bundle::from_bytes(data) {
        // Only canonical encodings are accepted.
        assert_eq!(b.to_bytes(), data);
    }
}

pub fn state_blob_load(data: &[u8]) {
    if let Ok(s) = StateBlob::decode(data) {
        let enc = s.encode();
        assert_eq!(StateBlob::decode(&enc).expect("re-encoded blob decodes"), s);
    }
}

pub fn problem_file(data: &[u8]) {
    let Some(s) = text(data) else { return };
    let _ = parse_problem(s, "fuzz", &PresetSource);
}

pub fn scenario_file(data: &[u8]) {
    let Some(s) = text(data) else { return };
    if let Ok(sc) = Scenario::parse(s) {
        let _ = sc.reference(sc.duration);
        let _ = sc.disturbance(0.0);
    }
}
