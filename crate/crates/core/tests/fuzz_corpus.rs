//! Replays the fuzz corpus through the same bodies the fuzz targets run.

#[allow(dead_code)]
#[path = "../../../fuzz/src/lib.rs"]
mod targets;

use std::fs;
use std::path::Path;

fn replay(target: &str, body: fn(&[u8])) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let data = fs::read(&path).unwrap();
        body(&data);
        // Truncations reach the error paths of every seed.
        for cut in [0, 1, data.len() / 2, data.len().saturating_sub(1)] {
            body(&data[..cut]);
        }
        n += 1;
    }
    assert!(n > 0, "no seeds in {}", dir.display());
}

#[test]
fn fns_deserialize() {
    replay("fns_deserialize", targets::fns_deserialize);
}

#[test]
fn model_yaml() {
    replay("model_yaml", targets::model_yaml);
}

#[test]
fn expr_text() {
    replay("expr_text", targets::expr_text);
}

#[test]
fn bundle_load() {
    replay("bundle_load", targets::bundle_load);
}

#[test]
fn state_blob_load() {
    replay("state_blob_load", targets::state_blob_load);
}

#[test]
fn problem_file() {
    replay("problem_file", targets::problem_file);
}

#[test]
fn scenario_file() {
    replay("scenario_file", targets::scenario_file);
}

#[test]
fn seeds_are_accepted() {
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let read = |p: &str| fs::read(corpus.join(p)).unwrap();
    assert!(nmpc_forge::runtime::Bundle::from_bytes(&read("bundle_load/small.impb")).is_ok());
    assert!(nmpc_forge::runtime::StateBlob::decode(&read("state_blob_load/solved.imps")).is_ok());
    let fns = String::from_utf8(read("fns_deserialize/pendulum_g.fns")).unwrap();
    assert!(nmpc_forge::expr::deserialize(&fns).is_ok());
}
