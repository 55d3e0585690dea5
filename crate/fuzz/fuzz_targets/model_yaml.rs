#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| nmpc_forge_fuzz::model_yaml(data));
