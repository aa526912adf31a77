#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| reflectsql::fuzzing::loop_contracts(data));
