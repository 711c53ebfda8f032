#![no_main]

use libfuzzer_sys::fuzz_target;
use qcode_core::gateway::MockSpec;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = MockSpec::from_json(text) {
            let again = serde_json::to_string(&spec).unwrap();
            assert_eq!(MockSpec::from_json(&again).unwrap(), spec);
        }
    }
});
