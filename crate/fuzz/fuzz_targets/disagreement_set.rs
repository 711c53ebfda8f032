#![no_main]

use libfuzzer_sys::fuzz_target;
use qcode_core::triage::{triage_summary, DisagreementSet};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(set) = DisagreementSet::from_json(text) {
            let _ = triage_summary(&set.records);
        }
    }
});
