#![no_main]

use libfuzzer_sys::fuzz_target;
use qcode_core::corpus::StratumSelector;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = StratumSelector::parse(text);
    }
});
