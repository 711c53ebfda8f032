#![no_main]

use libfuzzer_sys::fuzz_target;
use qcode_core::Corpus;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(c) = Corpus::from_json(text) {
            let _ = c.eligible().count();
        }
    }
});
