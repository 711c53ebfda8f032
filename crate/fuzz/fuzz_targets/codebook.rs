#![no_main]

use libfuzzer_sys::fuzz_target;
use qcode_core::codebook::validate_codebook;
use qcode_core::Codebook;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cb) = Codebook::from_json(text) {
            let _ = validate_codebook(&cb);
        }
    }
});
