#![no_main]

use libfuzzer_sys::fuzz_target;
use qcode_core::prompt::ExampleOrdering;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(o) = text.parse::<ExampleOrdering>() {
            assert_eq!(o.to_string().parse::<ExampleOrdering>().unwrap(), o);
        }
    }
});
