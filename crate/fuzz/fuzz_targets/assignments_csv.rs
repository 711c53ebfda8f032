#![no_main]

use libfuzzer_sys::fuzz_target;
use qcode_core::corpus::{read_assignments_csv, write_assignments_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_assignments_csv(data) {
        let mut out = Vec::new();
        write_assignments_csv(&mut out, &rows).unwrap();
        let back = read_assignments_csv(out.as_slice()).unwrap();
        assert_eq!(back.len(), rows.len());
    }
});
