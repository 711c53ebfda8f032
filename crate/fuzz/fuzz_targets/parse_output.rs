#![no_main]

use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use qcode_core::gateway::parse_output;
use qcode_core::prompt::{legal_labels, LabelSet, Scenario};

fn labels() -> &'static LabelSet {
    static LABELS: OnceLock<LabelSet> = OnceLock::new();
    LABELS.get_or_init(|| legal_labels(Scenario::AllCode, &qcode_core::fixtures::attribution_codebook(), "fear").unwrap())
}

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok((code, _)) = parse_output(text, labels()) {
            assert!(labels().iter().any(|l| l.id == code));
        }
    }
});
