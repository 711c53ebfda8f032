#![no_main]

use libfuzzer_sys::fuzz_target;
use qcode_core::corpus::{ingest_messages, IngestConfig};

fuzz_target!(|data: &[u8]| {
    let tags = qcode_core::fixtures::attribution_set();
    if let Ok(report) = ingest_messages(data, &tags, &IngestConfig::default()) {
        for m in &report.corpus.messages {
            assert!(tags.contains(&m.elicited_by));
        }
    }
});
