#![no_main]

use consistency_probe::ingest::{parse_questions, IngestError};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Err(IngestError::Parse { offset, .. }) = parse_questions(data) {
        assert!(offset <= data.len());
    }
});
