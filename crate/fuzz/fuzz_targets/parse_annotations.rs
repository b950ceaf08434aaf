#![no_main]

use consistency_probe::ingest::{parse_annotations, IngestError};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    match parse_annotations(data) {
        Ok(map) => assert!(map.values().all(|answers| !answers.is_empty())),
        Err(IngestError::Parse { offset, .. }) => assert!(offset <= data.len()),
        Err(_) => {}
    }
});
