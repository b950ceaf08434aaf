#![no_main]

use consistency_probe::ingest::{parse_id_list, IngestError};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Err(IngestError::Parse { offset, .. }) = parse_id_list(data) {
        assert!(offset <= data.len());
    }
});
