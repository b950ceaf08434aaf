#![no_main]

use consistency_probe::ingest::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = serde_json::from_slice::<DatasetManifest>(data) {
        let again = serde_json::to_vec(&m).unwrap();
        let back: DatasetManifest = serde_json::from_slice(&again).unwrap();
        assert_eq!(back, m);
        assert!(m.files().len() >= 3);
    }
});
