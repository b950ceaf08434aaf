#![no_main]

use consistency_probe::cache::parse_log;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(replay) = parse_log(data, "fuzz") {
        assert!(replay.valid_len <= data.len());
        assert!(replay.valid_len == 0 || data[replay.valid_len - 1] == b'\n');
        // Replaying the kept prefix gives the same entries.
        let again = parse_log(&data[..replay.valid_len], "fuzz").unwrap();
        assert_eq!(again, replay);
    }
});
