#![no_main]

use consistency_probe::domain::normalize_answer;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|s: &str| {
    let once = normalize_answer(s);
    assert_eq!(normalize_answer(&once), once);
    assert_eq!(once.trim(), once);
    assert!(!once.contains("  "));
});
