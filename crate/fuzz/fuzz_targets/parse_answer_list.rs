#![no_main]

use std::collections::HashSet;

use consistency_probe::domain::normalize_answer;
use consistency_probe::ingest::parse_answer_list;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(list) = parse_answer_list(data) {
        assert!(!list.is_empty());
        let mut seen = HashSet::new();
        for a in &list {
            assert!(!a.is_empty());
            assert_eq!(&normalize_answer(a), a);
            assert!(seen.insert(a.clone()), "duplicate {a:?}");
        }
    }
});
