#![no_main]

use consistency_probe::domain::{parse_records_jsonl, records_to_jsonl};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|s: &str| {
    if let Ok(records) = parse_records_jsonl(s) {
        let text = records_to_jsonl(&records).expect("validated records serialize");
        assert_eq!(parse_records_jsonl(&text).unwrap(), records);
    }
});
