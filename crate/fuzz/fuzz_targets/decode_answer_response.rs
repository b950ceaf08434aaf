#![no_main]

use consistency_probe::backends::wire::{decode_answer_response, prediction_from_scores};
use libfuzzer_sys::fuzz_target;

// First byte picks the expected candidate count; the rest is the body.
fuzz_target!(|data: &[u8]| {
    let Some((&n, body)) = data.split_first() else {
        return;
    };
    let n = usize::from(n % 64);
    if let Ok(scores) = decode_answer_response(body, n) {
        assert_eq!(scores.len(), n);
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
        let candidates: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        if let Ok(p) = prediction_from_scores(&candidates, scores.clone()) {
            assert!(scores.iter().all(|&s| s <= p.confidence));
        }
    }
});
