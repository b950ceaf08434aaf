#![no_main]

use consistency_probe::backends::wire::decode_generate_response;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&n, body)) = data.split_first() else {
        return;
    };
    let n = usize::from(n % 16);
    if let Ok(questions) = decode_generate_response(body, n) {
        assert_eq!(questions.len(), n);
        assert!(questions.iter().all(|q| !q.trim().is_empty()));
    }
});
