#![no_main]

use consistency_probe::cache::{cache_key, canonicalize_body};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|s: &str| {
    match canonicalize_body(s) {
        Ok(canonical) => {
            assert_eq!(canonicalize_body(&canonical).unwrap(), canonical);
            let k = cache_key("vqa", "/v1/answer", &canonical).unwrap();
            assert_eq!(k.as_str().len(), 64);
            assert_eq!(cache_key("vqa", "/v1/answer", s).is_ok(), s == canonical);
        }
        Err(_) => assert!(cache_key("vqa", "/v1/answer", s).is_err()),
    }
});
