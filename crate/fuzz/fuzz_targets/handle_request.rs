#![no_main]

use std::sync::OnceLock;

use consistency_probe::backends::wire::{ANSWER_PATH, GENERATE_PATH};
use consistency_probe::simbench::{handle_request, make_world, Regime, SimWorld};
use libfuzzer_sys::fuzz_target;

fn world() -> &'static SimWorld {
    static WORLD: OnceLock<SimWorld> = OnceLock::new();
    WORLD.get_or_init(|| make_world(0, 50, Regime::InDistribution).unwrap())
}

// Exercises both request decoders through the simulated server: any body
// must produce a well-formed JSON response, never a panic.
fuzz_target!(|data: &[u8]| {
    let Some((&sel, body)) = data.split_first() else {
        return;
    };
    let path = if sel & 1 == 0 { ANSWER_PATH } else { GENERATE_PATH };
    let resp = handle_request(world(), path, body);
    let v: serde_json::Value = serde_json::from_str(&resp.body).expect("response is JSON");
    match resp.status {
        200 => assert!(v.get("scores").is_some() || v.get("questions").is_some()),
        400 => assert!(v["error"].is_string()),
        other => panic!("unexpected status {other}"),
    }
});
