#![no_main]

use consistency_probe::metrics::TemperatureGrid;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|s: &str| {
    if let Ok(grid) = s.parse::<TemperatureGrid>() {
        let values = grid.values().unwrap();
        assert!(!values.is_empty());
        assert!(values.windows(2).all(|w| w[0] <= w[1]));
    }
});
