#![no_main]
use libfuzzer_sys::fuzz_target;

use insiderlab::density_lab::{simulate_lab, DensityLabScenario};
use insiderlab::engine::TimeGrid;
use insiderlab::factorization::FactorizationScenario;
use insiderlab::honest_time::HonestTimeScenario;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = serde_json::from_slice::<HonestTimeScenario>(data) {
        let _ = s.validation_errors();
    }
    if let Ok(s) = serde_json::from_slice::<FactorizationScenario>(data) {
        let _ = s.validation_errors();
    }
    if let Ok(s) = serde_json::from_slice::<DensityLabScenario>(data) {
        if s.validate().is_ok() && s.horizon <= 16.0 {
            if let Ok(grid) = TimeGrid::new(s.horizon, 8) {
                let _ = simulate_lab(&s, &grid, 2, 0, false);
            }
        }
    }
});
