#![no_main]
use libfuzzer_sys::fuzz_target;

use insiderlab::engine::ProcessTrack;
use insiderlab::strategies::{run_strategy, MarketData, StrategySpec};

fuzz_target!(|data: &[u8]| {
    let Ok(spec) = serde_json::from_slice::<StrategySpec>(data) else {
        return;
    };
    if spec.validate().is_err() {
        return;
    }
    let x = ProcessTrack::from_rows("X", &[vec![1.0, 1.2, 0.9, 1.1, 1.3]]).unwrap();
    let _ = run_strategy(&spec, &MarketData::new(&x));
});
