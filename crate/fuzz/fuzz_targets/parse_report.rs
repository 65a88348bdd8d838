#![no_main]
use libfuzzer_sys::fuzz_target;

use insiderlab_cli::parse_report;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(report) = parse_report(text) {
            let _ = report.summary();
            let _ = report.results_csv();
            let _ = report.payload();
        }
    }
});
