#![no_main]

use libfuzzer_sys::fuzz_target;
use sessionguard::experiments::MetricsReport;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(report) = MetricsReport::from_json_str(text, "fuzz") {
        std::hint::black_box((report.budget_summary(), report.detection_summary()));
    }
});
