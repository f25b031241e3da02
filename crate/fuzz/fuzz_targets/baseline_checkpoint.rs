#![no_main]

use libfuzzer_sys::fuzz_target;
use sessionguard::detectors::BaselineCheckpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(det) = BaselineCheckpoint::from_json_str(text, "fuzz") {
        assert!(det.nll_threshold.is_finite());
    }
});
