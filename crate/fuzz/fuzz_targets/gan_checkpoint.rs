#![no_main]

use libfuzzer_sys::fuzz_target;
use sessionguard::detectors::GanCheckpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(det) = GanCheckpoint::from_json_str(text, "fuzz") {
        assert!(det.discriminator.is_finite() && det.generator.is_finite());
    }
});
