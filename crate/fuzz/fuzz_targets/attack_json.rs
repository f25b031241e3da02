#![no_main]

use libfuzzer_sys::fuzz_target;
use sessionguard::attacks::MaliciousSessionSet;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(set) = MaliciousSessionSet::from_json_str(text) {
        let back = MaliciousSessionSet::from_json_str(&set.to_json()).expect("round trip");
        assert_eq!(back, set);
    }
});
