#![no_main]

use libfuzzer_sys::fuzz_target;
use sessionguard::neuralnet::LstmCheckpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(ck) = LstmCheckpoint::from_json_str(text, "fuzz") {
        assert!(ck.to_params().expect("validated").is_finite());
    }
});
