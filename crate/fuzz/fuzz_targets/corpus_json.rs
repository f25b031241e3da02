#![no_main]

use libfuzzer_sys::fuzz_target;
use sessionguard::datasets::Corpus;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(corpus) = Corpus::from_json_str(text) {
        let back = Corpus::from_json_str(&corpus.to_json()).expect("round trip");
        assert_eq!(back, corpus);
    }
});
