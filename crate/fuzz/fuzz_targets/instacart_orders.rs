#![no_main]

use libfuzzer_sys::fuzz_target;
use sessionguard::datasets::parse_orders;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_orders(data, "fuzz") {
        std::hint::black_box(rows);
    }
});
