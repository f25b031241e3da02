#![no_main]

use libfuzzer_sys::fuzz_target;
use sessionguard::datasets::parse_products;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_products(data, "fuzz") {
        std::hint::black_box(rows);
    }
});
