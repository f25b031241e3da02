#![no_main]

use libfuzzer_sys::fuzz_target;
use sessionguard::datasets::parse_order_products;

fuzz_target!(|data: &[u8]| {
    let mut rows = 0usize;
    let _ = parse_order_products(data, "fuzz", |_, _| {
        rows += 1;
        Ok(())
    });
    std::hint::black_box(rows);
});
