#![no_main]

use libfuzzer_sys::fuzz_target;
use sessionguard::datasets::ingest_instacart_from_readers;

// Three files separated by NUL bytes: orders, order products, products.
fuzz_target!(|data: &[u8]| {
    let mut parts = data.splitn(3, |&b| b == 0);
    let (Some(orders), Some(lines), Some(products)) = (parts.next(), parts.next(), parts.next()) else {
        return;
    };
    if let Ok(corpus) = ingest_instacart_from_readers(orders, lines, products, 50) {
        corpus.validate().expect("ingested corpus is valid");
    }
});
