#![no_main]

use libfuzzer_sys::fuzz_target;
use sessionguard::embeddings::parse_embeddings;

// First byte picks the expected row count.
fuzz_target!(|data: &[u8]| {
    let Some((&rows, csv)) = data.split_first() else {
        return;
    };
    if let Ok(table) = parse_embeddings(csv, rows as usize, "fuzz") {
        assert_eq!(table.num_items(), rows as usize);
        assert!(table.verify_checksum());
    }
});
