#![no_main]

use falconfuse_core::data::preprocess_bytes;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = preprocess_bytes(data, 16) {
        assert_eq!(t.shape(), &[3, 16, 16]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
});
