#![no_main]

use std::path::Path;

use falconfuse_core::data::parse_manifest_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = parse_manifest_csv(text, Path::new("/data"));
});
