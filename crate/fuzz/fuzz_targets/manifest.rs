#![no_main]

use libfuzzer_sys::fuzz_target;
use slt_core::data::{parse_manifest, Tokenizer};

fuzz_target!(|data: &[u8]| {
    let _ = parse_manifest(data, "fuzz", Tokenizer::Whitespace);
    let _ = parse_manifest(data, "fuzz", Tokenizer::Char);
});
