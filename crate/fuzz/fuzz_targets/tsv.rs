#![no_main]

use libfuzzer_sys::fuzz_target;
use slt_core::decoding::parse_hypotheses_tsv;
use slt_core::eval::parse_scores_tsv;
use slt_core::training::parse_train_log;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_scores_tsv(text, "fuzz");
        let _ = parse_hypotheses_tsv(text, "fuzz");
        let _ = parse_train_log(text, "fuzz");
    }
});
