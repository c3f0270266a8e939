#![no_main]

use libfuzzer_sys::fuzz_target;
use slt_core::model::{parse_checkpoint, write_checkpoint_to};

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = parse_checkpoint(data) {
        // anything accepted must survive a byte-stable roundtrip
        let bytes = write_checkpoint_to(&ckpt).expect("re-serialize");
        let again = write_checkpoint_to(&parse_checkpoint(&bytes).expect("re-parse")).expect("re-serialize");
        assert_eq!(again, bytes);
    }
});
