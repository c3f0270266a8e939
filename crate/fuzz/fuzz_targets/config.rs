#![no_main]

use libfuzzer_sys::fuzz_target;
use slt_cli::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = ExperimentConfig::parse(text, "fuzz") {
            let _ = cfg.validate();
            if let Ok(snapshot) = cfg.to_toml() {
                let again = ExperimentConfig::parse(&snapshot, "snapshot").expect("snapshot parses");
                assert_eq!(again.to_toml().expect("re-serialize"), snapshot);
            }
        }
    }
});
