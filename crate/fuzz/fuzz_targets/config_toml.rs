#![no_main]

use amc_kfac::experiment::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::from_toml_str(text) {
        let _ = cfg.validate();
        let text = cfg.to_toml_string();
        let again = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(again.to_toml_string(), text);
    }
});
