#![no_main]

use attn_disagree::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

// First line is an override, the rest a config document.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    if let Ok(mut cfg) = ExperimentConfig::from_toml(rest) {
        let _ = cfg.validate();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).expect("serialized config parses");
        assert_eq!(back, cfg);
        let _ = cfg.set(first);
    }
});
