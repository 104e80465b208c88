#![no_main]

use fusedet_cli::config::parse_key_values;
use fusedet_cli::{Overrides, PipelineConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(pairs) = parse_key_values(text) {
        for (k, v) in &pairs {
            assert!(!k.is_empty());
            assert!(!k.contains('#') && !v.contains('#'));
        }
    }
    let ov = Overrides {
        seed: Some(1),
        ..Default::default()
    };
    let _ = PipelineConfig::from_text(text, &ov);
});
