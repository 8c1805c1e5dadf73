#![no_main]

use libfuzzer_sys::fuzz_target;
use mgmem::trainer::TrainConfig;

// Optional first line of `;`-separated dotted-path overrides, then config JSON.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (head, body) = match text.split_once('\n') {
        Some((head, body)) if !head.trim_start().starts_with('{') => (head, body),
        _ => ("", text),
    };
    let overrides: Vec<String> = head.split(';').filter(|s| !s.is_empty()).map(str::to_string).collect();
    if let Ok(cfg) = TrainConfig::from_json_with_env(body, &overrides, None) {
        let again = TrainConfig::from_json_with_env(&cfg.to_json(), &[], None).expect("round trip");
        assert_eq!(again.to_json(), cfg.to_json());
    }
});
