#![no_main]

use cdprompt::metrics::validate_report_json;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = serde_json::from_slice::<serde_json::Value>(data) {
        let _ = validate_report_json(&v);
    }
});
