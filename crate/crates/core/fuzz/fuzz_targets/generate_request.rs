#![no_main]

use cdprompt::server::GenerateRequest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(req) = serde_json::from_slice::<GenerateRequest>(data) {
        let _ = req.strategy.parse::<cdprompt::prompt::Strategy>();
    }
});
