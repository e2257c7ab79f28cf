#![no_main]

use cdprompt::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(c) = RunConfig::parse(text) {
            let _ = c.train.train_config(1e-4).validate();
            let _ = c.decode.decode_config().validate();
        }
    }
});
