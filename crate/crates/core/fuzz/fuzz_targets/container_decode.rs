#![no_main]

use cdprompt::training::{decode_container, encode_container};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = decode_container(data) {
        let records: Vec<(String, &_)> = c.records.iter().map(|(n, t)| (n.clone(), t)).collect();
        assert_eq!(encode_container(&records, &c.trailer), data);
    }
});
