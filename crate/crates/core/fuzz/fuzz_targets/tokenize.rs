#![no_main]

use cdprompt::data::{tokenize, Vocab};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let toks = tokenize(text);
    assert_eq!(tokenize(&toks.join(" ")), toks);
    if let Ok(v) = Vocab::build([toks.clone()], 1) {
        let ids = v.encode(text);
        assert!(ids.iter().all(|&i| i < v.len()));
        assert_eq!(v.decode_tokens(&ids), toks);
    }
});
