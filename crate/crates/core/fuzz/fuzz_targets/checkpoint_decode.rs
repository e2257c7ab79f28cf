#![no_main]

use cdprompt::training::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        // anything accepted must re-encode and decode to the same bytes
        let bytes = ck.encode().expect("decoded checkpoint encodes");
        let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode().unwrap(), bytes);
    }
});
