#![no_main]

use cdprompt::data::{corpus_vocab, parse_sample_line, preprocess, read_jsonl, TaskKind};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_sample_line(text);
    if let Ok(samples) = read_jsonl(data) {
        if let Ok(vocab) = corpus_vocab(&samples, 1) {
            for task in [TaskKind::Label, TaskKind::Persona] {
                let _ = preprocess(task, &samples, &vocab);
            }
        }
    }
});
