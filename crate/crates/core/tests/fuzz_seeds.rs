//! Runs the checked-in fuzz corpus seeds through the fuzzed entry points
//! and checks the same properties the fuzz targets assert.

use std::path::PathBuf;

use cdprompt::config::RunConfig;
use cdprompt::data::{corpus_vocab, parse_sample_line, read_jsonl, tokenize, Vocab};
use cdprompt::metrics::validate_report_json;
use cdprompt::server::GenerateRequest;
use cdprompt::training::{decode_container, encode_container, Checkpoint};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn checkpoint_seeds_decode_and_reencode() {
    for (name, bytes) in seeds("checkpoint_decode") {
        let ck = Checkpoint::decode(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        let again = ck.encode().unwrap();
        assert_eq!(Checkpoint::decode(&again).unwrap().encode().unwrap(), again, "{name}");
    }
}

#[test]
fn container_seeds_roundtrip_exactly() {
    for (name, bytes) in seeds("container_decode") {
        let c = decode_container(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        let recs: Vec<(String, &_)> = c.records.iter().map(|(n, t)| (n.clone(), t)).collect();
        assert_eq!(encode_container(&recs, &c.trailer), bytes, "{name}");
    }
}

#[test]
fn sample_seeds_parse() {
    for (name, bytes) in seeds("sample_line") {
        let samples = read_jsonl(&bytes[..]).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(!samples.is_empty());
        let first = std::str::from_utf8(&bytes).unwrap().lines().next().unwrap();
        parse_sample_line(first).unwrap();
        corpus_vocab(&samples, 1).unwrap();
    }
}

#[test]
fn config_seeds_parse() {
    for (name, bytes) in seeds("config_parse") {
        let c = RunConfig::parse(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
        c.train.train_config(1e-4).validate().unwrap();
        c.decode.decode_config().validate().unwrap();
    }
}

#[test]
fn tokenize_seeds_are_stable() {
    for (name, bytes) in seeds("tokenize") {
        let text = std::str::from_utf8(&bytes).unwrap();
        let toks = tokenize(text);
        assert_eq!(tokenize(&toks.join(" ")), toks, "{name}");
        let v = Vocab::build([toks.clone()], 1).unwrap();
        assert_eq!(v.decode_tokens(&v.encode(text)), toks, "{name}");
    }
}

#[test]
fn request_and_report_seeds_parse() {
    for (name, bytes) in seeds("generate_request") {
        let r: GenerateRequest = serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        r.strategy.parse::<cdprompt::prompt::Strategy>().unwrap();
    }
    for (name, bytes) in seeds("report_json") {
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        validate_report_json(&v).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
