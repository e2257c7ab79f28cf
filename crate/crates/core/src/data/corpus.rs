use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attribute as stored in corpus files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum RawAttribute {
    Label(usize),
    Persona(Vec<String>),
}

/// One line of a JSONL corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSample {
    pub id: String,
    pub context: Vec<String>,
    /// Per-utterance act labels of the context (label task only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_acts: Option<Vec<usize>>,
    pub attribute: RawAttribute,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge: Option<String>,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub used_persona: Option<Vec<bool>>,
}

pub fn parse_sample_line(line: &str) -> Result<RawSample> {
    Ok(serde_json::from_str(line)?)
}

/// Reads a JSONL corpus; blank lines are skipped, errors carry the line.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<RawSample>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s = parse_sample_line(&line).map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut writer: W, samples: &[RawSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut writer, s)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl_file(path: &std::path::Path) -> Result<Vec<RawSample>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    read_jsonl(std::io::BufReader::new(f))
}

pub fn write_jsonl_file(path: &std::path::Path, samples: &[RawSample]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_jsonl(&mut w, samples)?;
    w.flush()?;
    Ok(())
}
