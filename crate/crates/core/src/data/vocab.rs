use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

/// Characters kept inside a word even though they are punctuation.
fn word_internal(c: char) -> bool {
    c == '\'' || c == '-' || c == '_'
}

/// Splits on whitespace, then separates ASCII punctuation into single
/// tokens. Reserved markers such as `<sep>` survive as one token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if RESERVED.contains(&chunk) {
            out.push(chunk.to_string());
            continue;
        }
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_ascii_punctuation() && !word_internal(c) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            } else {
                word.push(c);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

fn attaches_left(tok: &str) -> bool {
    matches!(tok, "." | "," | "!" | "?" | ";" | ":" | ")" | "]" | "}" | "%")
}

fn attaches_right(tok: &str) -> bool {
    matches!(tok, "(" | "[" | "{" | "$")
}

/// Joins tokens with single spaces, attaching closing punctuation to the
/// previous token and opening brackets to the next.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        if i > 0 && !glue_next && !attaches_left(t) {
            out.push(' ');
        }
        out.push_str(t);
        glue_next = attaches_right(t);
    }
    out
}

/// Whether a token counts as a word (not pure punctuation).
pub fn is_word(tok: &str) -> bool {
    tok.chars().any(|c| !c.is_ascii_punctuation() || word_internal(c))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Builds from tokenized documents; tokens seen fewer than `min_freq`
    /// times are left out. Ids follow descending frequency, ties broken
    /// lexicographically.
    pub fn build<I, D, S>(corpus: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for doc in corpus {
            for tok in doc {
                any = true;
                let tok = tok.as_ref();
                if RESERVED.contains(&tok) {
                    continue;
                }
                *counts.entry(tok.to_string()).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::data("cannot build a vocabulary from an empty corpus"));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Vocab::from(tokens))
    }

    /// Checks reserved ids and uniqueness after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() < RESERVED.len()
            || self.tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b)
        {
            return Err(Error::data("vocabulary does not start with the reserved tokens"));
        }
        if self.index.len() != self.tokens.len() {
            return Err(Error::data("vocabulary contains duplicate tokens"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id_or_unk(t)).collect()
    }

    /// Text for `ids`, dropping padding and sequence markers.
    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect();
        detokenize(&toks)
    }

    /// Token strings for `ids`, dropping padding and sequence markers.
    pub fn decode_tokens(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }
}
