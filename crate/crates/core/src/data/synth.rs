//! Synthetic controlled-dialogue corpora.
//!
//! Label task: every utterance carries one of four acts, each with its own
//! opening markers and closing punctuation, so an exact rule classifier
//! recovers the act. The response act is drawn independently of the
//! context. Persona task: the last context turn asks for one persona slot
//! and the response restates its value.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{RawAttribute, RawSample};
use super::vocab::tokenize;
use crate::error::{Error, Result};

pub const LABEL_NAMES: [&str; 4] = ["inform", "question", "directive", "commissive"];

pub const ACT_MARKERS: [[&str; 5]; 4] = [
    ["well", "actually", "honestly", "basically", "apparently"],
    ["what", "where", "when", "why", "how"],
    ["please", "kindly", "remember", "try", "go"],
    ["sure", "okay", "alright", "certainly", "definitely"],
];

/// Closing tokens per act; every act has a distinct closer.
pub const ACT_ENDINGS: [&[&str]; 4] = [&["."], &["?"], &["!"], &["promise", "."]];

pub const PERSONA_SLOTS: [&str; 8] = ["color", "pet", "city", "food", "sport", "job", "hobby", "drink"];

const FUNCTION_WORDS: [&str; 8] = ["my", "is", "your", "the", "i", "like", "and", "you"];

const N_TOPICS: usize = 16;
const VALUES_PER_SLOT: usize = 12;
const LONG_FRACTION: f64 = 0.03;
/// Share of context turns that mention their own act's name as a content
/// word, so the base learns what the label words mean.
const NAME_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Label,
    Persona,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Label => "label",
            TaskKind::Persona => "persona",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label" => Ok(TaskKind::Label),
            "persona" => Ok(TaskKind::Persona),
            other => Err(Error::Config(format!("unknown task `{other}` (expected label or persona)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task: TaskKind,
    pub n_labels: usize,
    pub grammar_seed: u64,
    /// Approximate vocabulary size of the generated corpus.
    pub vocab_size: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

impl SyntheticTaskSpec {
    pub fn new(task: TaskKind, n_train: usize, n_valid: usize, n_test: usize) -> Self {
        SyntheticTaskSpec {
            task,
            n_labels: LABEL_NAMES.len(),
            grammar_seed: 7,
            vocab_size: 2000,
            n_train,
            n_valid,
            n_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<RawSample>,
    pub valid: Vec<RawSample>,
    pub test: Vec<RawSample>,
}

/// Fixed words of both grammars, for reserving vocabulary entries.
pub fn fixed_words() -> Vec<&'static str> {
    let mut w: Vec<&str> = ACT_MARKERS.iter().flatten().copied().collect();
    w.extend(ACT_ENDINGS.iter().flat_map(|e| e.iter().copied()));
    w.extend(PERSONA_SLOTS);
    w.extend(FUNCTION_WORDS);
    w.extend(LABEL_NAMES);
    w
}

/// Nonce lexicon: content words grouped into topics plus persona values.
#[derive(Clone, Debug)]
struct Lexicon {
    topics: Vec<Vec<String>>,
    values: Vec<Vec<String>>,
}

impl Lexicon {
    fn new(seed: u64, n_words: usize) -> Self {
        const C: &[u8] = b"bdfgklmnprstvz";
        const V: &[u8] = b"aeiou";
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reserved: HashSet<&str> = fixed_words().into_iter().collect();
        let mut seen = HashSet::new();
        let n_values = PERSONA_SLOTS.len() * VALUES_PER_SLOT;
        let total = n_words.max(N_TOPICS * 4) + n_values;
        let mut words = Vec::with_capacity(total);
        while words.len() < total {
            let n_syl = rng.random_range(2..=3);
            let w: String = (0..n_syl)
                .flat_map(|_| [*C.choose(&mut rng).unwrap() as char, *V.choose(&mut rng).unwrap() as char])
                .collect();
            if !reserved.contains(w.as_str()) && seen.insert(w.clone()) {
                words.push(w);
            }
        }
        let values: Vec<Vec<String>> = words[..n_values]
            .chunks(VALUES_PER_SLOT)
            .map(|c| c.to_vec())
            .collect();
        let content = &words[n_values..];
        let per = content.len() / N_TOPICS;
        let topics = (0..N_TOPICS)
            .map(|t| content[t * per..(t + 1) * per].to_vec())
            .collect();
        Lexicon { topics, values }
    }
}

fn content_words(rng: &mut ChaCha8Rng, topic: &[String], n: usize) -> Vec<String> {
    (0..n).map(|_| topic.choose(rng).unwrap().clone()).collect()
}

fn act_utterance(rng: &mut ChaCha8Rng, act: usize, topic: &[String], n_content: usize) -> String {
    let mut w = vec![ACT_MARKERS[act].choose(rng).unwrap().to_string()];
    w.extend(content_words(rng, topic, n_content));
    w.extend(ACT_ENDINGS[act].iter().map(|t| t.to_string()));
    w.join(" ")
}

fn label_sample(rng: &mut ChaCha8Rng, lex: &Lexicon, id: String) -> RawSample {
    let topic = &lex.topics[rng.random_range(0..lex.topics.len())];
    let turns = rng.random_range(1..=6);
    let long_turn = rng.random_bool(LONG_FRACTION).then(|| rng.random_range(0..turns));
    let mut context = Vec::with_capacity(turns);
    let mut acts = Vec::with_capacity(turns);
    for t in 0..turns {
        let act = rng.random_range(0..4);
        let n = if long_turn == Some(t) { rng.random_range(26..=30) } else { rng.random_range(2..=5) };
        let mut turn = act_utterance(rng, act, topic, n);
        if rng.random_bool(NAME_FRACTION) {
            let mut words: Vec<&str> = turn.split(' ').collect();
            let slot = rng.random_range(1..=n);
            words[slot] = LABEL_NAMES[act];
            turn = words.join(" ");
        }
        context.push(turn);
        acts.push(act);
    }
    let label = rng.random_range(0..4);
    let n = rng.random_range(3..=6);
    RawSample {
        id,
        context,
        context_acts: Some(acts),
        attribute: RawAttribute::Label(label),
        knowledge: None,
        response: act_utterance(rng, label, topic, n),
        references: None,
        used_persona: None,
    }
}

fn persona_sample(rng: &mut ChaCha8Rng, lex: &Lexicon, id: String) -> RawSample {
    let topic = &lex.topics[rng.random_range(0..lex.topics.len())];
    let n_facts = rng.random_range(1..=3);
    let mut slots: Vec<usize> = (0..PERSONA_SLOTS.len()).collect();
    slots.shuffle(rng);
    slots.truncate(n_facts);
    let facts: Vec<(usize, String)> = slots
        .iter()
        .map(|&s| (s, lex.values[s].choose(rng).unwrap().clone()))
        .collect();
    let persona: Vec<String> = facts
        .iter()
        .map(|(s, v)| format!("my {} is {v} .", PERSONA_SLOTS[*s]))
        .collect();
    let asked = rng.random_range(0..n_facts);
    let n = rng.random_range(4..=7);
    let kn = content_words(rng, topic, n);
    let knowledge = format!("the {} is {} .", kn[0], kn[1..].join(" "));
    let turns = rng.random_range(1..=5);
    let mut context: Vec<String> = (0..turns - 1)
        .map(|_| {
            let n = rng.random_range(2..=4);
            let w = content_words(rng, topic, n);
            if rng.random_bool(0.5) {
                format!("i like {} .", w.join(" "))
            } else {
                format!("the {} is {} .", w[0], w[1..].join(" "))
            }
        })
        .collect();
    context.push(format!("what is your {} ?", PERSONA_SLOTS[facts[asked].0]));
    let used: Vec<bool> = (0..n_facts).map(|i| i == asked).collect();
    RawSample {
        id,
        context,
        context_acts: None,
        attribute: RawAttribute::Persona(persona.clone()),
        knowledge: Some(knowledge),
        response: persona[asked].clone(),
        references: None,
        used_persona: Some(used),
    }
}

/// Generates train/valid/test splits. Deterministic in `(spec, seed)`.
pub fn synth_generate(spec: &SyntheticTaskSpec, seed: u64) -> Result<Splits> {
    if spec.task == TaskKind::Label && spec.n_labels != LABEL_NAMES.len() {
        return Err(Error::Config(format!(
            "the label task has exactly {} labels, got {}",
            LABEL_NAMES.len(),
            spec.n_labels
        )));
    }
    let fixed = fixed_words().len() + 5 + 4;
    let lex = Lexicon::new(spec.grammar_seed, spec.vocab_size.saturating_sub(fixed));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |name: &str, n: usize| -> Vec<RawSample> {
        (0..n)
            .map(|i| {
                let id = format!("{name}-{i}");
                match spec.task {
                    TaskKind::Label => label_sample(&mut rng, &lex, id),
                    TaskKind::Persona => persona_sample(&mut rng, &lex, id),
                }
            })
            .collect()
    };
    Ok(Splits {
        train: make("train", spec.n_train),
        valid: make("valid", spec.n_valid),
        test: make("test", spec.n_test),
    })
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// Act of a response: looked up from its first word; responses without a
/// marker fall back to a fixed hash of their text so the classifier never
/// abstains.
pub fn oracle_label<S: AsRef<str>>(tokens: &[S]) -> usize {
    if let Some(first) = tokens.first() {
        let w = first.as_ref().to_lowercase();
        if let Some(act) = ACT_MARKERS.iter().position(|m| m.contains(&w.as_str())) {
            return act;
        }
    }
    let joined: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    (fnv1a(&joined.join(" ")) % LABEL_NAMES.len() as u64) as usize
}

pub fn oracle_label_text(text: &str) -> usize {
    oracle_label(&tokenize(text))
}

pub fn label_id(name: &str) -> Option<usize> {
    LABEL_NAMES.iter().position(|&n| n == name)
}
