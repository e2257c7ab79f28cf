use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{bleu, dist_n, entropy_n, meteor, nist, rouge_l, Sentence};
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};

/// Reference-based and diversity metrics of one generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextMetrics {
    #[serde(rename = "B2")]
    pub b2: f64,
    #[serde(rename = "B4")]
    pub b4: f64,
    #[serde(rename = "N2")]
    pub n2: f64,
    #[serde(rename = "N4")]
    pub n4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub meteor: f64,
    #[serde(rename = "D1")]
    pub d1: f64,
    #[serde(rename = "D2")]
    pub d2: f64,
    #[serde(rename = "E4")]
    pub e4: f64,
}

impl TextMetrics {
    pub fn compute(hyps: &[Sentence], refs: &[Vec<Sentence>]) -> Result<Self> {
        Ok(TextMetrics {
            b2: bleu(hyps, refs, 2)?,
            b4: bleu(hyps, refs, 4)?,
            n2: nist(hyps, refs, 2)?,
            n4: nist(hyps, refs, 4)?,
            rouge_l: rouge_l(hyps, refs)?,
            meteor: meteor(hyps, refs)?,
            d1: dist_n(hyps, 1),
            d2: dist_n(hyps, 2),
            e4: entropy_n(hyps, 4),
        })
    }
}

/// Evaluation report of one strategy on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub task: String,
    /// Tunable parameters as a percentage of the base model.
    pub phi_pct: f64,
    /// Oracle label accuracy (label task only).
    pub controllability: Option<f64>,
    #[serde(flatten)]
    pub text: TextMetrics,
    /// Mean best cosine to used persona sentences (persona task only).
    pub persona_similarity: Option<f64>,
    pub val_loss: Option<f64>,
    pub n_samples: usize,
    /// Samples skipped for length or missing persona usage.
    pub skipped: usize,
    pub decode: DecodeConfig,
}

/// Keys every report carries.
pub const REPORT_KEYS: [&str; 11] = [
    "phi_pct",
    "controllability",
    "B2",
    "B4",
    "N2",
    "N4",
    "rougeL",
    "meteor",
    "D1",
    "D2",
    "E4",
];

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        validate_report_json(&serde_json::to_value(self)?)
    }
}

/// Checks a report document: required keys present with numeric values,
/// fractions in `[0, 1]`, `phi_pct` in `[0, 100]`, NIST and entropy
/// non-negative.
pub fn validate_report_json(v: &Value) -> Result<()> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::data("report is not a JSON object"))?;
    let num = |k: &str, nullable: bool| -> Result<Option<f64>> {
        match obj.get(k) {
            None => Err(Error::data(format!("report lacks `{k}`"))),
            Some(Value::Null) if nullable => Ok(None),
            Some(x) => x
                .as_f64()
                .filter(|f| f.is_finite())
                .map(Some)
                .ok_or_else(|| Error::data(format!("report field `{k}` is not a finite number"))),
        }
    };
    let in_range = |k: &str, x: Option<f64>, hi: f64| -> Result<()> {
        match x {
            Some(f) if !(0.0..=hi).contains(&f) => Err(Error::data(format!("report field `{k}` = {f} out of range"))),
            _ => Ok(()),
        }
    };
    in_range("phi_pct", num("phi_pct", false)?, 100.0)?;
    in_range("controllability", num("controllability", true)?, 1.0)?;
    for k in ["B2", "B4", "rougeL", "meteor", "D1", "D2"] {
        in_range(k, num(k, false)?, 1.0)?;
    }
    for k in ["N2", "N4", "E4"] {
        in_range(k, num(k, false)?, f64::INFINITY)?;
    }
    if let Some(p) = obj.get("persona_similarity").and_then(Value::as_f64) {
        if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&p) {
            return Err(Error::data("persona_similarity outside [-1, 1]"));
        }
    }
    match obj.get("n_samples").and_then(Value::as_u64) {
        Some(n) if n > 0 => {}
        _ => return Err(Error::data("report field `n_samples` must be a positive integer")),
    }
    for k in ["strategy", "task"] {
        if !obj.get(k).is_some_and(Value::is_string) {
            return Err(Error::data(format!("report field `{k}` must be a string")));
        }
    }
    Ok(())
}
