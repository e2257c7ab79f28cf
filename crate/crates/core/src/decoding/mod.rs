//! Top-k sampling and autoregressive generation.
//!
//! The sampler draws from `ChaCha8Rng` seeded with `seed`: candidates are
//! the `k` largest logits ordered by (logit descending, id ascending);
//! probabilities are `exp((l − l_max)/T)` normalized over the candidates
//! and one uniform `f64` in `[0, 1)` selects the first candidate whose
//! cumulative mass exceeds it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DialogueSample, EOS};
use crate::error::{Error, Result};
use crate::prompt::{prompt_tokens, reserved_slots, EncodedAttribute, Materialized, PromptModule, Template};
use crate::tensor::{Scalar, Tensor};
use crate::transformer::{KvCache, LmParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub stop_token: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            k: 10,
            temperature: 0.9,
            max_new_tokens: 40,
            seed: 42,
            stop_token: EOS,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Draws one token id from the top-k tempered distribution of `logits`.
pub fn top_k_sample<T: Scalar, R: Rng>(logits: &[T], cfg: &DecodeConfig, rng: &mut R) -> Result<usize> {
    cfg.validate()?;
    if cfg.k > logits.len() {
        return Err(Error::Config(format!("k = {} exceeds vocabulary size {}", cfg.k, logits.len())));
    }
    let vals: Vec<f64> = logits.iter().map(|x| x.to_f64_lossy()).collect();
    if vals.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("NaN logit during sampling".into()));
    }
    let mut ids: Vec<usize> = (0..vals.len()).collect();
    let order = |&a: &usize, &b: &usize| vals[b].total_cmp(&vals[a]).then(a.cmp(&b));
    if cfg.k < ids.len() {
        ids.select_nth_unstable_by(cfg.k - 1, order);
        ids.truncate(cfg.k);
    }
    ids.sort_by(order);
    let top = vals[ids[0]];
    let weights: Vec<f64> = ids
        .iter()
        .map(|&i| {
            let z = (vals[i] - top) / cfg.temperature;
            if z.is_nan() { 1.0 } else { z.exp() }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (&id, w) in ids.iter().zip(&weights) {
        acc += w;
        if u < acc {
            return Ok(id);
        }
    }
    Ok(*ids.last().expect("k ≥ 1"))
}

/// Where the strategy's contribution enters the base model.
fn embeds_for<T: Scalar>(base: &LmParams<T>, prepend: &Tensor<T>, tokens: &[usize]) -> Result<Tensor<T>> {
    let table = base.embedding_table();
    let d = base.config().d_model;
    let mut data = prepend.data().to_vec();
    for &t in tokens {
        if t >= table.rows() {
            return Err(Error::Index {
                what: "token id",
                index: t,
                size: table.rows(),
            });
        }
        data.extend_from_slice(table.row(t));
    }
    Tensor::new(vec![prepend.shape()[0] + tokens.len(), d], data)
}

/// Samples a continuation of `context` until the stop token or
/// `max_new_tokens`. The stop token is not included in the output. With
/// `use_cache` the prompt is encoded once and later steps feed a single
/// token against cached keys/values; otherwise every step re-runs the whole
/// sequence. Both paths consume the same random stream.
pub fn generate<T: Scalar>(
    base: &LmParams<T>,
    injected: &Materialized<T>,
    context: &[usize],
    cfg: &DecodeConfig,
    use_cache: bool,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    if cfg.k > base.config().vocab_size {
        return Err(Error::Config(format!(
            "k = {} exceeds vocabulary size {}",
            cfg.k,
            base.config().vocab_size
        )));
    }
    if context.is_empty() {
        return Err(Error::data("generation context is empty"));
    }
    let reserved = injected.prepend_len() + injected.prefix_len();
    let need = context.len() + reserved + cfg.max_new_tokens;
    if need > base.config().max_seq_len {
        return Err(Error::Length {
            len: need,
            limit: base.config().max_seq_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prefix = injected.prefix.as_ref();
    let mut seq = context.to_vec();
    let mut out = Vec::new();
    let mut cache: Option<KvCache<T>> = None;
    for _ in 0..cfg.max_new_tokens {
        let fwd = match (&cache, use_cache) {
            (Some(c), true) => base.forward_with_cache(&seq[seq.len() - 1..], None, prefix, Some(c), None)?,
            _ => match &injected.prepend {
                Some(p) => {
                    let e = embeds_for(base, p, &seq)?;
                    base.forward(&[], Some((&e, p.shape()[0])), prefix, None)?
                }
                None => base.forward(&seq, None, prefix, None)?,
            },
        };
        let v = base.config().vocab_size;
        let rows = fwd.logits.rows();
        let last = &fwd.logits.data()[(rows - 1) * v..rows * v];
        let next = top_k_sample(last, cfg, &mut rng)?;
        if use_cache {
            cache = Some(fwd.present);
        }
        if next == cfg.stop_token {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

/// Strategy-routed generation for a preprocessed sample: builds the
/// generation prompt and attribute, materializes the prompt module and
/// decodes with the KV cache.
pub fn generate_for_sample<T: Scalar>(
    base: &LmParams<T>,
    module: &PromptModule<T>,
    template: &Template,
    sample: &DialogueSample,
    cfg: &DecodeConfig,
) -> Result<Vec<usize>> {
    let (ctx, attr) = prompt_tokens(module.config(), template, sample)?;
    generate_from_prompt(base, module, &ctx, attr.as_ref(), cfg)
}

pub fn generate_from_prompt<T: Scalar>(
    base: &LmParams<T>,
    module: &PromptModule<T>,
    context: &[usize],
    attr: Option<&EncodedAttribute>,
    cfg: &DecodeConfig,
) -> Result<Vec<usize>> {
    let reserved = reserved_slots(module.config(), attr);
    let limit = base.config().max_seq_len;
    if context.len() + reserved + cfg.max_new_tokens > limit {
        return Err(Error::Length {
            len: context.len() + reserved + cfg.max_new_tokens,
            limit,
        });
    }
    let m = module.materialize(base, attr)?;
    generate(base, &m, context, cfg, true)
}
