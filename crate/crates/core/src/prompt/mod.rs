//! Adaptation strategies over a frozen base model.
//!
//! Seven configurations are supported: the untouched base, full
//! fine-tuning, static shallow and deep prompts, and three controlled
//! prompts that encode a per-sample attribute (label or persona sentences)
//! into either input embeddings or per-layer key/value prefixes.

mod assemble;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::transformer::{split_prefix_rows, LmParams, ModelConfig, ModelInput, PrefixKV, PrefixVars};

pub use assemble::{assemble_input, assemble_pretrain, prompt_tokens, reserved_slots, AssembledInput, Template};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Strategy {
    Frozen,
    FineTune,
    StaticShallow,
    StaticDeep,
    ControlledShallow,
    ControlledDeepMlp,
    ControlledDeepTransformer,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Frozen,
        Strategy::FineTune,
        Strategy::StaticShallow,
        Strategy::StaticDeep,
        Strategy::ControlledShallow,
        Strategy::ControlledDeepMlp,
        Strategy::ControlledDeepTransformer,
    ];

    /// Command-line identifier.
    pub fn id(self) -> &'static str {
        match self {
            Strategy::Frozen => "frozen",
            Strategy::FineTune => "finetune",
            Strategy::StaticShallow => "soft",
            Strategy::StaticDeep => "prefix",
            Strategy::ControlledShallow => "cdp-embed",
            Strategy::ControlledDeepMlp => "cdp-mlp",
            Strategy::ControlledDeepTransformer => "cdp-xfmr",
        }
    }

    /// Controlled variants see the attribute only through the encoder.
    pub fn is_controlled(self) -> bool {
        matches!(
            self,
            Strategy::ControlledShallow | Strategy::ControlledDeepMlp | Strategy::ControlledDeepTransformer
        )
    }

    pub fn trains_base(self) -> bool {
        self == Strategy::FineTune
    }

    pub fn has_trainable_params(self) -> bool {
        self != Strategy::Frozen
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.id().to_string()
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Control attribute of one sample, as ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlAttribute {
    Label(usize),
    Sentences(Vec<Vec<usize>>),
}

/// Attribute ids for the two kinds of encoder input: rows of an owned
/// prompt table, and base-vocabulary tokens for encoders that share the
/// base embedding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedAttribute {
    pub prompt_ids: Vec<usize>,
    pub base_ids: Vec<usize>,
}

impl ControlAttribute {
    pub fn validate(&self, n_labels: usize) -> Result<()> {
        match self {
            ControlAttribute::Label(l) if *l >= n_labels => Err(Error::Index {
                what: "label",
                index: *l,
                size: n_labels,
            }),
            ControlAttribute::Sentences(s) if s.is_empty() => {
                Err(Error::data("attribute has no sentences"))
            }
            ControlAttribute::Sentences(s) if s.iter().any(Vec::is_empty) => {
                Err(Error::data("attribute contains an empty sentence"))
            }
            _ => Ok(()),
        }
    }

    /// Labels become a single token (`label_tokens[label]` in the base
    /// vocabulary); sentences are joined with `sep`.
    pub fn encode(&self, label_tokens: &[usize], sep: usize, budget: usize) -> Result<EncodedAttribute> {
        self.validate(label_tokens.len().max(1))?;
        let enc = match self {
            ControlAttribute::Label(l) => EncodedAttribute {
                prompt_ids: vec![*l],
                base_ids: vec![label_tokens[*l]],
            },
            ControlAttribute::Sentences(sents) => {
                let mut ids = Vec::new();
                for (i, s) in sents.iter().enumerate() {
                    if i > 0 {
                        ids.push(sep);
                    }
                    ids.extend_from_slice(s);
                }
                EncodedAttribute {
                    prompt_ids: ids.clone(),
                    base_ids: ids,
                }
            }
        };
        if enc.prompt_ids.len() > budget {
            return Err(Error::Length {
                len: enc.prompt_ids.len(),
                limit: budget,
            });
        }
        Ok(enc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MlpLayout {
    /// `d → hidden → prefix`, tanh after the hidden layer.
    OneHidden,
    /// `d → hidden → hidden → prefix`, tanh after both hidden layers.
    TwoHidden,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub strategy: Strategy,
    /// Rows of owned attribute tables: label count or base vocabulary size.
    pub prompt_vocab: usize,
    pub attribute_budget: usize,
    pub shallow_len: usize,
    pub deep_len: usize,
    pub mlp_hidden: usize,
    pub mlp_layout: MlpLayout,
    pub encoder_width: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub encoder_ff: usize,
    pub init_std: f64,
}

impl PromptConfig {
    /// Defaults scaled from a 1280-wide backbone (hidden 512, encoder 256)
    /// to the given base width.
    pub fn new(strategy: Strategy, base: &ModelConfig, prompt_vocab: usize) -> Self {
        let d = base.d_model;
        let heads = base.n_heads;
        let mlp_hidden = ((d as f64 * 512.0 / 1280.0).round() as usize).max(1);
        let raw = d as f64 / 5.0;
        let encoder_width = (((raw / heads as f64).round() as usize).max(1)) * heads;
        PromptConfig {
            strategy,
            prompt_vocab,
            attribute_budget: 32,
            shallow_len: 50,
            deep_len: 10,
            mlp_hidden,
            mlp_layout: MlpLayout::OneHidden,
            encoder_width,
            encoder_layers: 2,
            encoder_heads: heads,
            encoder_ff: 2 * encoder_width,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.strategy;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if s.is_controlled() && self.prompt_vocab == 0 {
            return bad("prompt_vocab must be positive");
        }
        if s == Strategy::StaticShallow && self.shallow_len == 0 {
            return bad("shallow_len must be positive");
        }
        if s == Strategy::StaticDeep && self.deep_len == 0 {
            return bad("deep_len must be positive");
        }
        if s == Strategy::ControlledDeepMlp && self.mlp_hidden == 0 {
            return bad("mlp_hidden must be positive");
        }
        if s == Strategy::ControlledDeepTransformer {
            if self.encoder_layers == 0 || self.encoder_heads == 0 || self.encoder_ff == 0 {
                return bad("encoder layers, heads and d_ff must be positive");
            }
            if self.encoder_width == 0 || self.encoder_width % self.encoder_heads != 0 {
                return bad("encoder_width must be a positive multiple of encoder_heads");
            }
        }
        if self.attribute_budget == 0 {
            return bad("attribute_budget must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncBlock {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_fc: ParamId,
    b_fc: ParamId,
    w_proj: ParamId,
    b_proj: ParamId,
}

#[derive(Clone, Debug)]
enum ModuleIds {
    None,
    Table(ParamId),
    StaticDeep(ParamId),
    Mlp {
        layers: Vec<(ParamId, ParamId)>,
    },
    Transformer {
        table: ParamId,
        pos: ParamId,
        blocks: Vec<EncBlock>,
        lnf_g: ParamId,
        lnf_b: ParamId,
        w_out: ParamId,
        b_out: ParamId,
    },
}

/// Trainable parameters of one strategy (empty for the base-only ones).
#[derive(Clone, Debug)]
pub struct PromptModule<T> {
    config: PromptConfig,
    store: ParamStore<T>,
    ids: ModuleIds,
}

/// Strategy contribution recorded on a tape.
#[derive(Clone, Debug, Default)]
pub struct Injection {
    /// Rows prepended to the input embeddings `[P×D]`.
    pub prepend: Option<Var>,
    pub prefix: Option<PrefixVars>,
}

impl Injection {
    pub fn prepend_len<T: Scalar>(&self, tape: &Tape<'_, T>) -> usize {
        self.prepend.map_or(0, |v| tape.shape(v)[0])
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix.as_ref().map_or(0, |p| p.len)
    }
}

/// Gradient-free strategy contribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Materialized<T> {
    pub prepend: Option<Tensor<T>>,
    pub prefix: Option<PrefixKV<T>>,
}

impl<T> Materialized<T> {
    pub fn prepend_len(&self) -> usize
    where
        T: Scalar,
    {
        self.prepend.as_ref().map_or(0, |t| t.shape()[0])
    }

    pub fn prefix_len(&self) -> usize
    where
        T: Scalar,
    {
        self.prefix.as_ref().map_or(0, PrefixKV::len)
    }
}

fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}

impl<T: Scalar> PromptModule<T> {
    pub fn init(config: PromptConfig, bc: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, width) = (bc.d_model, bc.prefix_width());
        let std = config.init_std;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids = match config.strategy {
            Strategy::Frozen | Strategy::FineTune => ModuleIds::None,
            Strategy::StaticShallow => ModuleIds::Table(store.add(
                "soft.embed",
                normal(&[config.shallow_len, d], std, &mut rng),
                false,
            )),
            Strategy::StaticDeep => ModuleIds::StaticDeep(store.add(
                "prefix.kv",
                normal(&[config.deep_len, width], std, &mut rng),
                false,
            )),
            Strategy::ControlledShallow => ModuleIds::Table(store.add(
                "cdp.embed",
                normal(&[config.prompt_vocab, d], std, &mut rng),
                false,
            )),
            Strategy::ControlledDeepMlp => {
                let h = config.mlp_hidden;
                let dims: Vec<(usize, usize)> = match config.mlp_layout {
                    MlpLayout::OneHidden => vec![(d, h), (h, width)],
                    MlpLayout::TwoHidden => vec![(d, h), (h, h), (h, width)],
                };
                let layers = dims
                    .iter()
                    .enumerate()
                    .map(|(i, &(a, b))| {
                        (
                            store.add(format!("mlp.{i}.w"), normal(&[a, b], std, &mut rng), true),
                            store.add(format!("mlp.{i}.b"), Tensor::zeros(&[b]), false),
                        )
                    })
                    .collect();
                ModuleIds::Mlp { layers }
            }
            Strategy::ControlledDeepTransformer => {
                let (w, f) = (config.encoder_width, config.encoder_ff);
                let one = || Tensor::full(&[w], T::one());
                let table = store.add("enc.wte", normal(&[config.prompt_vocab, w], std, &mut rng), false);
                let pos = store.add("enc.wpe", normal(&[config.attribute_budget, w], std, &mut rng), false);
                let resid = std / ((2 * config.encoder_layers) as f64).sqrt();
                let mut blocks = Vec::new();
                for l in 0..config.encoder_layers {
                    let p = format!("enc.h.{l}");
                    let mut add = |name: &str, t: Tensor<T>, decay: bool| store.add(format!("{p}.{name}"), t, decay);
                    blocks.push(EncBlock {
                        ln1_g: add("ln_1.g", one(), false),
                        ln1_b: add("ln_1.b", Tensor::zeros(&[w]), false),
                        wq: add("attn.q.w", normal(&[w, w], std, &mut rng), true),
                        bq: add("attn.q.b", Tensor::zeros(&[w]), false),
                        wk: add("attn.k.w", normal(&[w, w], std, &mut rng), true),
                        wv: add("attn.v.w", normal(&[w, w], std, &mut rng), true),
                        bv: add("attn.v.b", Tensor::zeros(&[w]), false),
                        wo: add("attn.o.w", normal(&[w, w], resid, &mut rng), true),
                        bo: add("attn.o.b", Tensor::zeros(&[w]), false),
                        ln2_g: add("ln_2.g", one(), false),
                        ln2_b: add("ln_2.b", Tensor::zeros(&[w]), false),
                        w_fc: add("mlp.fc.w", normal(&[w, f], std, &mut rng), true),
                        b_fc: add("mlp.fc.b", Tensor::zeros(&[f]), false),
                        w_proj: add("mlp.proj.w", normal(&[f, w], resid, &mut rng), true),
                        b_proj: add("mlp.proj.b", Tensor::zeros(&[w]), false),
                    });
                }
                ModuleIds::Transformer {
                    table,
                    pos,
                    blocks,
                    lnf_g: store.add("enc.ln_f.g", one(), false),
                    lnf_b: store.add("enc.ln_f.b", Tensor::zeros(&[w]), false),
                    w_out: store.add("enc.out.w", normal(&[w, width], std, &mut rng), true),
                    b_out: store.add("enc.out.b", Tensor::zeros(&[width]), false),
                }
            }
        };
        Ok(PromptModule { config, store, ids })
    }

    /// Rebuilds a module from stored tensors, checking names and shapes
    /// against a freshly initialized layout.
    pub fn from_store(config: PromptConfig, bc: &ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let template = Self::init(config, bc, 0)?;
        if template.store.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "prompt store holds {} tensors, expected {}",
                store.len(),
                template.store.len()
            )));
        }
        for e in template.store.entries() {
            let id = store.id(&e.name)?;
            if store.get(id).shape() != e.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "prompt parameter `{}` has shape {:?}, expected {:?}",
                    e.name,
                    store.get(id).shape(),
                    e.tensor.shape()
                )));
            }
        }
        // ids are positional and both stores share insertion order
        let mut reordered = ParamStore::new();
        for e in template.store.entries() {
            let t = store.by_name(&e.name).expect("checked").clone();
            reordered.add(e.name.clone(), t, e.decay);
        }
        Ok(PromptModule {
            config: template.config,
            store: reordered,
            ids: template.ids,
        })
    }

    pub fn config(&self) -> &PromptConfig {
        &self.config
    }

    pub fn strategy(&self) -> Strategy {
        self.config.strategy
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.num_params()
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>, requires_grad: bool) -> Bound {
        self.store.bind(tape, requires_grad)
    }

    fn need_attr<'a>(&self, attr: Option<&'a EncodedAttribute>) -> Result<&'a EncodedAttribute> {
        let a = attr.ok_or_else(|| Error::data(format!("strategy {} needs an attribute", self.strategy())))?;
        if a.prompt_ids.is_empty() {
            return Err(Error::data("empty attribute"));
        }
        if a.prompt_ids.len() > self.config.attribute_budget {
            return Err(Error::Length {
                len: a.prompt_ids.len(),
                limit: self.config.attribute_budget,
            });
        }
        Ok(a)
    }

    /// Records the strategy's contribution for one sample.
    pub fn inject(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        base: &LmParams<T>,
        base_bound: &Bound,
        attr: Option<&EncodedAttribute>,
    ) -> Result<Injection> {
        let bc = base.config();
        match &self.ids {
            ModuleIds::None => Ok(Injection::default()),
            ModuleIds::Table(id) => {
                let prepend = if self.strategy() == Strategy::StaticShallow {
                    bound.get(*id)
                } else {
                    let a = self.need_attr(attr)?;
                    tape.embedding(bound.get(*id), &a.prompt_ids)?
                };
                Ok(Injection {
                    prepend: Some(prepend),
                    prefix: None,
                })
            }
            ModuleIds::StaticDeep(id) => Ok(Injection {
                prepend: None,
                prefix: Some(split_prefix_rows(tape, bound.get(*id), bc)?),
            }),
            ModuleIds::Mlp { layers } => {
                let a = self.need_attr(attr)?;
                let mut x = base.embed_tokens(tape, base_bound, &a.base_ids)?;
                for (i, &(w, b)) in layers.iter().enumerate() {
                    x = tape.matmul(x, bound.get(w))?;
                    x = tape.add(x, bound.get(b))?;
                    if i + 1 < layers.len() {
                        x = tape.tanh(x);
                    }
                }
                Ok(Injection {
                    prepend: None,
                    prefix: Some(split_prefix_rows(tape, x, bc)?),
                })
            }
            ModuleIds::Transformer {
                table,
                pos,
                blocks,
                lnf_g,
                lnf_b,
                w_out,
                b_out,
            } => {
                let a = self.need_attr(attr)?;
                let g = |id: &ParamId| bound.get(*id);
                let positions: Vec<usize> = (0..a.prompt_ids.len()).collect();
                let tok = tape.embedding(g(table), &a.prompt_ids)?;
                let pe = tape.embedding(g(pos), &positions)?;
                let mut x = tape.add(tok, pe)?;
                let eps = T::from_f64_lossy(bc.layer_norm_eps);
                for b in blocks {
                    let h = tape.layer_norm(x, g(&b.ln1_g), g(&b.ln1_b), eps)?;
                    let q = tape.matmul(h, g(&b.wq))?;
                    let q = tape.add(q, g(&b.bq))?;
                    let k = tape.matmul(h, g(&b.wk))?;
                    let v = tape.matmul(h, g(&b.wv))?;
                    let v = tape.add(v, g(&b.bv))?;
                    let att = tape.attention(q, k, v, None, self.config.encoder_heads)?;
                    let o = tape.matmul(att, g(&b.wo))?;
                    let o = tape.add(o, g(&b.bo))?;
                    x = tape.add(x, o)?;
                    let h = tape.layer_norm(x, g(&b.ln2_g), g(&b.ln2_b), eps)?;
                    let u = tape.matmul(h, g(&b.w_fc))?;
                    let u = tape.add(u, g(&b.b_fc))?;
                    let u = tape.gelu(u);
                    let o = tape.matmul(u, g(&b.w_proj))?;
                    let o = tape.add(o, g(&b.b_proj))?;
                    x = tape.add(x, o)?;
                }
                let h = tape.layer_norm(x, g(lnf_g), g(lnf_b), eps)?;
                let rows = tape.matmul(h, g(w_out))?;
                let rows = tape.add(rows, g(b_out))?;
                Ok(Injection {
                    prepend: None,
                    prefix: Some(split_prefix_rows(tape, rows, bc)?),
                })
            }
        }
    }

    /// Evaluates the contribution without recording gradients.
    pub fn materialize(&self, base: &LmParams<T>, attr: Option<&EncodedAttribute>) -> Result<Materialized<T>> {
        let mut tape = Tape::new();
        let base_bound = base.store().bind(&mut tape, false);
        let bound = self.store.bind(&mut tape, false);
        let inj = self.inject(&mut tape, &bound, base, &base_bound, attr)?;
        Ok(Materialized {
            prepend: inj.prepend.map(|v| tape.value(v).clone()),
            prefix: inj.prefix.map(|p| p.materialize(&tape)),
        })
    }

    pub fn cast<U: Scalar>(&self) -> PromptModule<U> {
        PromptModule {
            config: self.config.clone(),
            store: self.store.cast(),
            ids: self.ids.clone(),
        }
    }
}

/// Builds the base-model input: prepended prompt rows (if any) followed by
/// the token embeddings, or plain tokens otherwise.
pub fn model_input<'a, T: Scalar>(
    tape: &mut Tape<'_, T>,
    base: &LmParams<T>,
    base_bound: &Bound,
    injection: &Injection,
    tokens: &'a [usize],
) -> Result<ModelInput<'a>> {
    match injection.prepend {
        None => Ok(ModelInput::Tokens(tokens)),
        Some(rows) => {
            let emb = base.embed_tokens(tape, base_bound, tokens)?;
            let lead = tape.shape(rows)[0];
            Ok(ModelInput::Embeds {
                x: tape.concat_rows(&[rows, emb])?,
                lead,
            })
        }
    }
}

/// Masked next-token loss of one assembled sample under a strategy.
pub fn sample_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    base: &LmParams<T>,
    base_bound: &Bound,
    module: &PromptModule<T>,
    bound: &Bound,
    sample: &AssembledInput,
) -> Result<Var> {
    let inj = module.inject(tape, bound, base, base_bound, sample.attribute.as_ref())?;
    let p = inj.prepend_len(tape);
    let input = model_input(tape, base, base_bound, &inj, &sample.inputs)?;
    let mut targets = vec![0; p];
    targets.extend_from_slice(&sample.targets);
    let mut mask = vec![false; p];
    mask.extend_from_slice(&sample.mask);
    base.loss_tape(tape, base_bound, input, inj.prefix.as_ref(), &targets, &mask)
}

/// Trainable parameters divided by base parameters.
pub fn param_ratio<T: Scalar>(module: &PromptModule<T>, base: &LmParams<T>) -> f64 {
    match module.strategy() {
        Strategy::Frozen => 0.0,
        Strategy::FineTune => 1.0,
        _ => module.param_count() as f64 / base.param_count() as f64,
    }
}
