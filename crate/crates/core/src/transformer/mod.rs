//! Decoder-only transformer whose attention accepts per-layer key/value
//! prefixes.
//!
//! Blocks are pre-norm (LN → attention → residual → LN → FFN → residual),
//! the FFN uses GELU, and the output projection is tied to the token
//! embedding. Prefix slots carry no positional embedding and do not shift
//! the positions of sequence tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Desk-scale backbone: 4 layers, width 128, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size,
            max_seq_len: 256,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of one position's full prefix: K and V for every layer.
    pub fn prefix_width(&self) -> usize {
        self.n_layers * 2 * self.d_model
    }
}

#[derive(Clone, Copy, Debug)]
struct BlockIds {
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
struct LmIds {
    wte: ParamId,
    wpe: ParamId,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

/// Weights of the base language model.
#[derive(Clone, Debug)]
pub struct LmParams<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    ids: LmIds,
    frozen: bool,
}

/// Per-layer key/value prefix, each tensor `[n_heads × P × d_head]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixKV<T> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

/// A prefix recorded on a tape.
#[derive(Clone, Debug)]
pub struct PrefixVars {
    pub layers: Vec<(Var, Var)>,
    pub len: usize,
}

/// Cached keys/values of already-processed sequence positions, `[L×D]`
/// per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<T> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
    /// Leading cached rows that carry no position (prepended prompt rows).
    pub lead: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn seq_len(&self) -> usize {
        self.layers.first().map_or(0, |(k, _)| k.shape()[0])
    }
}

#[derive(Clone, Copy, Debug)]
pub enum ModelInput<'a> {
    Tokens(&'a [usize]),
    /// Replaces the token-embedding lookup. The first `lead` rows are
    /// prompt rows: they get no positional embedding, and the rows after
    /// them are numbered from position 0.
    Embeds { x: Var, lead: usize },
}

/// Result of a recorded forward pass, before the output projection.
#[derive(Clone, Debug)]
pub struct Hidden {
    /// Final layer-normed hidden states `[T×D]`.
    pub states: Var,
    /// Per-layer `(keys, values)` over all sequence positions seen so far.
    pub present: Vec<(Var, Var)>,
    /// Attention nodes, one per layer.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub loss: Option<T>,
    pub present: KvCache<T>,
}

impl<T: Scalar> PrefixKV<T> {
    pub fn zeros(config: &ModelConfig, len: usize) -> Self {
        let shape = [config.n_heads, len, config.d_head()];
        PrefixKV {
            layers: (0..config.n_layers)
                .map(|_| (Tensor::zeros(&shape), Tensor::zeros(&shape)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |(k, _)| k.shape()[1])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.n_layers {
            return Err(Error::shape(format!(
                "prefix has {} layers, model has {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        let want = [config.n_heads, self.len(), config.d_head()];
        for (l, (k, v)) in self.layers.iter().enumerate() {
            if k.shape() != want || v.shape() != want {
                return Err(Error::shape(format!(
                    "layer {l} prefix key {:?} / value {:?}, expected {:?}",
                    k.shape(),
                    v.shape(),
                    want
                )));
            }
        }
        Ok(())
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>) -> PrefixVars {
        PrefixVars {
            layers: self
                .layers
                .iter()
                .map(|(k, v)| (tape.param(k, false), tape.param(v, false)))
                .collect(),
            len: self.len(),
        }
    }
}

impl PrefixVars {
    pub fn materialize<T: Scalar>(&self, tape: &Tape<'_, T>) -> PrefixKV<T> {
        PrefixKV {
            layers: self
                .layers
                .iter()
                .map(|&(k, v)| (tape.value(k).clone(), tape.value(v).clone()))
                .collect(),
        }
    }
}

/// Splits per-position prefix rows `[P × n_layers·2·D]` into per-layer
/// `[H×P×dh]` keys and values. Row layout: for each layer, `D` key columns
/// then `D` value columns, heads contiguous within each.
pub fn split_prefix_rows<T: Scalar>(
    tape: &mut Tape<'_, T>,
    rows: Var,
    config: &ModelConfig,
) -> Result<PrefixVars> {
    let shape = tape.shape(rows).to_vec();
    let width = config.prefix_width();
    if shape.len() != 2 || shape[1] != width {
        return Err(Error::shape(format!(
            "prefix rows {:?}, expected [P × {width}]",
            shape
        )));
    }
    let p = shape[0];
    let (h, dh, d) = (config.n_heads, config.d_head(), config.d_model);
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let mut pair = [None, None];
        for (kind, slot) in pair.iter_mut().enumerate() {
            let base = l * 2 * d + kind * d;
            let mut idx = Vec::with_capacity(h * p * dh);
            for head in 0..h {
                for pos in 0..p {
                    for j in 0..dh {
                        idx.push(pos * width + base + head * dh + j);
                    }
                }
            }
            *slot = Some(tape.select(rows, idx, &[h, p, dh])?);
        }
        layers.push((pair[0].unwrap(), pair[1].unwrap()));
    }
    Ok(PrefixVars { layers, len: p })
}

fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}

fn block_names(l: usize) -> [String; 15] {
    let p = format!("h.{l}");
    [
        format!("{p}.ln_1.g"),
        format!("{p}.ln_1.b"),
        format!("{p}.attn.q.w"),
        format!("{p}.attn.q.b"),
        format!("{p}.attn.k.w"),
        format!("{p}.attn.v.w"),
        format!("{p}.attn.v.b"),
        format!("{p}.attn.o.w"),
        format!("{p}.attn.o.b"),
        format!("{p}.ln_2.g"),
        format!("{p}.ln_2.b"),
        format!("{p}.mlp.fc.w"),
        format!("{p}.mlp.fc.b"),
        format!("{p}.mlp.proj.w"),
        format!("{p}.mlp.proj.b"),
    ]
}

impl<T: Scalar> LmParams<T> {
    /// GPT-2 style initialization: N(0, std) weights, residual projections
    /// scaled by `1/√(2·n_layers)`, unit gains and zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, 0.02)
    }

    pub fn init_with_std(config: &ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f) = (config.d_model, config.d_ff);
        let resid_std = std / ((2 * config.n_layers) as f64).sqrt();
        let mut store = ParamStore::new();
        store.add("wte", normal_tensor(&[config.vocab_size, d], std, &mut rng), false);
        store.add("wpe", normal_tensor(&[config.max_seq_len, d], std, &mut rng), false);
        for l in 0..config.n_layers {
            let n = block_names(l);
            store.add(&n[0], Tensor::full(&[d], T::one()), false);
            store.add(&n[1], Tensor::zeros(&[d]), false);
            store.add(&n[2], normal_tensor(&[d, d], std, &mut rng), true);
            store.add(&n[3], Tensor::zeros(&[d]), false);
            store.add(&n[4], normal_tensor(&[d, d], std, &mut rng), true);
            store.add(&n[5], normal_tensor(&[d, d], std, &mut rng), true);
            store.add(&n[6], Tensor::zeros(&[d]), false);
            store.add(&n[7], normal_tensor(&[d, d], resid_std, &mut rng), true);
            store.add(&n[8], Tensor::zeros(&[d]), false);
            store.add(&n[9], Tensor::full(&[d], T::one()), false);
            store.add(&n[10], Tensor::zeros(&[d]), false);
            store.add(&n[11], normal_tensor(&[d, f], std, &mut rng), true);
            store.add(&n[12], Tensor::zeros(&[f]), false);
            store.add(&n[13], normal_tensor(&[f, d], resid_std, &mut rng), true);
            store.add(&n[14], Tensor::zeros(&[d]), false);
        }
        store.add("ln_f.g", Tensor::full(&[d], T::one()), false);
        store.add("ln_f.b", Tensor::zeros(&[d]), false);
        Self::from_store(config.clone(), store)
    }

    /// Rebuilds a model from named tensors, validating every shape.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let check = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store.id(name)?;
            if store.get(id).shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    store.get(id).shape(),
                    shape
                )));
            }
            Ok(id)
        };
        let wte = check("wte", &[v, d])?;
        let wpe = check("wpe", &[config.max_seq_len, d])?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let n = block_names(l);
            blocks.push(BlockIds {
                ln1_g: check(&n[0], &[d])?,
                ln1_b: check(&n[1], &[d])?,
                wq: check(&n[2], &[d, d])?,
                bq: check(&n[3], &[d])?,
                wk: check(&n[4], &[d, d])?,
                wv: check(&n[5], &[d, d])?,
                bv: check(&n[6], &[d])?,
                wo: check(&n[7], &[d, d])?,
                bo: check(&n[8], &[d])?,
                ln2_g: check(&n[9], &[d])?,
                ln2_b: check(&n[10], &[d])?,
                w_fc: check(&n[11], &[d, f])?,
                b_fc: check(&n[12], &[f])?,
                w_proj: check(&n[13], &[f, d])?,
                b_proj: check(&n[14], &[d])?,
            });
        }
        let lnf_g = check("ln_f.g", &[d])?;
        let lnf_b = check("ln_f.b", &[d])?;
        let expected = 4 + config.n_layers * 15;
        if store.len() != expected {
            return Err(Error::Checkpoint(format!(
                "model store holds {} tensors, expected {expected}",
                store.len()
            )));
        }
        Ok(LmParams {
            config,
            store,
            ids: LmIds {
                wte,
                wpe,
                blocks,
                lnf_g,
                lnf_b,
            },
            frozen: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Exact scalar parameter count; the tied output projection is the
    /// token embedding and is counted once.
    pub fn param_count(&self) -> usize {
        self.store.num_params()
    }

    /// Marks every base weight as not requiring gradients. Idempotent.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn cast<U: Scalar>(&self) -> LmParams<U> {
        LmParams {
            config: self.config.clone(),
            store: self.store.cast(),
            ids: self.ids.clone(),
            frozen: self.frozen,
        }
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>) -> Bound {
        self.store.bind(tape, !self.frozen)
    }

    pub fn embedding_table(&self) -> &Tensor<T> {
        self.store.get(self.ids.wte)
    }

    /// Token-embedding leaf for `ids` using already-bound weights.
    pub fn embed_tokens(&self, tape: &mut Tape<'_, T>, bound: &Bound, ids: &[usize]) -> Result<Var> {
        tape.embedding(bound.get(self.ids.wte), ids)
    }

    fn linear(tape: &mut Tape<'_, T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        match b {
            Some(b) => tape.add(y, b),
            None => Ok(y),
        }
    }

    /// Records the forward pass up to the final layer norm.
    pub fn forward_hidden(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        input: ModelInput<'_>,
        prefix: Option<&PrefixVars>,
        past: Option<&KvCache<T>>,
    ) -> Result<Hidden> {
        let cfg = &self.config;
        let past_len = past.map_or(0, KvCache::seq_len);
        let p = prefix.map_or(0, |x| x.len);
        if let Some(pre) = prefix {
            if pre.layers.len() != cfg.n_layers {
                return Err(Error::shape(format!(
                    "prefix with {} layers for a {}-layer model",
                    pre.layers.len(),
                    cfg.n_layers
                )));
            }
        }
        if let Some(c) = past {
            if c.layers.len() != cfg.n_layers {
                return Err(Error::shape("kv cache layer count mismatch"));
            }
        }
        let tok = match input {
            ModelInput::Tokens(ids) => tape.embedding(bound.get(self.ids.wte), ids)?,
            ModelInput::Embeds { x, lead } => {
                let s = tape.shape(x);
                if s.len() != 2 || s[1] != cfg.d_model || lead > s[0] {
                    return Err(Error::shape(format!(
                        "input embeddings {:?} with {lead} prompt rows, expected [T × {}]",
                        s, cfg.d_model
                    )));
                }
                x
            }
        };
        let lead = match input {
            ModelInput::Embeds { lead, .. } => lead,
            ModelInput::Tokens(_) => 0,
        };
        let past_lead = past.map_or(0, |c| c.lead);
        let t = tape.shape(tok)[0];
        let total = past_len + t + p;
        if total > cfg.max_seq_len {
            return Err(Error::Length {
                len: total,
                limit: cfg.max_seq_len,
            });
        }
        if t == 0 {
            return Err(Error::shape("forward over an empty sequence"));
        }
        if lead > 0 && past_len > 0 {
            return Err(Error::shape("prompt rows after cached positions"));
        }
        let start = past_len - past_lead;
        let positions: Vec<usize> = (start..start + t - lead).collect();
        let mut x = if positions.is_empty() {
            tok
        } else {
            let mut pos = tape.embedding(bound.get(self.ids.wpe), &positions)?;
            if lead > 0 {
                let zeros = tape.constant(Tensor::zeros(&[lead, cfg.d_model]));
                pos = tape.concat_rows(&[zeros, pos])?;
            }
            tape.add(tok, pos)?
        };
        let eps = T::from_f64_lossy(cfg.layer_norm_eps);
        let mut present = Vec::with_capacity(cfg.n_layers);
        let mut attention = Vec::with_capacity(cfg.n_layers);
        for (l, b) in self.ids.blocks.iter().enumerate() {
            let g = |id: ParamId| bound.get(id);
            let h = tape.layer_norm(x, g(b.ln1_g), g(b.ln1_b), eps)?;
            let q = Self::linear(tape, h, g(b.wq), Some(g(b.bq)))?;
            let mut k = Self::linear(tape, h, g(b.wk), None)?;
            let mut v = Self::linear(tape, h, g(b.wv), Some(g(b.bv)))?;
            if let Some(c) = past {
                let (pk, pv) = &c.layers[l];
                let pk = tape.constant(pk.clone());
                let pv = tape.constant(pv.clone());
                k = tape.concat_rows(&[pk, k])?;
                v = tape.concat_rows(&[pv, v])?;
            }
            let pre = prefix.map(|x| x.layers[l]);
            let a = tape.attention(q, k, v, pre, cfg.n_heads)?;
            attention.push(a);
            present.push((k, v));
            let o = Self::linear(tape, a, g(b.wo), Some(g(b.bo)))?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, g(b.ln2_g), g(b.ln2_b), eps)?;
            let u = Self::linear(tape, h, g(b.w_fc), Some(g(b.b_fc)))?;
            let u = tape.gelu(u);
            let o = Self::linear(tape, u, g(b.w_proj), Some(g(b.b_proj)))?;
            x = tape.add(x, o)?;
        }
        let states = tape.layer_norm(x, bound.get(self.ids.lnf_g), bound.get(self.ids.lnf_b), eps)?;
        Ok(Hidden {
            states,
            present,
            attention,
        })
    }

    /// Tied output projection of hidden rows.
    pub fn project(&self, tape: &mut Tape<'_, T>, bound: &Bound, states: Var) -> Result<Var> {
        tape.matmul_nt(states, bound.get(self.ids.wte))
    }

    /// Masked next-token loss. Only masked rows are projected to the
    /// vocabulary, which equals `cross_entropy_masked` over full logits.
    pub fn loss_tape(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        input: ModelInput<'_>,
        prefix: Option<&PrefixVars>,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let hidden = self.forward_hidden(tape, bound, input, prefix, None)?;
        let t = tape.shape(hidden.states)[0];
        if targets.len() != t || mask.len() != t {
            return Err(Error::shape(format!(
                "{t} positions with {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let rows: Vec<usize> = (0..t).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let picked = tape.embedding(hidden.states, &rows)?;
        let logits = self.project(tape, bound, picked)?;
        let sel_targets: Vec<usize> = rows.iter().map(|&i| targets[i]).collect();
        let all = vec![true; rows.len()];
        tape.cross_entropy_masked(logits, &sel_targets, &all)
    }

    /// Gradient-free forward returning logits for every position.
    pub fn forward(
        &self,
        tokens: &[usize],
        input_embeds: Option<(&Tensor<T>, usize)>,
        prefix: Option<&PrefixKV<T>>,
        targets: Option<(&[usize], &[bool])>,
    ) -> Result<ForwardOutput<T>> {
        self.forward_with_cache(tokens, input_embeds, prefix, None, targets)
    }

    /// Gradient-free forward that continues from cached keys/values.
    pub fn forward_with_cache(
        &self,
        tokens: &[usize],
        input_embeds: Option<(&Tensor<T>, usize)>,
        prefix: Option<&PrefixKV<T>>,
        past: Option<&KvCache<T>>,
        targets: Option<(&[usize], &[bool])>,
    ) -> Result<ForwardOutput<T>> {
        if let Some(p) = prefix {
            p.validate(&self.config)?;
        }
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let input = match input_embeds {
            Some((e, lead)) => ModelInput::Embeds {
                x: tape.constant(e.clone()),
                lead,
            },
            None => ModelInput::Tokens(tokens),
        };
        let pre = prefix.map(|p| p.bind(&mut tape));
        let hidden = self.forward_hidden(&mut tape, &bound, input, pre.as_ref(), past)?;
        let logits = self.project(&mut tape, &bound, hidden.states)?;
        let loss = match targets {
            Some((y, m)) => {
                let l = tape.cross_entropy_masked(logits, y, m)?;
                Some(tape.value(l).data()[0])
            }
            None => None,
        };
        Ok(ForwardOutput {
            logits: tape.value(logits).clone(),
            loss,
            present: KvCache {
                layers: hidden
                    .present
                    .iter()
                    .map(|&(k, v)| (tape.value(k).clone(), tape.value(v).clone()))
                    .collect(),
                lead: past.map_or(0, |c| c.lead) + input_embeds.map_or(0, |(_, l)| l),
            },
        })
    }
}

#[cfg(test)]
mod tests;
