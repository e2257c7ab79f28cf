use super::{ControlAttribute, EncodedAttribute, PromptConfig, Strategy};
use crate::data::{label_tokens, DialogueSample, TaskKind, Vocab, BOS, EOS, SEP};
use crate::error::{Error, Result};
use crate::transformer::ModelConfig;

/// Template marker ids resolved against a vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub task: TaskKind,
    conversation: usize,
    colon: usize,
    act: usize,
    knowledge: usize,
    persona: usize,
    pub label_tokens: Vec<usize>,
}

impl Template {
    pub fn new(vocab: &Vocab, task: TaskKind) -> Result<Self> {
        let need = |w: &str| {
            vocab
                .id(w)
                .ok_or_else(|| Error::Data(format!("vocabulary lacks template marker `{w}`")))
        };
        Ok(Template {
            task,
            conversation: need("Conversation")?,
            colon: need(":")?,
            act: need("Act")?,
            knowledge: need("Knowledge")?,
            persona: need("Persona")?,
            label_tokens: label_tokens(vocab),
        })
    }

    /// `BOS`, optional attribute segment (label: `Act : name`, persona:
    /// `Knowledge : k Persona : p…`), then `Conversation : u₁ <sep> …`.
    pub fn context(&self, sample: &DialogueSample, include_attribute: bool) -> Result<Vec<usize>> {
        let mut out = vec![BOS];
        if self.task == TaskKind::Persona {
            let k = sample
                .knowledge
                .as_ref()
                .ok_or_else(|| Error::Data(format!("sample {}: missing knowledge", sample.id)))?;
            out.extend([self.knowledge, self.colon]);
            out.extend_from_slice(k);
        }
        if include_attribute {
            match &sample.attribute {
                ControlAttribute::Label(l) => {
                    let tok = *self.label_tokens.get(*l).ok_or(Error::Index {
                        what: "label",
                        index: *l,
                        size: self.label_tokens.len(),
                    })?;
                    out.extend([self.act, self.colon, tok]);
                }
                ControlAttribute::Sentences(sents) => {
                    out.extend([self.persona, self.colon]);
                    for s in sents {
                        out.extend_from_slice(s);
                    }
                }
            }
        }
        out.extend([self.conversation, self.colon]);
        for u in &sample.context {
            out.extend_from_slice(u);
            out.push(SEP);
        }
        Ok(out)
    }
}

/// Model-ready sample: next-token inputs/targets over
/// `context ++ response ++ EOS`, with the loss mask on response tokens and
/// the closing `EOS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssembledInput {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub attribute: Option<EncodedAttribute>,
    /// Length of the context part, which is the generation prompt.
    pub context_len: usize,
}

/// Slots the strategy occupies ahead of the sequence.
pub fn reserved_slots(config: &PromptConfig, attr: Option<&EncodedAttribute>) -> usize {
    match config.strategy {
        Strategy::StaticShallow => config.shallow_len,
        Strategy::StaticDeep => config.deep_len,
        s if s.is_controlled() => attr.map_or(0, |a| a.prompt_ids.len()),
        _ => 0,
    }
}

/// Generation prompt and encoded attribute for one sample.
pub fn prompt_tokens(
    config: &PromptConfig,
    template: &Template,
    sample: &DialogueSample,
) -> Result<(Vec<usize>, Option<EncodedAttribute>)> {
    let controlled = config.strategy.is_controlled();
    let ctx = template.context(sample, !controlled)?;
    let attr = if controlled {
        Some(sample.attribute.encode(&template.label_tokens, SEP, config.attribute_budget)?)
    } else {
        None
    };
    Ok((ctx, attr))
}

/// Routes the attribute per strategy: concatenated into the text for the
/// base-only and static strategies, through the encoder for controlled
/// ones.
pub fn assemble_input(
    config: &PromptConfig,
    model: &ModelConfig,
    template: &Template,
    sample: &DialogueSample,
) -> Result<AssembledInput> {
    let (ctx, attr) = prompt_tokens(config, template, sample)?;
    if sample.response.is_empty() {
        return Err(Error::Data(format!("sample {}: empty response", sample.id)));
    }
    let context_len = ctx.len();
    let mut full = ctx;
    full.extend_from_slice(&sample.response);
    full.push(EOS);
    let len = full.len() - 1;
    let limit = model.max_seq_len.saturating_sub(reserved_slots(config, attr.as_ref()));
    if len > limit {
        return Err(Error::Length { len, limit });
    }
    Ok(AssembledInput {
        inputs: full[..len].to_vec(),
        targets: full[1..].to_vec(),
        mask: (0..len).map(|i| i + 1 >= context_len).collect(),
        attribute: attr,
        context_len,
    })
}

/// Base pretraining sample: attribute-free layout with loss on every
/// position.
pub fn assemble_pretrain(model: &ModelConfig, template: &Template, sample: &DialogueSample) -> Result<AssembledInput> {
    let ctx = template.context(sample, false)?;
    let context_len = ctx.len();
    let mut full = ctx;
    full.extend_from_slice(&sample.response);
    full.push(EOS);
    let len = full.len() - 1;
    if len > model.max_seq_len {
        return Err(Error::Length {
            len,
            limit: model.max_seq_len,
        });
    }
    Ok(AssembledInput {
        inputs: full[..len].to_vec(),
        targets: full[1..].to_vec(),
        mask: vec![true; len],
        attribute: None,
        context_len,
    })
}
