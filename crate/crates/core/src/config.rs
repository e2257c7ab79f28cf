//! Run configuration: a TOML file with one table per module, every key of
//! which is also a command-line flag of the same name. Flags win.
//!
//! ```toml
//! [data]
//! task = "label"
//! n_train = 20000
//!
//! [train]
//! epochs = 2
//! lr = 1e-4
//! ```

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::data::{SyntheticTaskSpec, TaskKind};
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::prompt::{MlpLayout, PromptConfig};
use crate::training::TrainConfig;
use crate::transformer::ModelConfig;

/// `a.merge(b)`: every field of `a` that is unset takes `b`'s value.
macro_rules! mergeable {
    ($t:ident { $($f:ident),* $(,)? }) => {
        impl $t {
            pub fn merge(self, other: $t) -> $t {
                $t { $($f: self.$f.or(other.$f)),* }
            }
        }
    };
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataArgs {
    /// Task family: label or persona.
    #[arg(long)]
    pub task: Option<TaskKind>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_valid: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Minimum token frequency for the vocabulary.
    #[arg(long)]
    pub min_freq: Option<usize>,
    /// Seed of the corpus generator.
    #[arg(long)]
    pub data_seed: Option<u64>,
}
mergeable!(DataArgs { task, n_train, n_valid, n_test, min_freq, data_seed });

impl DataArgs {
    pub fn task(&self) -> TaskKind {
        self.task.unwrap_or(TaskKind::Label)
    }

    pub fn spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec::new(
            self.task(),
            self.n_train.unwrap_or(20_000),
            self.n_valid.unwrap_or(1_000),
            self.n_test.unwrap_or(1_000),
        )
    }
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelArgs {
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
}
mergeable!(ModelArgs { n_layers, n_heads, d_model, d_ff, max_seq_len });

impl ModelArgs {
    /// Desk-scale defaults with overrides applied.
    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        let d = ModelConfig::desk(vocab_size);
        ModelConfig {
            n_layers: self.n_layers.unwrap_or(d.n_layers),
            n_heads: self.n_heads.unwrap_or(d.n_heads),
            d_model: self.d_model.unwrap_or(d.d_model),
            d_ff: self.d_ff.unwrap_or(d.d_ff),
            max_seq_len: self.max_seq_len.unwrap_or(d.max_seq_len),
            ..d
        }
    }
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub grad_clip_norm: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Seed for initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub probe_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
}
mergeable!(TrainArgs { epochs, batch_size, lr, grad_clip_norm, weight_decay, seed, probe_size, max_steps });

impl TrainArgs {
    pub fn train_config(&self, default_lr: f64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr: self.lr.unwrap_or(default_lr),
            grad_clip_norm: self.grad_clip_norm.unwrap_or(d.grad_clip_norm),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            seed: self.seed.unwrap_or(d.seed),
            probe_size: self.probe_size.unwrap_or(d.probe_size),
            max_steps: self.max_steps.or(d.max_steps),
            ..d
        }
    }
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptArgs {
    #[arg(long)]
    pub attribute_budget: Option<usize>,
    #[arg(long)]
    pub shallow_len: Option<usize>,
    #[arg(long)]
    pub deep_len: Option<usize>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    #[arg(long, value_parser = parse_layout)]
    pub mlp_layout: Option<MlpLayout>,
    #[arg(long)]
    pub encoder_width: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    pub encoder_heads: Option<usize>,
    #[arg(long)]
    pub encoder_ff: Option<usize>,
    #[arg(long)]
    pub init_std: Option<f64>,
}
mergeable!(PromptArgs {
    attribute_budget,
    shallow_len,
    deep_len,
    mlp_hidden,
    mlp_layout,
    encoder_width,
    encoder_layers,
    encoder_heads,
    encoder_ff,
    init_std,
});

fn parse_layout(s: &str) -> std::result::Result<MlpLayout, String> {
    match s {
        "one-hidden" => Ok(MlpLayout::OneHidden),
        "two-hidden" => Ok(MlpLayout::TwoHidden),
        _ => Err(format!("unknown MLP layout `{s}` (one-hidden or two-hidden)")),
    }
}

impl PromptArgs {
    pub fn apply(&self, c: PromptConfig) -> PromptConfig {
        PromptConfig {
            attribute_budget: self.attribute_budget.unwrap_or(c.attribute_budget),
            shallow_len: self.shallow_len.unwrap_or(c.shallow_len),
            deep_len: self.deep_len.unwrap_or(c.deep_len),
            mlp_hidden: self.mlp_hidden.unwrap_or(c.mlp_hidden),
            mlp_layout: self.mlp_layout.unwrap_or(c.mlp_layout),
            encoder_width: self.encoder_width.unwrap_or(c.encoder_width),
            encoder_layers: self.encoder_layers.unwrap_or(c.encoder_layers),
            encoder_heads: self.encoder_heads.unwrap_or(c.encoder_heads),
            encoder_ff: self.encoder_ff.unwrap_or(c.encoder_ff),
            init_std: self.init_std.unwrap_or(c.init_std),
            ..c
        }
    }
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeArgs {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Sampling seed.
    #[arg(long)]
    pub decode_seed: Option<u64>,
}
mergeable!(DecodeArgs { k, temperature, max_new_tokens, decode_seed });

impl DecodeArgs {
    pub fn decode_config(&self) -> DecodeConfig {
        let d = DecodeConfig::default();
        DecodeConfig {
            k: self.k.unwrap_or(d.k),
            temperature: self.temperature.unwrap_or(d.temperature),
            max_new_tokens: self.max_new_tokens.unwrap_or(d.max_new_tokens),
            seed: self.decode_seed.unwrap_or(d.seed),
            ..d
        }
    }
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathArgs {
    /// Directory holding train/valid/test JSONL splits.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Base model checkpoint.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
}
mergeable!(PathArgs { data_dir, base, checkpoint_dir });

/// Contents of a configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataArgs,
    pub model: ModelArgs,
    pub train: TrainArgs,
    pub prompt: PromptArgs,
    pub decode: DecodeArgs,
    pub paths: PathArgs,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {}", e.message())))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}
