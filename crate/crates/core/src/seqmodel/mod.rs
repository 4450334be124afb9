//! A tiny trainable autoregressive model over catalog tokens.
//!
//! Two evaluation paths share one set of parameters:
//! - [`DecodeState`] runs the model row by row without a tape and is what
//!   beam search, exhaustive ranking and `sequence_log_prob` use;
//! - [`SequenceModel::batch_forward`] records the same computation on a
//!   [`Tape`] for training and yields every per-step distribution of an
//!   instance from one pass.

mod graph;
mod infer;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, ParamId, ParameterStore};
use crate::catalog::{TokenId, EOS};

pub use graph::{ModelVars, StepDistributions};
pub use infer::DecodeState;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("context must contain at least one token")]
    EmptyContext,
    #[error("context length {len} exceeds the maximum {max}")]
    ContextTooLong { len: usize, max: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    UnknownToken { token: TokenId, vocab: usize },
    #[error("target must be non-empty and end with EOS")]
    TargetWithoutEos,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    #[default]
    CausalAttention,
    GatedRecurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub block_kind: BlockKind,
    pub num_blocks: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            embed_dim: 24,
            hidden_dim: 48,
            block_kind: BlockKind::CausalAttention,
            num_blocks: 1,
            max_context: 96,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.vocab_size < 5 {
            return bad("vocab_size must cover the 4 specials plus content tokens");
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("embed_dim and hidden_dim must be >= 1");
        }
        if self.num_blocks == 0 {
            return bad("num_blocks must be >= 1");
        }
        if self.max_context < 2 {
            return bad("max_context must be >= 2");
        }
        Ok(())
    }
}

/// Log-probability used everywhere a probability enters a sum of logs.
pub fn floored_ln(p: f64) -> f64 {
    p.max(crate::autodiff::LOG_FLOOR).ln()
}

/// Anything that yields next-token distributions incrementally.
pub trait LanguageModel: Sync {
    type State: Clone + Send + Sync;

    fn vocab_size(&self) -> usize;

    /// State after consuming `prompt` (non-empty).
    fn start(&self, prompt: &[TokenId]) -> Result<Self::State, ModelError>;

    fn extend(&self, state: &Self::State, token: TokenId) -> Result<Self::State, ModelError>;

    /// Distribution over the next token given everything consumed so far.
    fn probs<'a>(&self, state: &'a Self::State) -> &'a [f64];

    fn next_token_distribution(&self, context: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        let s = self.start(context)?;
        Ok(self.probs(&s).to_vec())
    }

    /// `sum_t ln P(target_t | prompt, target_<t)`, with probabilities floored.
    fn sequence_log_prob(&self, prompt: &[TokenId], target: &[TokenId]) -> Result<f64, ModelError> {
        if target.last() != Some(&EOS) {
            return Err(ModelError::TargetWithoutEos);
        }
        let mut state = self.start(prompt)?;
        let mut total = 0.0;
        for (t, &tok) in target.iter().enumerate() {
            let p = self.probs(&state);
            let p = *p.get(tok as usize).ok_or(ModelError::UnknownToken {
                token: tok,
                vocab: p.len(),
            })?;
            total += floored_ln(p);
            if t + 1 < target.len() {
                state = self.extend(&state, tok)?;
            }
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum BlockIds {
    Attention {
        wq: ParamId,
        wk: ParamId,
        wv: ParamId,
        wo: ParamId,
        rel_bias: ParamId,
        ffn: FfnIds,
    },
    Recurrent {
        wz: ParamId,
        uz: ParamId,
        bz: ParamId,
        wr: ParamId,
        ur: ParamId,
        br: ParamId,
        wh: ParamId,
        uh: ParamId,
        bh: ParamId,
        ffn: FfnIds,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Ids {
    tok_emb: ParamId,
    blocks: Vec<BlockIds>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Token embedding, a stack of mixing blocks (each followed by a rectifier
/// feed-forward layer with residuals) and an output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModel {
    config: ModelConfig,
    store: ParameterStore,
    ids: Ids,
}

const INIT_RANGE: f64 = 0.05;

impl SequenceModel {
    /// Uniform `[-0.05, 0.05]` initialization from `config.seed`; the output
    /// bias starts at zero.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParameterStore::new();
        let (v, d, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let mut uniform = |store: &mut ParameterStore, name: &str, shape: &[usize]| -> Result<ParamId, ModelError> {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE)).collect();
            Ok(store.insert(name, Array::new(shape.to_vec(), data)?)?)
        };
        let tok_emb = uniform(&mut store, "tok_emb", &[v, d])?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for b in 0..config.num_blocks {
            let p = |s: &str| format!("block{b}.{s}");
            let block = match config.block_kind {
                BlockKind::CausalAttention => BlockIds::Attention {
                    wq: uniform(&mut store, &p("wq"), &[d, d])?,
                    wk: uniform(&mut store, &p("wk"), &[d, d])?,
                    wv: uniform(&mut store, &p("wv"), &[d, d])?,
                    wo: uniform(&mut store, &p("wo"), &[d, d])?,
                    rel_bias: uniform(&mut store, &p("rel_bias"), &[config.max_context])?,
                    ffn: FfnIds {
                        w1: uniform(&mut store, &p("ff1"), &[d, h])?,
                        b1: uniform(&mut store, &p("ff1_b"), &[h])?,
                        w2: uniform(&mut store, &p("ff2"), &[h, d])?,
                        b2: uniform(&mut store, &p("ff2_b"), &[d])?,
                    },
                },
                BlockKind::GatedRecurrent => BlockIds::Recurrent {
                    wz: uniform(&mut store, &p("wz"), &[d, d])?,
                    uz: uniform(&mut store, &p("uz"), &[d, d])?,
                    bz: uniform(&mut store, &p("bz"), &[d])?,
                    wr: uniform(&mut store, &p("wr"), &[d, d])?,
                    ur: uniform(&mut store, &p("ur"), &[d, d])?,
                    br: uniform(&mut store, &p("br"), &[d])?,
                    wh: uniform(&mut store, &p("wh"), &[d, d])?,
                    uh: uniform(&mut store, &p("uh"), &[d, d])?,
                    bh: uniform(&mut store, &p("bh"), &[d])?,
                    ffn: FfnIds {
                        w1: uniform(&mut store, &p("ff1"), &[d, h])?,
                        b1: uniform(&mut store, &p("ff1_b"), &[h])?,
                        w2: uniform(&mut store, &p("ff2"), &[h, d])?,
                        b2: uniform(&mut store, &p("ff2_b"), &[d])?,
                    },
                },
            };
            blocks.push(block);
        }
        let out_w = uniform(&mut store, "out_w", &[d, v])?;
        let out_b = store.insert("out_b", Array::zeros(&[v]))?;
        Ok(Self {
            config,
            store,
            ids: Ids {
                tok_emb,
                blocks,
                out_w,
                out_b,
            },
        })
    }

    /// Rebuilds a model around a loaded store; names and shapes must match
    /// what `config` would create.
    pub fn from_parts(config: ModelConfig, store: ParameterStore) -> Result<Self, ModelError> {
        let mut model = Self::new(config)?;
        let fresh = model.store.manifest();
        if fresh != store.manifest() {
            return Err(ModelError::Checkpoint(
                "parameter names or shapes do not match the model config".into(),
            ));
        }
        model.store = store;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn digest(&self) -> String {
        self.store.digest()
    }

    /// Output projection (weights and bias), exposed for tests that pin the
    /// initial distribution.
    pub fn output_projection_ids(&self) -> (ParamId, ParamId) {
        (self.ids.out_w, self.ids.out_b)
    }

    pub(crate) fn check_context(&self, context: &[TokenId]) -> Result<(), ModelError> {
        if context.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        if context.len() > self.config.max_context {
            return Err(ModelError::ContextTooLong {
                len: context.len(),
                max: self.config.max_context,
            });
        }
        self.check_tokens(context)
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        match tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&token) => Err(ModelError::UnknownToken {
                token,
                vocab: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Writes `model.json` (config + training digest) and the parameter
    /// manifest/blob pair `params.json` / `params.bin`.
    pub fn save(&self, dir: &Path, training_digest: &str) -> Result<(), ModelError> {
        let err = |e: &dyn std::fmt::Display| ModelError::Checkpoint(e.to_string());
        fs::create_dir_all(dir).map_err(|e| err(&e))?;
        let meta = CheckpointMeta {
            config: self.config.clone(),
            training_digest: training_digest.to_string(),
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| err(&e))?;
        fs::write(dir.join("model.json"), json).map_err(|e| err(&e))?;
        self.store.save(dir, "params")?;
        Ok(())
    }

    /// Loads a checkpoint written by [`SequenceModel::save`], returning the
    /// recorded training digest alongside the model.
    pub fn load(dir: &Path) -> Result<(Self, String), ModelError> {
        let err = |e: &dyn std::fmt::Display| ModelError::Checkpoint(format!("{}: {e}", dir.display()));
        let raw = fs::read(dir.join("model.json")).map_err(|e| err(&e))?;
        let meta: CheckpointMeta = serde_json::from_slice(&raw).map_err(|e| err(&e))?;
        let store = ParameterStore::load(dir, "params")?;
        Ok((Self::from_parts(meta.config, store)?, meta.training_digest))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    training_digest: String,
}

impl LanguageModel for SequenceModel {
    type State = DecodeState;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn start(&self, prompt: &[TokenId]) -> Result<DecodeState, ModelError> {
        DecodeState::prefill(self, prompt)
    }

    fn extend(&self, state: &DecodeState, token: TokenId) -> Result<DecodeState, ModelError> {
        state.extend(self, token)
    }

    fn probs<'a>(&self, state: &'a DecodeState) -> &'a [f64] {
        state.probs()
    }
}

/// Test helper: random model with a small vocabulary.
pub fn random_model(vocab_size: usize, seed: u64, kind: BlockKind) -> SequenceModel {
    let mut model = SequenceModel::new(ModelConfig {
        vocab_size,
        embed_dim: 8,
        hidden_dim: 12,
        block_kind: kind,
        num_blocks: 1,
        max_context: 48,
        seed,
    })
    .expect("valid config");
    // Spread the parameters so distributions are far from uniform.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        for v in model.store.value_mut(id).data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    model
}
