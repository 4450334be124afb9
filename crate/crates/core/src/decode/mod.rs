//! Trie-constrained beam search, an exhaustive ranking oracle and pruning
//! diagnostics.

mod table;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogError, ItemId, PrefixTrie, TokenId, EOS};
use crate::seqmodel::{floored_ln, LanguageModel, ModelError};

pub use table::TableModel;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("beam width must be at least 1")]
    ZeroBeam,
    #[error("max steps {max_steps} below the longest item length {needed}")]
    TooFewSteps { max_steps: usize, needed: usize },
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_steps: usize,
    pub constrained: bool,
    pub length_normalization: bool,
}

impl DecodeConfig {
    /// Constrained, unnormalized search with enough steps for every item.
    pub fn for_catalog(beam_width: usize, catalog: &Catalog) -> Self {
        Self {
            beam_width,
            max_steps: catalog.max_item_len(),
            constrained: true,
            length_normalization: false,
        }
    }

    pub fn validate(&self, catalog: &Catalog) -> Result<(), DecodeError> {
        if self.beam_width == 0 {
            return Err(DecodeError::ZeroBeam);
        }
        if catalog.is_empty() {
            return Err(DecodeError::EmptyCatalog);
        }
        // item token lists already end with EOS, so this is content + 1
        let needed = catalog.max_item_len();
        if self.max_steps < needed {
            return Err(DecodeError::TooFewSteps {
                max_steps: self.max_steps,
                needed,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    /// Sum of floored token log-probabilities, in nats.
    pub log_prob: f64,
    pub finished: bool,
    pub item: Option<ItemId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PruningCause {
    NecessaryViolation,
    GlobalPruned,
    Survived,
}

/// One candidate considered at a step. Finished hypotheses are carried
/// forward as expansions with `token: None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expansion {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub parent: usize,
    pub token: Option<TokenId>,
    /// Whether the token reaches the parent's token-level top-B threshold.
    pub within_top_b: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningEvent {
    pub tokens: Vec<TokenId>,
    pub step: usize,
    pub cause: PruningCause,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub expansions: Vec<Expansion>,
    /// Score of the B-th ranked expansion; `None` when fewer than B exist.
    pub bth_log_prob: Option<f64>,
    /// Log of each parent's token-level B-th probability; `None` for
    /// finished parents.
    pub thresholds: Vec<Option<f64>>,
    /// Indices into `expansions`, in rank order.
    pub survivors: Vec<usize>,
    pub pruned: Vec<PruningEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamTrace {
    pub beam_width: usize,
    pub steps: Vec<StepTrace>,
    pub finals: Vec<Vec<TokenId>>,
    /// Hypotheses dropped at termination because they never formed an item.
    pub discarded: usize,
}

impl BeamTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

/// B-th largest probability among `valid` under the order (probability
/// descending, token ascending); the smallest one when fewer than B exist.
pub fn token_threshold(probs: &[f64], valid: &[TokenId], b: usize) -> f64 {
    let mut ps: Vec<(f64, TokenId)> = valid.iter().map(|&t| (probs[t as usize], t)).collect();
    ps.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let k = b.min(ps.len()).max(1) - 1;
    ps.get(k).map(|p| p.0).unwrap_or(0.0)
}

fn rank_score(log_prob: f64, len: usize, normalize: bool) -> f64 {
    if normalize && len > 0 {
        log_prob / len as f64
    } else {
        log_prob
    }
}

struct Cand {
    exp: Expansion,
    sort_token: TokenId,
    score: f64,
}

/// Beam search over `catalog` items (or the raw vocabulary when
/// unconstrained). Returns finished hypotheses ranked by score, and the trace.
pub fn beam_search<M: LanguageModel>(
    model: &M,
    prompt: &[TokenId],
    catalog: &Catalog,
    config: &DecodeConfig,
) -> Result<(Vec<Hypothesis>, BeamTrace), DecodeError> {
    config.validate(catalog)?;
    let b = config.beam_width;
    let trie: &PrefixTrie = &catalog.trie;
    let mut pool: Vec<Hypothesis> = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
        item: None,
    }];
    let mut states: Vec<Option<M::State>> = vec![Some(model.start(prompt)?)];
    let all_tokens: Vec<TokenId> = (0..model.vocab_size() as TokenId).collect();
    let mut trace = BeamTrace {
        beam_width: b,
        steps: Vec::new(),
        finals: Vec::new(),
        discarded: 0,
    };

    for step in 1..=config.max_steps {
        if pool.iter().all(|h| h.finished) {
            break;
        }
        let mut cands: Vec<Cand> = Vec::new();
        let mut thresholds = Vec::with_capacity(pool.len());
        for (pi, hyp) in pool.iter().enumerate() {
            if hyp.finished {
                thresholds.push(None);
                cands.push(Cand {
                    score: rank_score(hyp.log_prob, hyp.tokens.len(), config.length_normalization),
                    sort_token: *hyp.tokens.last().unwrap_or(&EOS),
                    exp: Expansion {
                        tokens: hyp.tokens.clone(),
                        log_prob: hyp.log_prob,
                        parent: pi,
                        token: None,
                        within_top_b: true,
                    },
                });
                continue;
            }
            let state = states[pi].as_ref().expect("live hypothesis has a state");
            let probs = model.probs(state);
            let valid = if config.constrained {
                trie.valid_next_tokens(&hyp.tokens)?
            } else {
                all_tokens.clone()
            };
            let beta = token_threshold(probs, &valid, b);
            thresholds.push(Some(floored_ln(beta)));
            for &tok in &valid {
                let p = probs[tok as usize];
                let lp = hyp.log_prob + floored_ln(p);
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                cands.push(Cand {
                    score: rank_score(lp, tokens.len(), config.length_normalization),
                    sort_token: tok,
                    exp: Expansion {
                        tokens,
                        log_prob: lp,
                        parent: pi,
                        token: Some(tok),
                        within_top_b: p >= beta,
                    },
                });
            }
        }
        cands.sort_by(|x, y| {
            y.score
                .total_cmp(&x.score)
                .then(x.sort_token.cmp(&y.sort_token))
                .then(x.exp.parent.cmp(&y.exp.parent))
        });
        let bth_log_prob = cands.get(b - 1).map(|c| c.exp.log_prob);
        let mut next_pool = Vec::with_capacity(b.min(cands.len()));
        let mut next_states = Vec::with_capacity(b.min(cands.len()));
        let mut pruned = Vec::new();
        for (rank, c) in cands.iter().enumerate() {
            if rank < b {
                let e = &c.exp;
                match e.token {
                    None => {
                        next_pool.push(pool[e.parent].clone());
                        next_states.push(None);
                    }
                    Some(EOS) => {
                        let item = trie.item_of(&e.tokens).ok();
                        next_pool.push(Hypothesis {
                            tokens: e.tokens.clone(),
                            log_prob: e.log_prob,
                            finished: true,
                            item,
                        });
                        next_states.push(None);
                    }
                    Some(tok) => {
                        let parent_state = states[e.parent].as_ref().expect("live parent");
                        next_states.push(Some(model.extend(parent_state, tok)?));
                        next_pool.push(Hypothesis {
                            tokens: e.tokens.clone(),
                            log_prob: e.log_prob,
                            finished: false,
                            item: None,
                        });
                    }
                }
            } else {
                let cause = if c.exp.within_top_b {
                    PruningCause::GlobalPruned
                } else {
                    PruningCause::NecessaryViolation
                };
                pruned.push(PruningEvent {
                    tokens: c.exp.tokens.clone(),
                    step,
                    cause,
                });
            }
        }
        let survivors = (0..b.min(cands.len())).collect();
        trace.steps.push(StepTrace {
            step,
            expansions: cands.into_iter().map(|c| c.exp).collect(),
            bth_log_prob,
            thresholds,
            survivors,
            pruned,
        });
        pool = next_pool;
        states = next_states;
    }

    let mut finals = Vec::with_capacity(pool.len());
    for h in pool {
        if h.finished && h.item.is_some() {
            finals.push(h);
        } else {
            trace.discarded += 1;
        }
    }
    trace.finals = finals.iter().map(|h| h.tokens.clone()).collect();
    Ok((finals, trace))
}

/// Every catalog item with its sequence log-probability, best first (ties by
/// item id). States are shared along common trie prefixes.
pub fn exhaustive_rank<M: LanguageModel>(
    model: &M,
    prompt: &[TokenId],
    catalog: &Catalog,
) -> Result<Vec<(ItemId, f64)>, DecodeError> {
    let mut scores = vec![f64::NAN; catalog.len()];
    let trie = &catalog.trie;
    let root = model.start(prompt)?;
    let mut stack = vec![(crate::catalog::ROOT, root, 0.0f64)];
    while let Some((node, state, lp)) = stack.pop() {
        let probs = model.probs(&state);
        for (tok, child) in trie.children(node) {
            let next = lp + floored_ln(probs[tok as usize]);
            if tok == EOS {
                let item = trie.terminal_item(child).expect("EOS edge ends at an item");
                scores[item] = next;
            } else {
                stack.push((child, model.extend(&state, tok)?, next));
            }
        }
    }
    let mut ranked: Vec<(ItemId, f64)> = scores.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// 1-based position of `item` in an exhaustive ranking.
pub fn rank_of(ranked: &[(ItemId, f64)], item: ItemId) -> Option<usize> {
    ranked.iter().position(|&(i, _)| i == item).map(|p| p + 1)
}

/// Why (and when) the positive left the beam, or `Survived`.
pub fn classify_positive(
    trace: &BeamTrace,
    catalog: &Catalog,
    positive: &[TokenId],
) -> Result<(PruningCause, Option<usize>), DecodeError> {
    catalog.item_of(positive)?;
    if trace.finals.iter().any(|f| f == positive) {
        return Ok((PruningCause::Survived, None));
    }
    for st in &trace.steps {
        if st.step > positive.len() {
            // only a finished copy of the full item can be pruned now
            if let Some(ev) = st.pruned.iter().find(|e| e.tokens == positive) {
                return Ok((ev.cause, Some(st.step)));
            }
            continue;
        }
        let prefix = &positive[..st.step];
        if let Some(ev) = st.pruned.iter().find(|e| e.tokens == prefix) {
            return Ok((ev.cause, Some(st.step)));
        }
    }
    // Only reachable if the search stopped before the item finished.
    Ok((PruningCause::GlobalPruned, trace.steps.last().map(|s| s.step)))
}

/// Ordering helper shared with callers that rank by score then id.
pub fn by_score_then_id(a: &(ItemId, f64), b: &(ItemId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}
