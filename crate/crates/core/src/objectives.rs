//! Training objectives over recorded step distributions: supervised
//! fine-tuning, the beam-aware regularizer and its total, the prefix-level
//! reference objective and the positive/negative regularizer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var, LOG_FLOOR};
use crate::catalog::{Catalog, CatalogError, TokenId};
use crate::decode::{beam_search, BeamTrace, DecodeConfig, DecodeError};
use crate::seqmodel::{floored_ln, ModelError, ModelVars, SequenceModel, StepDistributions};

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("{steps} distributions for a target of {target} tokens")]
    LengthMismatch { steps: usize, target: usize },
    #[error("step {step}: empty valid-token mask")]
    EmptyMask { step: usize },
    #[error("at least one negative is required")]
    NoNegatives,
    #[error("invalid hyperparameter: {0}")]
    HyperParam(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdGradient {
    Flow,
    #[default]
    Detach,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdSupport {
    #[default]
    TrieValid,
    FullVocabulary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub lambda: f64,
    pub xi: f64,
    pub beam_width: usize,
    pub gradient: ThresholdGradient,
    pub support: ThresholdSupport,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            xi: 1.0,
            beam_width: 10,
            gradient: ThresholdGradient::Detach,
            support: ThresholdSupport::TrieValid,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.xi > 0.0) || !self.xi.is_finite() {
            return Err(ObjectiveError::HyperParam(format!("xi must be > 0, got {}", self.xi)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(ObjectiveError::HyperParam(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.beam_width == 0 {
            return Err(ObjectiveError::HyperParam("beam width must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub token: TokenId,
    pub log_prob: f64,
    pub log_beta: f64,
    pub margin: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sft: f64,
    pub reg: f64,
    pub total: f64,
    pub steps: Vec<StepRecord>,
}

/// Valid next-token sets along `target` under the chosen support; `None`
/// means the whole vocabulary.
pub fn step_masks(
    catalog: &Catalog,
    target: &[TokenId],
    support: ThresholdSupport,
) -> Result<Option<Vec<Vec<TokenId>>>, ObjectiveError> {
    match support {
        ThresholdSupport::FullVocabulary => Ok(None),
        ThresholdSupport::TrieValid => (0..target.len())
            .map(|t| Ok(catalog.valid_next_tokens(&target[..t])?))
            .collect::<Result<Vec<_>, ObjectiveError>>()
            .map(Some),
    }
}

fn check_len(tape: &Tape, steps: &StepDistributions) -> Result<usize, ObjectiveError> {
    let shape = tape.value(steps.probs).shape();
    if shape.len() != 2 || shape[0] != steps.target.len() {
        return Err(ObjectiveError::LengthMismatch {
            steps: shape.first().copied().unwrap_or(0),
            target: steps.target.len(),
        });
    }
    Ok(shape[1])
}

/// `-sum_t ln max(P(y_t | x, y_<t), eps)`.
pub fn sft_loss(tape: &mut Tape, steps: &StepDistributions) -> Result<Var, ObjectiveError> {
    let v = check_len(tape, steps)?;
    let idx: Vec<usize> = steps
        .target
        .iter()
        .enumerate()
        .map(|(t, &y)| t * v + y as usize)
        .collect();
    let p = tape.gather(steps.probs, &idx)?;
    let lp = tape.log_clamped(p, LOG_FLOOR);
    let s = tape.sum(lp);
    Ok(tape.scale(s, -1.0))
}

/// The token holding the B-th largest masked probability (ties broken by
/// token id), or the smallest when fewer than B tokens are valid.
pub fn top_b_token(probs: &[f64], b: usize, valid: Option<&[TokenId]>) -> Option<TokenId> {
    let mut ps: Vec<(f64, TokenId)> = match valid {
        Some(v) => v.iter().map(|&t| (probs[t as usize], t)).collect(),
        None => probs.iter().enumerate().map(|(t, &p)| (p, t as TokenId)).collect(),
    };
    if ps.is_empty() || b == 0 {
        return None;
    }
    ps.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    Some(ps[b.min(ps.len()) - 1].1)
}

pub fn top_b_threshold(probs: &[f64], b: usize, valid: Option<&[TokenId]>) -> Result<f64, ObjectiveError> {
    top_b_token(probs, b, valid)
        .map(|t| probs[t as usize])
        .ok_or(ObjectiveError::EmptyMask { step: 0 })
}

fn mask_at(masks: Option<&[Vec<TokenId>]>, t: usize) -> Result<Option<&[TokenId]>, ObjectiveError> {
    match masks {
        None => Ok(None),
        Some(m) => match m.get(t) {
            Some(v) if !v.is_empty() => Ok(Some(v.as_slice())),
            _ => Err(ObjectiveError::EmptyMask { step: t }),
        },
    }
}

/// Per-step flags `P(y_t) >= beta_t` and their conjunction.
pub fn necessary_condition(
    tape: &Tape,
    steps: &StepDistributions,
    b: usize,
    masks: Option<&[Vec<TokenId>]>,
) -> Result<(Vec<bool>, bool), ObjectiveError> {
    let v = check_len(tape, steps)?;
    let probs = tape.value(steps.probs).data();
    let mut flags = Vec::with_capacity(steps.target.len());
    for (t, &y) in steps.target.iter().enumerate() {
        let row = &probs[t * v..(t + 1) * v];
        let beta = top_b_threshold(row, b, mask_at(masks, t)?)
            .map_err(|_| ObjectiveError::EmptyMask { step: t })?;
        flags.push(row[y as usize] >= beta);
    }
    let all = flags.iter().all(|&f| f);
    Ok((flags, all))
}

/// `sum_t ln sigma_xi(ln beta_t - ln P(y_t))` with the per-step records.
pub fn bear_regularizer(
    tape: &mut Tape,
    steps: &StepDistributions,
    hp: &HyperParams,
    masks: Option<&[Vec<TokenId>]>,
) -> Result<(Var, Vec<StepRecord>), ObjectiveError> {
    hp.validate()?;
    let v = check_len(tape, steps)?;
    let mut idx_y = Vec::with_capacity(steps.target.len());
    let mut idx_b = Vec::with_capacity(steps.target.len());
    let mut records = Vec::with_capacity(steps.target.len());
    {
        let probs = tape.value(steps.probs).data();
        for (t, &y) in steps.target.iter().enumerate() {
            let row = &probs[t * v..(t + 1) * v];
            let k = top_b_token(row, hp.beam_width, mask_at(masks, t)?)
                .ok_or(ObjectiveError::EmptyMask { step: t })?;
            let (p, beta) = (row[y as usize], row[k as usize]);
            let (lp, lb) = (floored_ln(p), floored_ln(beta));
            records.push(StepRecord {
                token: y,
                log_prob: lp,
                log_beta: lb,
                margin: lb - lp,
                satisfied: p >= beta,
            });
            idx_y.push(t * v + y as usize);
            idx_b.push(t * v + k as usize);
        }
    }
    let p = tape.gather(steps.probs, &idx_y)?;
    let lp = tape.log_clamped(p, LOG_FLOOR);
    let beta_src = match hp.gradient {
        ThresholdGradient::Flow => steps.probs,
        ThresholdGradient::Detach => tape.detach(steps.probs),
    };
    let beta = tape.gather(beta_src, &idx_b)?;
    let lb = tape.log_clamped(beta, LOG_FLOOR);
    let margin = tape.sub(lb, lp)?;
    let z = tape.scale(margin, 1.0 / hp.xi);
    let terms = tape.log_sigmoid(z);
    Ok((tape.sum(terms), records))
}

/// `L_SFT + lambda * L_reg`. With `lambda == 0` the returned variable is the
/// SFT variable itself.
pub fn bear_loss(
    tape: &mut Tape,
    steps: &StepDistributions,
    hp: &HyperParams,
    masks: Option<&[Vec<TokenId>]>,
) -> Result<(Var, LossBreakdown), ObjectiveError> {
    let sft = sft_loss(tape, steps)?;
    let (reg, records) = bear_regularizer(tape, steps, hp, masks)?;
    let total = if hp.lambda == 0.0 {
        sft
    } else {
        let weighted = tape.scale(reg, hp.lambda);
        tape.add(sft, weighted)?
    };
    let breakdown = LossBreakdown {
        sft: tape.value(sft).item(),
        reg: tape.value(reg).item(),
        total: tape.value(total).item(),
        steps: records,
    };
    Ok((total, breakdown))
}

/// Prefix-level margins from an actual beam search: for t = 1..=|y|+1 the
/// threshold is the B-th best score among the beam pool after t-1 steps
/// together with the positive prefix `y_<t` (detached); the prefix
/// log-probability is differentiable. Returns `sum_t ln sigma_xi(margin_t)`.
#[allow(clippy::too_many_arguments)]
pub fn prefix_objective_reference(
    tape: &mut Tape,
    model: &SequenceModel,
    vars: &ModelVars,
    prompt: &[TokenId],
    target: &[TokenId],
    hp: &HyperParams,
    catalog: &Catalog,
    config: &DecodeConfig,
) -> Result<(Var, BeamTrace), ObjectiveError> {
    hp.validate()?;
    let cfg = DecodeConfig {
        beam_width: hp.beam_width,
        ..*config
    };
    let (_, trace) = beam_search(model, prompt, catalog, &cfg)?;
    let steps = model.forward_instance(tape, vars, prompt, target)?;
    prefix_margins_from_trace(tape, &steps, &trace, hp).map(|v| (v, trace))
}

/// The margin sum of [`prefix_objective_reference`] given an existing trace.
pub fn prefix_margins_from_trace(
    tape: &mut Tape,
    steps: &StepDistributions,
    trace: &BeamTrace,
    hp: &HyperParams,
) -> Result<Var, ObjectiveError> {
    let v = check_len(tape, steps)?;
    let target = &steps.target;
    let idx: Vec<usize> = target.iter().enumerate().map(|(t, &y)| t * v + y as usize).collect();
    let p = tape.gather(steps.probs, &idx)?;
    let lp = tape.log_clamped(p, LOG_FLOOR);
    let lp_vals = tape.value(lp).data().to_vec();

    // Pools after 0, 1, ... steps as (tokens, score).
    let root: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    let pool_after = |s: usize| -> Vec<(Vec<TokenId>, f64)> {
        if s == 0 || trace.steps.is_empty() {
            return root.clone();
        }
        let st = &trace.steps[s.min(trace.steps.len()) - 1];
        st.survivors
            .iter()
            .map(|&i| (st.expansions[i].tokens.clone(), st.expansions[i].log_prob))
            .collect()
    };

    let zero = tape.scalar(0.0);
    let mut prefix = zero;
    let mut prefix_val = 0.0;
    let mut terms = Vec::with_capacity(target.len() + 1);
    for t in 1..=target.len() + 1 {
        if t > 1 {
            let g = tape.gather(lp, &[t - 2])?;
            let g = tape.reshape(g, &[])?;
            prefix = tape.add(prefix, g)?;
            prefix_val += lp_vals[t - 2];
        }
        let y_prefix = &target[..t - 1];
        let pool = pool_after(t - 1);
        let mut scores: Vec<f64> = pool.iter().map(|e| e.1).collect();
        if !pool.iter().any(|e| e.0 == y_prefix) {
            scores.push(prefix_val);
        }
        scores.sort_by(|a, b| b.total_cmp(a));
        let thr = scores[hp.beam_width.min(scores.len()) - 1];
        let thr = tape.scalar(thr);
        let margin = tape.sub(thr, prefix)?;
        let z = tape.scale(margin, 1.0 / hp.xi);
        terms.push(tape.log_sigmoid(z));
    }
    let all = tape.concat(&terms)?;
    Ok(tape.sum(all))
}

/// `L_reg(positive) - sum_neg L_reg(negative)`.
pub fn bear_dpo_regularizer(
    tape: &mut Tape,
    positive: &StepDistributions,
    positive_masks: Option<&[Vec<TokenId>]>,
    negatives: &[(StepDistributions, Option<Vec<Vec<TokenId>>>)],
    hp: &HyperParams,
) -> Result<Var, ObjectiveError> {
    if negatives.is_empty() {
        return Err(ObjectiveError::NoNegatives);
    }
    let (mut total, _) = bear_regularizer(tape, positive, hp, positive_masks)?;
    for (neg, masks) in negatives {
        let (r, _) = bear_regularizer(tape, neg, hp, masks.as_deref())?;
        total = tape.sub(total, r)?;
    }
    Ok(total)
}
