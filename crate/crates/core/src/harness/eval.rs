use super::data::Instance;
use super::HarnessError;
use crate::catalog::Catalog;
use crate::decode::{beam_search, classify_positive, exhaustive_rank, rank_of, DecodeConfig};
use crate::metrics::EvalResult;
use crate::par::{self, Exec};
use crate::seqmodel::SequenceModel;

/// Beam search, exhaustive ranking and pruning classification for each
/// instance, in input order.
pub fn evaluate_instances(
    model: &SequenceModel,
    catalog: &Catalog,
    instances: &[Instance],
    decode: &DecodeConfig,
    exec: Exec,
) -> Result<Vec<EvalResult>, HarnessError> {
    let digest = model.digest();
    par::map(exec, instances, |inst| -> Result<EvalResult, HarnessError> {
        let prompt = inst.prompt(catalog);
        let target = inst.target_tokens(catalog);
        let (finals, trace) = beam_search(model, &prompt, catalog, decode)?;
        let ranked = exhaustive_rank(model, &prompt, catalog)?;
        let (cause, pruned_step) = classify_positive(&trace, catalog, &target)?;
        Ok(EvalResult {
            user: inst.user,
            positive: inst.target,
            exhaustive_rank: rank_of(&ranked, inst.target).expect("every item is ranked"),
            beam_rank: finals.iter().position(|h| h.item == Some(inst.target)).map(|p| p + 1),
            cause,
            pruned_step,
            beam_width: decode.beam_width,
            model_digest: digest.clone(),
        })
    })
    .into_iter()
    .collect()
}

/// Mean beam NDCG@k without the exhaustive oracle, for model selection.
pub fn beam_ndcg(
    model: &SequenceModel,
    catalog: &Catalog,
    instances: &[Instance],
    decode: &DecodeConfig,
    k: usize,
    exec: Exec,
) -> Result<f64, HarnessError> {
    if instances.is_empty() {
        return Ok(0.0);
    }
    let gains = par::map(exec, instances, |inst| -> Result<f64, HarnessError> {
        let (finals, _) = beam_search(model, &inst.prompt(catalog), catalog, decode)?;
        Ok(match finals.iter().take(k).position(|h| h.item == Some(inst.target)) {
            Some(p) => 1.0 / ((p + 2) as f64).log2(),
            None => 0.0,
        })
    });
    let mut total = 0.0;
    for g in gains {
        total += g?;
    }
    Ok(total / instances.len() as f64)
}
