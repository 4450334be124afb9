//! Mini-batch training with per-instance gradients reduced in input order.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Objective, OptimizerKind};
use super::data::{Dataset, Instance};
use super::eval::beam_ndcg;
use super::HarnessError;
use crate::autodiff::{Array, ParamId, ParameterStore, Tape};
use crate::catalog::Catalog;
use crate::decode::{beam_search, DecodeConfig};
use crate::objectives::{bear_loss, prefix_margins_from_trace, sft_loss, step_masks, HyperParams};
use crate::par::{self, Exec};
use crate::seqmodel::{ModelConfig, SequenceModel};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    /// Mean loss per optimizer step, in order.
    pub batch_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub val_ndcg: Vec<f64>,
    /// Wall time of each epoch's training pass (validation excluded).
    pub epoch_times: Vec<f64>,
}

impl History {
    pub fn mean_epoch_time(&self) -> Option<f64> {
        (!self.epoch_times.is_empty())
            .then(|| self.epoch_times.iter().sum::<f64>() / self.epoch_times.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: ParameterStore,
    pub second: ParameterStore,
}

impl OptimizerState {
    fn new(kind: OptimizerKind, params: &ParameterStore) -> Self {
        Self {
            kind,
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    fn apply(&mut self, params: &mut ParameterStore, grads: &[Array], lr: f64, momentum: f64) {
        self.step += 1;
        let ids: Vec<ParamId> = params.ids().collect();
        match self.kind {
            OptimizerKind::Sgd => {
                for id in ids {
                    let v = self.first.value_mut(id).data_mut();
                    let g = grads[id.0].data();
                    for (vi, &gi) in v.iter_mut().zip(g) {
                        *vi = momentum * *vi + gi;
                    }
                    let v = self.first.value(id).data();
                    for (p, &vi) in params.value_mut(id).data_mut().iter_mut().zip(v) {
                        *p -= lr * vi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (0.9, 0.999, 1e-8);
                let c1 = 1.0 - f64::powi(b1, self.step as i32);
                let c2 = 1.0 - f64::powi(b2, self.step as i32);
                for id in ids {
                    let g = grads[id.0].data();
                    let m = self.first.value_mut(id).data_mut();
                    for (mi, &gi) in m.iter_mut().zip(g) {
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                    }
                    let v = self.second.value_mut(id).data_mut();
                    for (vi, &gi) in v.iter_mut().zip(g) {
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    }
                    let m = self.first.value(id).data();
                    let v = self.second.value(id).data();
                    for ((p, &mi), &vi) in params.value_mut(id).data_mut().iter_mut().zip(m).zip(v) {
                        *p -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SequenceModel,
    pub optimizer: OptimizerState,
    /// 1-based epoch the model was taken from.
    pub epoch: usize,
    pub history: History,
    pub method: String,
    pub seed: u64,
    pub config_digest: String,
    pub catalog_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    optimizer: OptimizerKind,
    optimizer_step: u64,
    epoch: usize,
    history: History,
    method: String,
    seed: u64,
    config_digest: String,
    catalog_digest: String,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        self.model.save(dir, &self.config_digest)?;
        self.optimizer.first.save(dir, "optimizer_first")?;
        self.optimizer.second.save(dir, "optimizer_second")?;
        let meta = CheckpointMeta {
            optimizer: self.optimizer.kind,
            optimizer_step: self.optimizer.step,
            epoch: self.epoch,
            history: self.history.clone(),
            method: self.method.clone(),
            seed: self.seed,
            config_digest: self.config_digest.clone(),
            catalog_digest: self.catalog_digest.clone(),
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        std::fs::write(dir.join("train.json"), json).map_err(|e| HarnessError::Runtime(e.to_string()))
    }

    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let (model, _) = SequenceModel::load(dir)?;
        let text = std::fs::read_to_string(dir.join("train.json"))
            .map_err(|e| HarnessError::Validation(format!("{}: {e}", dir.display())))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| HarnessError::Validation(e.to_string()))?;
        Ok(Self {
            model,
            optimizer: OptimizerState {
                kind: meta.optimizer,
                step: meta.optimizer_step,
                first: ParameterStore::load(dir, "optimizer_first")?,
                second: ParameterStore::load(dir, "optimizer_second")?,
            },
            epoch: meta.epoch,
            history: meta.history,
            method: meta.method,
            seed: meta.seed,
            config_digest: meta.config_digest,
            catalog_digest: meta.catalog_digest,
        })
    }
}

/// Model config sized for the catalog and the longest instance.
pub fn model_config(config: &ExperimentConfig, catalog: &Catalog, dataset: &Dataset, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: catalog.vocab.len(),
        max_context: config.model.max_context.max(dataset.max_context(catalog)),
        seed,
        ..config.model.clone()
    }
}

/// Loss and dense parameter gradients of one instance.
pub fn instance_gradient(
    model: &SequenceModel,
    catalog: &Catalog,
    inst: &Instance,
    objective: Objective,
    hp: &HyperParams,
    decode: &DecodeConfig,
) -> Result<(f64, Vec<Array>), HarnessError> {
    let prompt = inst.prompt(catalog);
    let target = inst.target_tokens(catalog);
    let mut tape = Tape::new();
    let vars = model.vars(&mut tape);
    let trace = match objective {
        Objective::PrefixRef => {
            let cfg = DecodeConfig {
                beam_width: hp.beam_width,
                ..*decode
            };
            Some(beam_search(model, &prompt, catalog, &cfg)?.1)
        }
        _ => None,
    };
    let steps = model.forward_instance(&mut tape, &vars, &prompt, &target)?;
    let loss = match objective {
        Objective::Sft => sft_loss(&mut tape, &steps)?,
        Objective::Bear => {
            let masks = step_masks(catalog, &target, hp.support)?;
            bear_loss(&mut tape, &steps, hp, masks.as_deref())?.0
        }
        Objective::PrefixRef => {
            let sft = sft_loss(&mut tape, &steps)?;
            let pre = prefix_margins_from_trace(&mut tape, &steps, trace.as_ref().expect("traced"), hp)?;
            if hp.lambda == 0.0 {
                sft
            } else {
                let w = tape.scale(pre, hp.lambda);
                tape.add(sft, w)?
            }
        }
    };
    let value = tape.value(loss).item();
    let g = tape.backward(loss)?;
    let store = model.params();
    let mut dense: Vec<Array> = store.ids().map(|id| Array::zeros(store.value(id).shape())).collect();
    for (id, grad) in g.param_grads() {
        dense[id.0].add_assign(grad);
    }
    Ok((value, dense))
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last_model: SequenceModel,
}

/// Trains from a fresh initialization seeded by `seed`; keeps the model with
/// the best validation NDCG at the largest configured K.
pub fn train(
    config: &ExperimentConfig,
    catalog: &Catalog,
    dataset: &Dataset,
    seed: u64,
    exec: Exec,
) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    if dataset.catalog_digest != catalog.digest() {
        return Err(HarnessError::Validation("dataset was prepared for a different catalog".into()));
    }
    if dataset.train.is_empty() {
        return Err(HarnessError::Validation("no training instances".into()));
    }
    let mut model = SequenceModel::new(model_config(config, catalog, dataset, seed))?;
    let decode = super::decode_config(config, catalog);
    let hp = config.hyper;
    let k = *config.ks.iter().max().expect("validated non-empty");
    let mut opt = OptimizerState::new(config.optimizer, model.params());
    let mut history = History::default();
    let mut best: Option<Checkpoint> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a11);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let start = Instant::now();
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let snapshot = &model;
            let results = par::map(exec, &batch, |inst| {
                instance_gradient(snapshot, catalog, inst, config.objective, &hp, &decode)
            });
            let mut sum: Option<Vec<Array>> = None;
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l;
                match &mut sum {
                    None => sum = Some(g),
                    Some(s) => {
                        for (a, b) in s.iter_mut().zip(&g) {
                            a.add_assign(b);
                        }
                    }
                }
            }
            let n = batch.len() as f64;
            let loss = loss / n;
            let mut grads = sum.expect("non-empty batch");
            let finite = loss.is_finite() && grads.iter().all(|g| g.is_finite());
            if !finite {
                return Err(HarnessError::Diverged { epoch, batch: bi });
            }
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x /= n);
            }
            opt.apply(model.params_mut(), &grads, config.learning_rate, config.momentum);
            history.batch_losses.push(loss);
            epoch_loss += loss * n;
        }
        history.epoch_times.push(start.elapsed().as_secs_f64());
        history.epoch_losses.push(epoch_loss / dataset.train.len() as f64);
        let val = beam_ndcg(&model, catalog, &dataset.val, &decode, k, exec)?;
        history.val_ndcg.push(val);
        let improved = best
            .as_ref()
            .is_none_or(|b| val > b.history.val_ndcg[b.epoch - 1]);
        if improved {
            best = Some(Checkpoint {
                model: model.clone(),
                optimizer: opt.clone(),
                epoch,
                history: History::default(),
                method: config.method(),
                seed,
                config_digest: config.digest(),
                catalog_digest: catalog.digest(),
            });
        }
        if let Some(b) = &mut best {
            b.history = history.clone();
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        last_model: model,
    })
}
