//! Loss values against closed-form oracles and gradients against finite
//! differences.

mod common;

use bearlab::autodiff::{grad_check, grad_check_store, relative_error, Array, AutodiffError, Tape, Var};
use bearlab::catalog::TokenId;
use bearlab::decode::{beam_search, DecodeConfig};
use bearlab::objectives::{
    bear_dpo_regularizer, bear_loss, bear_regularizer, necessary_condition, prefix_margins_from_trace,
    prefix_objective_reference, sft_loss, step_masks, HyperParams, ThresholdGradient, ThresholdSupport,
};
use bearlab::seqmodel::StepDistributions;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 50;
const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;

struct Case {
    rows: usize,
    vocab: usize,
    logits: Vec<f64>,
    target: Vec<TokenId>,
    masks: Option<Vec<Vec<TokenId>>>,
    hp: HyperParams,
}

fn random_case(rng: &mut ChaCha8Rng, gradient: ThresholdGradient) -> Case {
    let rows = rng.gen_range(1..6);
    let vocab = rng.gen_range(3..9);
    let logits = common::random_logits(rng, rows, vocab);
    let target: Vec<TokenId> = (0..rows).map(|_| rng.gen_range(0..vocab) as TokenId).collect();
    let masks = rng.gen_bool(0.5).then(|| {
        target
            .iter()
            .map(|&y| {
                let mut m: Vec<TokenId> = (0..vocab as TokenId).filter(|_| rng.gen_bool(0.5)).collect();
                if !m.contains(&y) {
                    m.push(y);
                }
                m
            })
            .collect()
    });
    let hp = HyperParams {
        lambda: rng.gen_range(0.1..5.0),
        xi: rng.gen_range(0.25..3.0),
        beam_width: rng.gen_range(1..vocab),
        gradient,
        support: ThresholdSupport::TrieValid,
    };
    Case { rows, vocab, logits, target, masks, hp }
}

impl Case {
    fn point(&self) -> Array {
        Array::matrix(self.rows, self.vocab, self.logits.clone()).unwrap()
    }

    fn steps(&self, t: &mut Tape, logits: Var) -> StepDistributions {
        StepDistributions { probs: t.softmax(logits), target: self.target.clone() }
    }

    fn probs(&self) -> Vec<Vec<f64>> {
        self.logits.chunks(self.vocab).map(common::softmax).collect()
    }

    fn valid(&self, t: usize) -> Vec<TokenId> {
        match &self.masks {
            Some(m) => m[t].clone(),
            None => (0..self.vocab as TokenId).collect(),
        }
    }

    /// B-th largest valid probability, or the smallest if fewer are valid.
    fn beta(&self, probs: &[f64], t: usize) -> f64 {
        let mut ps: Vec<f64> = self.valid(t).iter().map(|&k| probs[k as usize]).collect();
        ps.sort_by(|a, b| b.total_cmp(a));
        ps[self.hp.beam_width.min(ps.len()) - 1]
    }

    fn sft_oracle(&self) -> f64 {
        -self.probs().iter().zip(&self.target).map(|(p, &y)| p[y as usize].ln()).sum::<f64>()
    }

    fn reg_oracle(&self, frozen_beta: Option<&[f64]>) -> f64 {
        self.probs()
            .iter()
            .enumerate()
            .map(|(t, p)| {
                let beta = frozen_beta.map_or_else(|| self.beta(p, t), |b| b[t]);
                common::log_sigmoid((beta.ln() - p[self.target[t] as usize].ln()) / self.hp.xi)
            })
            .sum()
    }
}

/// Worst relative error of `analytic` against a five-point difference of `f`.
fn fd_error(f: &dyn Fn(&[f64]) -> f64, point: &[f64], analytic: &[f64]) -> f64 {
    let mut x = point.to_vec();
    let mut err: f64 = 0.0;
    for i in 0..x.len() {
        let o = x[i];
        let mut at = |d: f64| {
            x[i] = o + d;
            f(&x)
        };
        let numeric = (-at(2.0 * STEP) + 8.0 * at(STEP) - 8.0 * at(-STEP) + at(-2.0 * STEP)) / (12.0 * STEP);
        x[i] = o;
        err = err.max(relative_error(analytic[i], numeric));
    }
    err
}

fn worst<F: Fn(&mut ChaCha8Rng) -> f64>(f: F) -> (f64, u64) {
    let mut w = (0.0, 0);
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = f(&mut rng);
        if e > w.0 {
            w = (e, seed);
        }
    }
    w
}

#[test]
fn sft_value_and_gradient() {
    let (e, s) = worst(|rng| {
        let c = random_case(rng, ThresholdGradient::Flow);
        let mut t = Tape::new();
        let l = t.leaf(c.point());
        let steps = c.steps(&mut t, l);
        let v = sft_loss(&mut t, &steps).unwrap();
        let value_err = relative_error(t.value(v).item(), c.sft_oracle());
        let grad_err = grad_check(|t, l| { let st = c.steps(t, l); Ok(sft_loss(t, &st).unwrap()) }, &c.point(), STEP);
        value_err.max(grad_err)
    });
    assert!(e <= TOL, "seed {s}: {e}");
}

#[test]
fn regularizer_value_and_gradient() {
    let (e, s) = worst(|rng| {
        let c = random_case(rng, ThresholdGradient::Flow);
        let mut t = Tape::new();
        let l = t.leaf(c.point());
        let steps = c.steps(&mut t, l);
        let (v, _) = bear_regularizer(&mut t, &steps, &c.hp, c.masks.as_deref()).unwrap();
        let value_err = relative_error(t.value(v).item(), c.reg_oracle(None));
        let grad_err = grad_check(
            |t, l| { let st = c.steps(t, l); Ok(bear_regularizer(t, &st, &c.hp, c.masks.as_deref()).unwrap().0) },
            &c.point(),
            STEP,
        );
        value_err.max(grad_err)
    });
    assert!(e <= TOL, "seed {s}: {e}");
}

#[test]
fn detached_threshold_gradient_matches_frozen_oracle() {
    let (e, s) = worst(|rng| {
        let c = random_case(rng, ThresholdGradient::Detach);
        let frozen: Vec<f64> = c.probs().iter().enumerate().map(|(t, p)| c.beta(p, t)).collect();
        let mut t = Tape::new();
        let l = t.leaf(c.point());
        let steps = c.steps(&mut t, l);
        let (v, _) = bear_regularizer(&mut t, &steps, &c.hp, c.masks.as_deref()).unwrap();
        let analytic = t.backward(v).unwrap().wrt_or_zeros(&t, l);
        let f = |x: &[f64]| Case { logits: x.to_vec(), masks: c.masks.clone(), target: c.target.clone(), ..c }
            .reg_oracle(Some(&frozen));
        let mut err: f64 = relative_error(t.value(v).item(), c.reg_oracle(None));
        err = err.max(fd_error(&f, &c.logits, analytic.data()));
        err
    });
    assert!(e <= TOL, "seed {s}: {e}");
}

#[test]
fn bear_total_value_and_gradient() {
    let (e, s) = worst(|rng| {
        let c = random_case(rng, ThresholdGradient::Flow);
        let mut t = Tape::new();
        let l = t.leaf(c.point());
        let steps = c.steps(&mut t, l);
        let (v, b) = bear_loss(&mut t, &steps, &c.hp, c.masks.as_deref()).unwrap();
        let oracle = c.sft_oracle() + c.hp.lambda * c.reg_oracle(None);
        let value_err = relative_error(t.value(v).item(), oracle).max(relative_error(b.total, oracle));
        let grad_err = grad_check(
            |t, l| { let st = c.steps(t, l); Ok(bear_loss(t, &st, &c.hp, c.masks.as_deref()).unwrap().0) },
            &c.point(),
            STEP,
        );
        value_err.max(grad_err)
    });
    assert!(e <= TOL, "seed {s}: {e}");
}

#[test]
fn dpo_regularizer_gradient() {
    let (e, s) = worst(|rng| {
        let c = random_case(rng, ThresholdGradient::Flow);
        let n_neg = rng.gen_range(1..4);
        let negs: Vec<(Vec<f64>, Vec<TokenId>)> = (0..n_neg)
            .map(|_| {
                let rows = rng.gen_range(1..5);
                let lg = common::random_logits(rng, rows, c.vocab);
                let tg = (0..rows).map(|_| rng.gen_range(0..c.vocab) as TokenId).collect();
                (lg, tg)
            })
            .collect();
        let build = |t: &mut Tape, l: Var| -> Result<Var, AutodiffError> {
            let pos = c.steps(t, l);
            let neg: Vec<(StepDistributions, Option<Vec<Vec<TokenId>>>)> = negs
                .iter()
                .map(|(lg, tg)| {
                    let x = t.leaf(Array::matrix(tg.len(), c.vocab, lg.clone()).unwrap());
                    (StepDistributions { probs: t.softmax(x), target: tg.clone() }, None)
                })
                .collect();
            Ok(bear_dpo_regularizer(t, &pos, c.masks.as_deref(), &neg, &c.hp).unwrap())
        };
        // value: reg(pos) - sum reg(neg)
        let mut t = Tape::new();
        let l = t.leaf(c.point());
        let v = build(&mut t, l).unwrap();
        let mut oracle = c.reg_oracle(None);
        for (lg, tg) in &negs {
            let nc = Case {
                rows: tg.len(),
                vocab: c.vocab,
                logits: lg.clone(),
                target: tg.clone(),
                masks: None,
                hp: c.hp,
            };
            oracle -= nc.reg_oracle(None);
        }
        relative_error(t.value(v).item(), oracle).max(grad_check(build, &c.point(), STEP))
    });
    assert!(e <= TOL, "seed {s}: {e}");
}

/// Prefix objective with thresholds recomputed from the trace and frozen.
#[test]
fn prefix_reference_value_and_gradient() {
    let (e, s) = worst(|rng| {
        let n = rng.gen_range(3..20);
        let cat = common::random_catalog(rng, n, "abc", 4);
        let seed = rng.gen();
        let model = common::model_for(&cat, seed);
        let prompt = common::random_prompt(rng, &cat, 2);
        let item = rng.gen_range(0..cat.len());
        let target = cat.item(item).tokens.clone();
        let hp = HyperParams {
            lambda: 1.0,
            xi: rng.gen_range(0.25..3.0),
            beam_width: rng.gen_range(1..4),
            ..Default::default()
        };
        let (_, trace) =
            beam_search(&model, &prompt, &cat, &DecodeConfig::for_catalog(hp.beam_width, &cat)).unwrap();

        // model distributions along the target, as logits
        let mut t = Tape::new();
        let vars = model.vars(&mut t);
        let steps = model.forward_instance(&mut t, &vars, &prompt, &target).unwrap();
        let probs: Vec<f64> = t.value(steps.probs).data().to_vec();
        let v = cat.vocab.len();
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let case_point = Array::matrix(target.len(), v, logits.clone()).unwrap();

        // independent thresholds at the base point
        let lp: Vec<f64> = (0..target.len()).map(|i| probs[i * v + target[i] as usize].ln()).collect();
        let mut thresholds = Vec::new();
        for step in 1..=target.len() + 1 {
            let prefix = &target[..step - 1];
            let pv: f64 = lp[..step - 1].iter().sum();
            let mut scores: Vec<f64> = Vec::new();
            let mut seen = false;
            if step == 1 || trace.steps.is_empty() {
                scores.push(0.0);
                seen = prefix.is_empty();
            } else {
                let st = &trace.steps[(step - 1).min(trace.steps.len()) - 1];
                for &i in &st.survivors {
                    scores.push(st.expansions[i].log_prob);
                    seen |= st.expansions[i].tokens == prefix;
                }
            }
            if !seen {
                scores.push(pv);
            }
            scores.sort_by(|a, b| b.total_cmp(a));
            thresholds.push(scores[hp.beam_width.min(scores.len()) - 1]);
        }
        let oracle = |x: &[f64]| -> f64 {
            let rows: Vec<Vec<f64>> = x.chunks(v).map(common::softmax).collect();
            let mut prefix = 0.0;
            let mut total = 0.0;
            for (step, thr) in thresholds.iter().enumerate() {
                if step > 0 {
                    prefix += rows[step - 1][target[step - 1] as usize].ln();
                }
                total += common::log_sigmoid((thr - prefix) / hp.xi);
            }
            total
        };

        let mut t = Tape::new();
        let l = t.leaf(case_point.clone());
        let st = StepDistributions { probs: t.softmax(l), target: target.clone() };
        let out = prefix_margins_from_trace(&mut t, &st, &trace, &hp).unwrap();
        let analytic = t.backward(out).unwrap().wrt_or_zeros(&t, l);
        let mut err = relative_error(t.value(out).item(), oracle(&logits));

        // the full reference objective evaluates to the same value
        let mut t2 = Tape::new();
        let vars2 = model.vars(&mut t2);
        let cfg = DecodeConfig::for_catalog(hp.beam_width, &cat);
        let (full, _) =
            prefix_objective_reference(&mut t2, &model, &vars2, &prompt, &target, &hp, &cat, &cfg).unwrap();
        err = err.max(relative_error(t2.value(full).item(), oracle(&logits)));

        err = err.max(fd_error(&oracle, &logits, analytic.data()));
        err
    });
    assert!(e <= TOL, "seed {s}: {e}");
}

/// SFT and BEAR through the whole model, against every parameter.
#[test]
fn losses_through_model_parameters() {
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cat = common::random_catalog(&mut rng, 6, "abc", 3);
        let model = common::model_for(&cat, seed);
        let prompt = common::random_prompt(&mut rng, &cat, 1);
        let target = cat.item(rng.gen_range(0..cat.len())).tokens.clone();
        let hp = HyperParams { beam_width: 2, gradient: ThresholdGradient::Flow, ..Default::default() };
        let masks = step_masks(&cat, &target, hp.support).unwrap();
        let sft = grad_check_store(
            model.params(),
            |t, s| {
                let m = bearlab::seqmodel::SequenceModel::from_parts(model.config().clone(), s.clone()).unwrap();
                let vars = m.vars(t);
                let steps = m.forward_instance(t, &vars, &prompt, &target).unwrap();
                Ok(sft_loss(t, &steps).unwrap())
            },
            STEP,
        );
        assert!(sft <= TOL, "sft seed {seed}: {sft}");
        let bear = grad_check_store(
            model.params(),
            |t, s| {
                let m = bearlab::seqmodel::SequenceModel::from_parts(model.config().clone(), s.clone()).unwrap();
                let vars = m.vars(t);
                let steps = m.forward_instance(t, &vars, &prompt, &target).unwrap();
                Ok(bear_loss(t, &steps, &hp, masks.as_deref()).unwrap().0)
            },
            STEP,
        );
        assert!(bear <= TOL, "bear seed {seed}: {bear}");
    }
}

#[test]
fn zero_lambda_is_the_sft_variable() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c = random_case(&mut rng, ThresholdGradient::Flow);
    let hp = HyperParams { lambda: 0.0, ..c.hp };
    let mut t = Tape::new();
    let l = t.leaf(c.point());
    let steps = c.steps(&mut t, l);
    let (total, _) = bear_loss(&mut t, &steps, &hp, c.masks.as_deref()).unwrap();
    let g_total = t.backward(total).unwrap().wrt_or_zeros(&t, l);
    let mut t2 = Tape::new();
    let l2 = t2.leaf(c.point());
    let steps2 = c.steps(&mut t2, l2);
    let s = sft_loss(&mut t2, &steps2).unwrap();
    let g_sft = t2.backward(s).unwrap().wrt_or_zeros(&t2, l2);
    assert_eq!(t.value(total).item().to_bits(), t2.value(s).item().to_bits());
    assert_eq!(g_total, g_sft);
}

#[test]
fn surrogate_limit_and_midpoint() {
    let xi = 0.01;
    let mut worst: f64 = 0.0;
    for i in 0..10_000 {
        // |delta| in [0.1, 10], both signs
        let mag = 0.1 + 9.9 * (i / 2) as f64 / 4999.0;
        let delta = if i % 2 == 0 { mag } else { -mag };
        let mut t = Tape::new();
        let d = t.scalar(delta);
        let z = t.scale(d, 1.0 / xi);
        let s = t.sigmoid(z);
        let step = if delta > 0.0 { 1.0 } else { 0.0 };
        worst = worst.max((t.value(s).item() - step).abs());
    }
    assert!(worst <= 1e-4, "{worst}");
    // margin exactly zero: the positive is the threshold token
    let mut t = Tape::new();
    let p = t.leaf(Array::matrix(1, 2, vec![0.5, 0.5]).unwrap());
    let steps = StepDistributions { probs: p, target: vec![1] };
    let hp = HyperParams { xi, beam_width: 1, ..Default::default() };
    let (r, rec) = bear_regularizer(&mut t, &steps, &hp, None).unwrap();
    assert_eq!(rec[0].margin, 0.0);
    assert!((t.value(r).item() - 0.5f64.ln()).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn margin_sign_matches_condition(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_case(&mut rng, ThresholdGradient::Flow);
        let mut t = Tape::new();
        let l = t.leaf(c.point());
        let steps = c.steps(&mut t, l);
        let (_, rec) = bear_regularizer(&mut t, &steps, &c.hp, c.masks.as_deref()).unwrap();
        let (flags, all) = necessary_condition(&t, &steps, c.hp.beam_width, c.masks.as_deref()).unwrap();
        prop_assert_eq!(all, flags.iter().all(|&f| f));
        for (r, f) in rec.iter().zip(&flags) {
            prop_assert_eq!(r.satisfied, *f);
            prop_assert_eq!(r.margin > 0.0, !r.satisfied);
        }
    }

    #[test]
    fn regularizer_is_bounded_above_by_zero(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_case(&mut rng, ThresholdGradient::Flow);
        let mut t = Tape::new();
        let l = t.leaf(c.point());
        let steps = c.steps(&mut t, l);
        let (r, rec) = bear_regularizer(&mut t, &steps, &c.hp, c.masks.as_deref()).unwrap();
        prop_assert!(t.value(r).item() < 0.0);
        // violated steps contribute more than ln(1/2) each
        for s in rec.iter().filter(|s| !s.satisfied) {
            prop_assert!(common::log_sigmoid(s.margin / c.hp.xi) > 0.5f64.ln());
        }
    }
}
