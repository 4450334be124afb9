use std::sync::Arc;

use super::{BlockIds, FfnIds, ModelError, SequenceModel};
use crate::autodiff::{dot, sigmoid, softmax_row, ParameterStore};
use crate::catalog::TokenId;

#[derive(Debug, Clone, Default)]
struct Rows {
    keys: Vec<f64>,
    values: Vec<f64>,
    n: usize,
}

#[derive(Debug, Clone)]
enum BlockCache {
    /// Keys/values of every consumed position: the prompt part is shared
    /// between all continuations, later rows are owned.
    Attention { shared: Arc<Rows>, own: Rows },
    Recurrent { h: Arc<[f64]> },
}

/// Model state after consuming a context, plus the next-token distribution.
///
/// Extending a state recomputes only the new row, so every continuation of
/// a prompt reuses the prompt's per-position keys and values. Each row is
/// computed by the same routine whether reached through `prefill` or
/// `extend`, so results are bit-identical either way.
#[derive(Debug, Clone)]
pub struct DecodeState {
    len: usize,
    blocks: Vec<BlockCache>,
    probs: Arc<[f64]>,
}

fn vecmat(x: &[f64], w: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (p, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(&w[p * n..(p + 1) * n]) {
            *o += xv * wv;
        }
    }
    out
}

fn add_in_place(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += *b;
    }
}

fn ffn(store: &ParameterStore, ids: &FfnIds, x: &mut [f64]) {
    let hdim = store.value(ids.b1).len();
    let d = x.len();
    let mut h = vecmat(x, store.value(ids.w1).data(), hdim);
    add_in_place(&mut h, store.value(ids.b1).data());
    for v in &mut h {
        *v = v.max(0.0);
    }
    let mut f = vecmat(&h, store.value(ids.w2).data(), d);
    add_in_place(&mut f, store.value(ids.b2).data());
    add_in_place(x, &f);
}

impl DecodeState {
    fn empty(model: &SequenceModel) -> Self {
        let d = model.config.embed_dim;
        let blocks = model
            .ids
            .blocks
            .iter()
            .map(|b| match b {
                BlockIds::Attention { .. } => BlockCache::Attention {
                    shared: Arc::new(Rows::default()),
                    own: Rows::default(),
                },
                BlockIds::Recurrent { .. } => BlockCache::Recurrent {
                    h: vec![0.0; d].into(),
                },
            })
            .collect();
        Self {
            len: 0,
            blocks,
            probs: Arc::from(Vec::new()),
        }
    }

    pub(super) fn prefill(model: &SequenceModel, context: &[TokenId]) -> Result<Self, ModelError> {
        model.check_context(context)?;
        let mut state = Self::empty(model);
        let mut last = Vec::new();
        for &tok in context {
            last = state.advance(model, tok);
        }
        for b in &mut state.blocks {
            if let BlockCache::Attention { shared, own } = b {
                *shared = Arc::new(std::mem::take(own));
            }
        }
        state.probs = output(model, &last).into();
        Ok(state)
    }

    pub(super) fn extend(&self, model: &SequenceModel, token: TokenId) -> Result<Self, ModelError> {
        if self.len + 1 > model.config.max_context {
            return Err(ModelError::ContextTooLong {
                len: self.len + 1,
                max: model.config.max_context,
            });
        }
        model.check_tokens(&[token])?;
        let mut next = self.clone();
        let x = next.advance(model, token);
        next.probs = output(model, &x).into();
        Ok(next)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Consumes one token and returns the final residual-stream row.
    fn advance(&mut self, model: &SequenceModel, token: TokenId) -> Vec<f64> {
        let store = &model.store;
        let d = model.config.embed_dim;
        let pos = self.len;
        let mut x = store.value(model.ids.tok_emb).row(token as usize).to_vec();
        for (ids, cache) in model.ids.blocks.iter().zip(&mut self.blocks) {
            match (ids, cache) {
                (
                    BlockIds::Attention {
                        wq,
                        wk,
                        wv,
                        wo,
                        rel_bias,
                        ffn: f,
                    },
                    BlockCache::Attention { shared, own },
                ) => {
                    let q = vecmat(&x, store.value(*wq).data(), d);
                    own.keys.extend(vecmat(&x, store.value(*wk).data(), d));
                    own.values.extend(vecmat(&x, store.value(*wv).data(), d));
                    own.n += 1;
                    let n = shared.n + own.n;
                    let scale = 1.0 / (d as f64).sqrt();
                    let bias = store.value(*rel_bias).data();
                    let key = |j: usize| -> &[f64] {
                        if j < shared.n {
                            &shared.keys[j * d..(j + 1) * d]
                        } else {
                            let j = j - shared.n;
                            &own.keys[j * d..(j + 1) * d]
                        }
                    };
                    let scores: Vec<f64> = (0..n)
                        .map(|j| dot(&q, key(j)) * scale + bias[pos - j])
                        .collect();
                    let mut attn = vec![0.0; n];
                    softmax_row(&scores, &mut attn);
                    let mut ctx = vec![0.0; d];
                    for (j, &a) in attn.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let v = if j < shared.n {
                            &shared.values[j * d..(j + 1) * d]
                        } else {
                            let j = j - shared.n;
                            &own.values[j * d..(j + 1) * d]
                        };
                        for (c, &vv) in ctx.iter_mut().zip(v) {
                            *c += a * vv;
                        }
                    }
                    let mixed = vecmat(&ctx, store.value(*wo).data(), d);
                    add_in_place(&mut x, &mixed);
                    ffn(store, f, &mut x);
                }
                (
                    BlockIds::Recurrent {
                        wz,
                        uz,
                        bz,
                        wr,
                        ur,
                        br,
                        wh,
                        uh,
                        bh,
                        ffn: f,
                    },
                    BlockCache::Recurrent { h },
                ) => {
                    let gate = |w, u, b, hin: &[f64]| -> Vec<f64> {
                        let mut s = vecmat(&x, store.value(w).data(), d);
                        add_in_place(&mut s, &vecmat(hin, store.value(u).data(), d));
                        add_in_place(&mut s, store.value(b).data());
                        s
                    };
                    let z: Vec<f64> = gate(*wz, *uz, *bz, h).into_iter().map(sigmoid).collect();
                    let r: Vec<f64> = gate(*wr, *ur, *br, h).into_iter().map(sigmoid).collect();
                    let rh: Vec<f64> = r.iter().zip(h.iter()).map(|(a, b)| a * b).collect();
                    let cand: Vec<f64> = gate(*wh, *uh, *bh, &rh)
                        .into_iter()
                        .map(|y| 2.0 * sigmoid(2.0 * y) + -1.0)
                        .collect();
                    let new_h: Vec<f64> = h
                        .iter()
                        .zip(&z)
                        .zip(&cand)
                        .map(|((&hp, &zz), &c)| hp + zz * (c - hp))
                        .collect();
                    add_in_place(&mut x, &new_h);
                    *h = new_h.into();
                    ffn(store, f, &mut x);
                }
                _ => unreachable!("cache kind follows block kind"),
            }
        }
        self.len += 1;
        x
    }
}

fn output(model: &SequenceModel, x: &[f64]) -> Vec<f64> {
    let v = model.config.vocab_size;
    let mut logits = vecmat(x, model.store.value(model.ids.out_w).data(), v);
    add_in_place(&mut logits, model.store.value(model.ids.out_b).data());
    let mut p = vec![0.0; v];
    softmax_row(&logits, &mut p);
    p
}
