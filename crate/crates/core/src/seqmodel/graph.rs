use super::{BlockIds, FfnIds, ModelError, SequenceModel};
use crate::autodiff::{Array, ParamId, Tape, Var};
use crate::catalog::{TokenId, EOS};

/// Additive mask for future positions. Finite so every tape value stays
/// finite; `exp` of it underflows to exactly zero.
const MASK: f64 = -1e300;

/// Every parameter of a model loaded onto one tape.
#[derive(Debug, Clone)]
pub struct ModelVars {
    vars: Vec<Var>,
}

impl ModelVars {
    fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// Per-step next-token distributions of one instance: row `t` of `probs`
/// (shape `[T, V]`) is `P(· | x, y_<t)`.
#[derive(Debug, Clone)]
pub struct StepDistributions {
    pub probs: Var,
    pub target: Vec<TokenId>,
}

impl StepDistributions {
    pub fn steps(&self) -> usize {
        self.target.len()
    }
}

fn ffn(tape: &mut Tape, v: &ModelVars, ids: &FfnIds, x: Var) -> Result<Var, ModelError> {
    let h = tape.matmul(x, v.get(ids.w1))?;
    let h = tape.add(h, v.get(ids.b1))?;
    let h = tape.relu(h);
    let f = tape.matmul(h, v.get(ids.w2))?;
    let f = tape.add(f, v.get(ids.b2))?;
    Ok(tape.add(x, f)?)
}

impl SequenceModel {
    pub fn vars(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            vars: self.store.ids().map(|id| tape.param(&self.store, id)).collect(),
        }
    }

    /// Records the teacher-forced forward pass of `(prompt, target)` and
    /// returns the step distributions. `target` must end with EOS.
    pub fn forward_instance(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        prompt: &[TokenId],
        target: &[TokenId],
    ) -> Result<StepDistributions, ModelError> {
        if target.last() != Some(&EOS) {
            return Err(ModelError::TargetWithoutEos);
        }
        let mut seq = prompt.to_vec();
        seq.extend_from_slice(&target[..target.len() - 1]);
        self.check_context(prompt)?;
        self.check_context(&seq)?;
        self.check_tokens(target)?;
        let d = self.config.embed_dim;
        let len = seq.len();
        let queries: Vec<usize> = (prompt.len() - 1..len).collect();
        let idx: Vec<usize> = seq.iter().map(|&t| t as usize).collect();
        let mut x = tape.gather_rows(vars.get(self.ids.tok_emb), &idx)?;
        let nb = self.ids.blocks.len();
        for (b, block) in self.ids.blocks.iter().enumerate() {
            let last = b + 1 == nb;
            match block {
                BlockIds::Attention {
                    wq,
                    wk,
                    wv,
                    wo,
                    rel_bias,
                    ffn: f,
                } => {
                    let qpos: Vec<usize> = if last { queries.clone() } else { (0..len).collect() };
                    let k = tape.matmul(x, vars.get(*wk))?;
                    let v = tape.matmul(x, vars.get(*wv))?;
                    let xq = if last { tape.gather_rows(x, &qpos)? } else { x };
                    let q = tape.matmul(xq, vars.get(*wq))?;
                    let s = tape.matmul_nt(q, k)?;
                    let s = tape.scale(s, 1.0 / (d as f64).sqrt());
                    let mut bias_idx = Vec::with_capacity(qpos.len() * len);
                    let mut mask = Vec::with_capacity(qpos.len() * len);
                    for &i in &qpos {
                        for j in 0..len {
                            bias_idx.push(if j <= i { i - j } else { 0 });
                            mask.push(if j <= i { 0.0 } else { MASK });
                        }
                    }
                    let bias = tape.gather(vars.get(*rel_bias), &bias_idx)?;
                    let bias = tape.reshape(bias, &[qpos.len(), len])?;
                    let s = tape.add(s, bias)?;
                    let mask = tape.leaf(Array::new(vec![qpos.len(), len], mask)?);
                    let s = tape.add(s, mask)?;
                    let a = tape.softmax(s);
                    let c = tape.matmul(a, v)?;
                    let mixed = tape.matmul(c, vars.get(*wo))?;
                    let xq = tape.add(xq, mixed)?;
                    x = ffn(tape, vars, f, xq)?;
                }
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
                } => {
                    let xz = tape.matmul(x, vars.get(*wz))?;
                    let xr = tape.matmul(x, vars.get(*wr))?;
                    let xh = tape.matmul(x, vars.get(*wh))?;
                    let mut h = tape.leaf(Array::zeros(&[1, d]));
                    let minus_one = tape.scalar(-1.0);
                    let mut outs = Vec::with_capacity(len);
                    for i in 0..len {
                        let gate = |tape: &mut Tape, xw: Var, u: ParamId, bias: ParamId, hin: Var| {
                            let a = tape.gather_rows(xw, &[i])?;
                            let hu = tape.matmul(hin, vars.get(u))?;
                            let s = tape.add(a, hu)?;
                            tape.add(s, vars.get(bias))
                        };
                        let z = gate(tape, xz, *uz, *bz, h)?;
                        let z = tape.sigmoid(z);
                        let r = gate(tape, xr, *ur, *br, h)?;
                        let r = tape.sigmoid(r);
                        let rh = tape.mul(r, h)?;
                        let y = gate(tape, xh, *uh, *bh, rh)?;
                        let y = tape.scale(y, 2.0);
                        let y = tape.sigmoid(y);
                        let y = tape.scale(y, 2.0);
                        let cand = tape.add(y, minus_one)?;
                        let diff = tape.sub(cand, h)?;
                        let step = tape.mul(z, diff)?;
                        h = tape.add(h, step)?;
                        let xi = tape.gather_rows(x, &[i])?;
                        outs.push(tape.add(xi, h)?);
                    }
                    let mut y = tape.concat(&outs)?;
                    if last {
                        y = tape.gather_rows(y, &queries)?;
                    }
                    x = ffn(tape, vars, f, y)?;
                }
            }
        }
        if nb == 0 {
            x = tape.gather_rows(x, &queries)?;
        }
        let logits = tape.matmul(x, vars.get(self.ids.out_w))?;
        let logits = tape.add(logits, vars.get(self.ids.out_b))?;
        Ok(StepDistributions {
            probs: tape.softmax(logits),
            target: target.to_vec(),
        })
    }

    /// Forward pass for a ragged batch; each instance keeps its own length.
    pub fn batch_forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        instances: &[(&[TokenId], &[TokenId])],
    ) -> Result<Vec<StepDistributions>, ModelError> {
        instances
            .iter()
            .map(|(p, t)| self.forward_instance(tape, vars, p, t))
            .collect()
    }
}
