use super::array::{gemm_acc, gemm_nt_acc, gemm_tn_acc, log_sigmoid, sigmoid, softmax_row};
use super::params::{ParamId, ParameterStore};
use super::{Array, AutodiffError, LOG_FLOOR};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive set exposed through [`Tape::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Multiply,
    Exp,
    Log,
    Sigmoid,
    SoftmaxLastAxis,
    GatherRows(Vec<usize>),
    Concatenate,
    Relu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log { x: Var, floor: f64 },
    Sigmoid(Var),
    LogSigmoid(Var),
    Softmax(Var),
    Relu(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    Concat(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array,
    op: Op,
}

/// Ordered record of primitive applications. Records are appended in
/// construction order, which is a topological order by construction.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every tape node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`, `None` if `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zeros if unreachable.
    pub fn wrt_or_zeros(&self, tape: &Tape, v: Var) -> Array {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(tape.value(v).shape()))
    }

    /// Adds every parameter-leaf gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParameterStore) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.grad_mut(id).add_assign(g);
            }
        }
    }

    /// Parameter gradients in tape order, for callers that reduce them manually.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Array)> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_ref().map(|g| (id, g)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-parameter leaf (input or constant).
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Array::scalar(value))
    }

    /// Records a leaf bound to a store parameter; its gradient is routed
    /// back by [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id) })
    }

    /// Copies `v` into a fresh leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn apply(&mut self, kind: &Primitive, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let arity = match kind {
            Primitive::MatMul | Primitive::Add | Primitive::Multiply => 2,
            Primitive::Concatenate => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(AutodiffError::Arity {
                op: primitive_name(kind),
                expected: arity,
                got: inputs.len(),
            });
        }
        match kind {
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Multiply => self.mul(inputs[0], inputs[1]),
            Primitive::Exp => Ok(self.exp(inputs[0])),
            Primitive::Log => self.log(inputs[0]),
            Primitive::Sigmoid => Ok(self.sigmoid(inputs[0])),
            Primitive::SoftmaxLastAxis => Ok(self.softmax(inputs[0])),
            Primitive::GatherRows(idx) => self.gather_rows(inputs[0], idx),
            Primitive::Concatenate => self.concat(inputs),
            Primitive::Relu => Ok(self.relu(inputs[0])),
        }
    }

    fn shape_err(&self, op: &'static str, vars: &[Var]) -> AutodiffError {
        AutodiffError::Shape {
            op,
            shapes: vars.iter().map(|v| self.value(*v).shape().to_vec()).collect(),
        }
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        Ok(self.push(Array::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `[m,k] x [n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(self.shape_err("matmul_nt", &[a, b]));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(av.data(), bv.data(), &mut out, m, k, n);
        Ok(self.push(Array::new(vec![m, n], out)?, Op::MatMulNt(a, b)))
    }

    fn broadcast_ok(a: &Array, b: &Array) -> bool {
        a.shape() == b.shape()
            || b.is_scalar()
            || (b.rank() == 1 && a.rank() >= 1 && b.shape()[0] == a.last_dim())
    }

    fn binary_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Array, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !Self::broadcast_ok(av, bv) {
            return Err(self.shape_err(name, &[a, b]));
        }
        let bl = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % bl]))
            .collect();
        Array::new(av.shape().to_vec(), data)
    }

    /// Elementwise sum. `b` may match `a`, be a scalar, or be a vector
    /// broadcast along the last axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.binary_broadcast("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.binary_broadcast("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.binary_broadcast("multiply", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    /// Natural log; rejects any input below [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| !(x >= LOG_FLOOR)) {
            return Err(AutodiffError::Domain {
                op: "log",
                value: bad,
            });
        }
        let out = self.value(a).map(f64::ln);
        Ok(self.push(out, Op::Log { x: a, floor: 0.0 }))
    }

    /// `log(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|x| x.max(floor).ln());
        self.push(out, Op::Log { x: a, floor })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Fused `log(sigmoid(x))`, finite for all finite `x`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(log_sigmoid);
        self.push(out, Op::LogSigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.last_dim();
        let mut out = vec![0.0; av.len()];
        if c > 0 {
            for (src, dst) in av.data().chunks(c).zip(out.chunks_mut(c)) {
                softmax_row(src, dst);
            }
        }
        let shape = av.shape().to_vec();
        self.push(Array::new(shape, out).expect("same shape"), Op::Softmax(a))
    }

    /// Selects rows of a rank-2 array.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(self.shape_err("gather_rows", &[a]));
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(AutodiffError::Index { op: "gather_rows", index: bad, len: r });
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(av.row(i));
        }
        let value = Array::new(vec![idx.len(), c], out)?;
        Ok(self.push(value, Op::GatherRows { x: a, idx: idx.to_vec() }))
    }

    /// Selects flat elements; output is a vector of `idx.len()` values.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.len()) {
            return Err(AutodiffError::Index { op: "gather", index: bad, len: av.len() });
        }
        let out: Vec<f64> = idx.iter().map(|&i| av.data()[i]).collect();
        Ok(self.push(Array::vector(out), Op::Gather { x: a, idx: idx.to_vec() }))
    }

    /// Stacks rank-2 inputs along rows, or joins rank-0/1 inputs end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::Shape { op: "concatenate", shapes: Vec::new() });
        }
        let first = self.value(parts[0]);
        let value = if first.rank() == 2 {
            let c = first.shape()[1];
            let mut rows = 0;
            let mut data = Vec::new();
            for &p in parts {
                let pv = self.value(p);
                if pv.rank() != 2 || pv.shape()[1] != c {
                    return Err(self.shape_err("concatenate", parts));
                }
                rows += pv.shape()[0];
                data.extend_from_slice(pv.data());
            }
            Array::new(vec![rows, c], data)?
        } else {
            let mut data = Vec::new();
            for &p in parts {
                let pv = self.value(p);
                if pv.rank() > 1 {
                    return Err(self.shape_err("concatenate", parts));
                }
                data.extend_from_slice(pv.data());
            }
            Array::vector(data)
        };
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(self.shape_err("transpose", &[a]));
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av.data()[i * c + j];
            }
        }
        Ok(self.push(Array::new(vec![c, r], out)?, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        if shape.iter().product::<usize>() != av.len() {
            return Err(self.shape_err("reshape", &[a]));
        }
        let value = Array::new(shape.to_vec(), av.data().to_vec())?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Array::scalar(s), Op::Sum(a))
    }

    /// Reverse sweep from a scalar output. Visits each record at most once,
    /// accumulating (never overwriting) contributions.
    pub fn backward(&self, output: Var) -> Result<Gradients, AutodiffError> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(AutodiffError::NotScalar {
                shape: out.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Array>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Array::full(out.shape(), 1.0));
        let mut params = Vec::new();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(id) = param {
                        params.push((*id, i));
                    }
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let mut ga = vec![0.0; m * k];
                    gemm_nt_acc(g.data(), bv.data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; k * n];
                    gemm_tn_acc(av.data(), g.data(), &mut gb, m, k, n);
                    acc(&mut grads, *a, Array::new(vec![m, k], ga)?);
                    acc(&mut grads, *b, Array::new(vec![k, n], gb)?);
                }
                Op::MatMulNt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                    let mut ga = vec![0.0; m * k];
                    gemm_acc(g.data(), bv.data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; n * k];
                    gemm_tn_acc(g.data(), av.data(), &mut gb, m, n, k);
                    acc(&mut grads, *a, Array::new(vec![m, k], ga)?);
                    acc(&mut grads, *b, Array::new(vec![n, k], gb)?);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let gb = reduce_broadcast(&g, self.value(*b), |x| sign * x);
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let bl = bv.len();
                    let ga: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * bv.data()[i % bl])
                        .collect();
                    let prod: Vec<f64> = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    let gb = reduce_broadcast(&Array::new(g.shape().to_vec(), prod)?, bv, |x| x);
                    acc(&mut grads, *a, Array::new(av.shape().to_vec(), ga)?);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, g.map(|x| x * c));
                }
                Op::Exp(a) => {
                    acc(&mut grads, *a, zip_map(&g, &node.value, |gi, y| gi * y));
                }
                Op::Log { x, floor } => {
                    let floor = *floor;
                    let gx = zip_map(&g, self.value(*x), |gi, xi| if xi < floor { 0.0 } else { gi / xi });
                    acc(&mut grads, *x, gx);
                }
                Op::Sigmoid(a) => {
                    acc(&mut grads, *a, zip_map(&g, &node.value, |gi, s| gi * s * (1.0 - s)));
                }
                Op::LogSigmoid(a) => {
                    acc(&mut grads, *a, zip_map(&g, self.value(*a), |gi, x| gi * sigmoid(-x)));
                }
                Op::Relu(a) => {
                    acc(&mut grads, *a, zip_map(&g, self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 }));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let c = y.last_dim();
                    let mut ga = vec![0.0; y.len()];
                    if c > 0 {
                        for ((yr, gr), out) in y.data().chunks(c).zip(g.data().chunks(c)).zip(ga.chunks_mut(c)) {
                            let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for ((o, &p), &q) in out.iter_mut().zip(yr).zip(gr) {
                                *o = p * (q - inner);
                            }
                        }
                    }
                    acc(&mut grads, *a, Array::new(y.shape().to_vec(), ga)?);
                }
                Op::GatherRows { x, idx } => {
                    let xv = self.value(*x);
                    let c = xv.shape()[1];
                    let mut gx = Array::zeros(xv.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &g.data()[r * c..(r + 1) * c];
                        for (d, s) in gx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Gather { x, idx } => {
                    let mut gx = Array::zeros(self.value(*x).shape());
                    for (r, &i) in idx.iter().enumerate() {
                        gx.data_mut()[i] += g.data()[r];
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let n = pv.len();
                        let part = Array::new(pv.shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                        offset += n;
                        acc(&mut grads, p, part);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (g.shape()[0], g.shape()[1]);
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j * r + i] = g.data()[i * c + j];
                        }
                    }
                    acc(&mut grads, *a, Array::new(vec![c, r], out)?);
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, Array::new(shape, g.into_data())?);
                }
                Op::Sum(a) => {
                    let v = g.item();
                    acc(&mut grads, *a, Array::full(self.value(*a).shape(), v));
                }
            }
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }
}

fn acc(grads: &mut [Option<Array>], v: Var, g: Array) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(g: &Array, other: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Array::new(g.shape().to_vec(), data).expect("same shape")
}

/// Sums a full-shape gradient back down to the broadcast operand's shape.
fn reduce_broadcast(g: &Array, target: &Array, f: impl Fn(f64) -> f64) -> Array {
    if g.shape() == target.shape() {
        return g.map(f);
    }
    let tl = target.len();
    let mut out = vec![0.0; tl];
    for (i, &gi) in g.data().iter().enumerate() {
        out[i % tl] += gi;
    }
    for o in &mut out {
        *o = f(*o);
    }
    Array::new(target.shape().to_vec(), out).expect("target shape")
}

fn primitive_name(kind: &Primitive) -> &'static str {
    match kind {
        Primitive::MatMul => "matmul",
        Primitive::Add => "add",
        Primitive::Multiply => "multiply",
        Primitive::Exp => "exponential",
        Primitive::Log => "logarithm",
        Primitive::Sigmoid => "sigmoid",
        Primitive::SoftmaxLastAxis => "softmax",
        Primitive::GatherRows(_) => "gather_rows",
        Primitive::Concatenate => "concatenate",
        Primitive::Relu => "rectify",
    }
}
