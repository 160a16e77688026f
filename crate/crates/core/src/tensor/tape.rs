use std::collections::HashMap;

use super::{check_shape, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-defined differentiable operation.
///
/// `backward` receives zeroed, input-shaped buffers in `grads_in` and adds the
/// vector-Jacobian product into them.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&[T]], shapes: &[&[usize]]) -> Result<(Vec<usize>, Vec<T>)>;

    fn backward(&self, inputs: &[&[T]], output: &[T], grad_out: &[T], grads_in: &mut [Vec<T>]);
}

enum Value<T> {
    Owned(Vec<T>),
    Param(ParamId),
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Softmax { x: Var, axis: usize },
    MaskedSoftmax(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    RowScale(Var, Var),
    SliceCols { x: Var, start: usize },
    Sum(Var),
    NllSum { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T> },
    Custom { op: Box<dyn CustomOp<T>>, inputs: Vec<Var> },
}

struct Node<T: Real> {
    shape: Vec<usize>,
    value: Value<T>,
    op: Op<T>,
}

/// Records operations for one forward pass and replays them in reverse.
///
/// Parameters are read in place from the borrowed [`ParamStore`]; each
/// parameter is materialised once per tape no matter how often it is used.
pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    adjoints: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Adjoint of any recorded value; `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.adjoints.get(v.0).and_then(|a| a.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, node)| self.adjoints[node].as_deref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params
            .iter()
            .filter_map(|&(p, node)| self.adjoints[node].as_deref().map(|g| (p, g)))
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

// out[m,n] += a[m,k] * b[k,n]
fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

// out[m,n] += a[m,k] * b[n,k]^T
fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

// out[k,n] += a[m,k]^T * b[m,n]
fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            consumed: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Discards every node recorded at or after `mark` (a previous `len()`).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.param_vars.retain(|_, v| v.0 < mark);
    }

    pub fn value(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(p) => self.params.get(*p).data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Detached copy of a recorded value.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("recorded shapes are valid")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(Error::contract("tape already differentiated; record a new pass"));
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn constant_from(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.push(t.shape().to_vec(), t.into_data(), Op::Leaf)
    }

    pub fn zeros(&mut self, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        self.push(shape, vec![T::zero(); n], Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        if self.consumed {
            return Err(Error::contract("tape already differentiated; record a new pass"));
        }
        let shape = self.params.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Param(id),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err(op, s, &[0, 0])),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the product used with `[out×in]` weight matrices.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(dim_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(vec![m, n], out, Op::MatMulNt(a, b))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<Var> {
        self.same_shape(a, b, op)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, rec)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + bias`, with `bias` broadcast along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(a).last().expect("rank >= 1");
        let bias_shape = self.shape(bias);
        let bias_ok = bias_shape.last() == Some(&n) && bias_shape.iter().product::<usize>() == n;
        if !bias_ok {
            return Err(dim_err("add_bias", self.shape(a), bias_shape));
        }
        let b = self.value(bias);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Tanh(a))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(dim_err("concat", &base, &[axis]));
        }
        let mut joined = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(dim_err("concat", &base, s));
            }
            joined += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * joined * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = joined;
        self.push(shape, out, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    /// Normalised exponential along `axis`, computed after subtracting the maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("softmax", &shape, &[axis]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xs = self.value(x);
        let mut out = vec![T::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| xs[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..n {
                    let e = (xs[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[idx(k)] = out[idx(k)] / total;
                }
            }
        }
        self.push(shape, out, Op::Softmax { x, axis })
    }

    /// Softmax along the last axis over entries where `mask` is true; masked
    /// entries come out exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let xs = self.value(x);
        if mask.len() != xs.len() {
            return Err(dim_err("masked_softmax", &shape, &[mask.len()]));
        }
        let n = *shape.last().expect("rank >= 1");
        let mut out = vec![T::zero(); xs.len()];
        for (r, (row, mrow)) in xs.chunks(n).zip(mask.chunks(n)).enumerate() {
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(Error::contract(format!("masked_softmax: row {r} is fully masked")));
            }
            let orow = &mut out[r * n..(r + 1) * n];
            let mut total = T::zero();
            for ((o, &v), &m) in orow.iter_mut().zip(row).zip(mrow) {
                if m {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            orow.iter_mut().for_each(|o| *o = *o / total);
        }
        self.push(shape, out, Op::MaskedSoftmax(x))
    }

    /// Rows of `table[v×d]` at `ids`, giving `[len(ids)×d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                what: "embedding table",
                index: bad,
                len: v,
            });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        self.push(vec![ids.len(), d], out, Op::GatherRows { table, ids: ids.to_vec() })
    }

    /// Scales row `i` of `x[r×c]` by `w[i]`, with `w` shaped `[r×1]`.
    pub fn row_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "row_scale")?;
        if self.shape(w) != [r, 1] {
            return Err(dim_err("row_scale", self.shape(x), self.shape(w)));
        }
        let ws = self.value(w);
        let out = self
            .value(x)
            .chunks(c)
            .zip(ws)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
            .collect();
        self.push(vec![r, c], out, Op::RowScale(x, w))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(dim_err("slice_cols", &[r, c], &[start, len]));
        }
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        self.push(vec![r, len], out, Op::SliceCols { x, start })
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![total], Op::Sum(x))
    }

    /// `Σ_i −log softmax(logits_i)[target_i]` over rows with a target.
    ///
    /// Rows whose target is `None` contribute nothing (padding).
    pub fn nll_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, v) = self.matrix_dims(logits, "nll_sum")?;
        if targets.len() != r {
            return Err(dim_err("nll_sum", &[r, v], &[targets.len()]));
        }
        let xs = self.value(logits);
        let mut probs = vec![T::zero(); r * v];
        let mut total = T::zero();
        for (i, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= v {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: t,
                    len: v,
                });
            }
            let row = &xs[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            probs[i * v..(i + 1) * v].iter_mut().for_each(|p| *p = *p / z);
            total += z.ln() + max - row[t];
        }
        self.push(
            vec![1],
            vec![total],
            Op::NllSum {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&[T]> = inputs.iter().map(|&v| self.value(v)).collect();
        let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
        let (shape, out) = op.forward(&values, &shapes)?;
        if check_shape(&shape)? != out.len() {
            return Err(dim_err(op.name(), &shape, &[out.len()]));
        }
        self.push(
            shape,
            out,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
        )
    }

    /// Reverse pass from a one-element `loss`. A tape supports exactly one.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::contract("backward already run on this tape"));
        }
        if self.shape(loss).iter().product::<usize>() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.backprop_node(i, &g, &mut adj);
            adj[i] = Some(g);
        }

        let params = self
            .param_vars
            .iter()
            .map(|(&p, &v)| (p, v.0))
            .collect::<Vec<_>>();
        let mut params = params;
        params.sort();
        Ok(Gradients { adjoints: adj, params })
    }

    fn len_of(&self, v: Var) -> usize {
        self.shape(v).iter().product()
    }

    fn backprop_node(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = self.value(Var(i));
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(&mut adj[a.0], m * k, |da| gemm_nt(g, bv, da, m, n, k));
                accumulate(&mut adj[b.0], k * n, |db| gemm_tn(av, g, db, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(&mut adj[a.0], m * k, |da| gemm_nn(g, bv, da, m, n, k));
                accumulate(&mut adj[b.0], n * k, |db| gemm_tn(g, av, db, m, n, k));
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    accumulate(&mut adj[v.0], g.len(), |d| {
                        d.iter_mut().zip(g).for_each(|(d, &x)| *d += x)
                    });
                }
            }
            Op::Sub(a, b) => {
                accumulate(&mut adj[a.0], g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(d, &x)| *d += x)
                });
                accumulate(&mut adj[b.0], g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(d, &x)| *d -= x)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(&mut adj[a.0], g.len(), |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                });
                accumulate(&mut adj[b.0], g.len(), |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                });
            }
            Op::AddBias(a, bias) => {
                accumulate(&mut adj[a.0], g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(d, &x)| *d += x)
                });
                let n = self.len_of(*bias);
                accumulate(&mut adj[bias.0], n, |d| {
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                    }
                });
            }
            Op::Scale(a, c) => {
                accumulate(&mut adj[a.0], g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *c)
                });
            }
            Op::Sigmoid(a) => {
                accumulate(&mut adj[a.0], g.len(), |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(g).zip(out) {
                        *d += x * y * (T::one() - y);
                    }
                });
            }
            Op::Tanh(a) => {
                accumulate(&mut adj[a.0], g.len(), |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(g).zip(out) {
                        *d += x * (T::one() - y * y);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let block = self.shape(v)[*axis] * inner;
                    accumulate(&mut adj[v.0], outer * block, |d| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + block];
                            d[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &x)| *d += x);
                        }
                    });
                    offset += block;
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                accumulate(&mut adj[x.0], g.len(), |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let dot: T = (0..n).map(|k| g[idx(k)] * out[idx(k)]).sum();
                            for k in 0..n {
                                d[idx(k)] += out[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let n = *node.shape.last().expect("rank >= 1");
                accumulate(&mut adj[x.0], g.len(), |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gk), &yk) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yk * (gk - dot);
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = self.shape(*table)[1];
                let len = self.len_of(*table);
                accumulate(&mut adj[table.0], len, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, &x)| *a += x);
                    }
                });
            }
            Op::RowScale(x, w) => {
                let c = node.shape[1];
                let (xv, wv) = (self.value(*x), self.value(*w));
                accumulate(&mut adj[x.0], g.len(), |d| {
                    for ((drow, grow), &s) in d.chunks_mut(c).zip(g.chunks(c)).zip(wv) {
                        drow.iter_mut().zip(grow).for_each(|(d, &x)| *d += x * s);
                    }
                });
                accumulate(&mut adj[w.0], wv.len(), |dw| {
                    for ((dw, grow), xrow) in dw.iter_mut().zip(g.chunks(c)).zip(xv.chunks(c)) {
                        *dw += grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>();
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let len = node.shape[1];
                let c = self.shape(*x)[1];
                accumulate(&mut adj[x.0], self.len_of(*x), |d| {
                    for (drow, grow) in d.chunks_mut(c).zip(g.chunks(len)) {
                        drow[*start..start + len]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, &x)| *d += x);
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                accumulate(&mut adj[x.0], self.len_of(*x), |d| d.iter_mut().for_each(|d| *d += s));
            }
            Op::NllSum { logits, targets, probs } => {
                let v = self.shape(*logits)[1];
                let s = g[0];
                accumulate(&mut adj[logits.0], probs.len(), |d| {
                    for (i, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        let drow = &mut d[i * v..(i + 1) * v];
                        for (d, &p) in drow.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                            *d += s * p;
                        }
                        drow[t] -= s;
                    }
                });
            }
            Op::Custom { op, inputs } => {
                let values: Vec<&[T]> = inputs.iter().map(|&v| self.value(v)).collect();
                let mut grads: Vec<Vec<T>> = inputs
                    .iter()
                    .map(|&v| vec![T::zero(); self.len_of(v)])
                    .collect();
                op.backward(&values, out, g, &mut grads);
                for (&v, gi) in inputs.iter().zip(grads) {
                    accumulate(&mut adj[v.0], gi.len(), |d| {
                        d.iter_mut().zip(&gi).for_each(|(d, &x)| *d += x)
                    });
                }
            }
        }
    }
}
