use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{matmul_at_into, matmul_bt_into, matmul_into, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScalarMul { s: Var, x: Var },
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather { table: Var, ids: Vec<usize> },
    Outer(Var, Var),
    AddRowVec(Var, Var),
    MulRowVec(Var, Var),
    SumRows(Var),
    Sum(Var),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Index { x: Var, i: usize },
    CrossEntropy {
        logits: Var,
        targets: Vec<i64>,
        ignore: Option<i64>,
        probs: Vec<f64>,
        count: usize,
    },
    BceWithLogits { x: Var, targets: Vec<f64> },
    Cosine { a: Var, b: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Vec<f64>)>,
    leaves: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Vec<f64>)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    /// Gradient of a leaf created with [`Graph::input`].
    pub fn leaf(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }
}

/// A single-use tape. Operations append nodes in topological order;
/// [`Graph::backward`] consumes the tape.
///
/// Training tapes carry a seeded RNG for dropout; inference tapes treat
/// every parameter as a constant.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    track_grads: bool,
    stochastic: bool,
    rng: ChaCha8Rng,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'p> Graph<'p> {
    /// A parameterless tape where gradients are only tracked for
    /// [`Graph::input`] leaves.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            track_grads: false,
            stochastic: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Inference tape: parameters are constants, dropout is the identity.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    /// Training tape: trainable parameters receive gradients and dropout
    /// draws from an RNG seeded with `seed`.
    pub fn training(params: &'p ParamStore, seed: u64) -> Self {
        Self {
            params: Some(params),
            track_grads: true,
            stochastic: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    /// Tape that tracks gradients for parameters but never drops units.
    /// Used by gradient checks.
    pub fn differentiable(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            track_grads: true,
            ..Self::new()
        }
    }

    /// Whether dropout is active on this tape.
    pub fn is_training(&self) -> bool {
        self.stochastic
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|&v| self.req(v));
        let value = Tensor::new(shape, data).expect("op produced inconsistent tensor");
        self.push(value, rg, op)
    }

    /// A constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// A leaf whose gradient is reported by [`Gradients::leaf`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Reads a parameter onto the tape. Each parameter is copied at most
    /// once per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("tape was built without a parameter store");
        let p = store.get(id);
        let rg = self.track_grads && p.trainable;
        let v = self.push(p.value.clone(), rg, Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::invalid(format!("{op} expects a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), m, k, n, &mut out);
        Ok(self.push_op(vec![m, n], out, &[a, b], Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let d = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.push_op(vec![c, r], out, &[a], Op::Transpose(a)))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        (self.shape(a).to_vec(), out)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        (
            self.shape(a).to_vec(),
            self.data(a).iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (s, d) = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push_op(s, d, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (s, d) = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push_op(s, d, &[a, b], Op::Sub(a, b)))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (s, d) = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push_op(s, d, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (s, d) = self.map(a, |x| x * c);
        self.push_op(s, d, &[a], Op::Scale(a, c))
    }

    /// `s · x` where `s` holds a single element.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scalar_mul", self.shape(s), self.shape(x)));
        }
        let c = self.data(s)[0];
        let (shape, d) = self.map(x, |v| v * c);
        Ok(self.push_op(shape, d, &[s, x], Op::ScalarMul { s, x }))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (s, d) = self.map(a, f64::tanh);
        self.push_op(s, d, &[a], Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (s, d) = self.map(a, |x| x.max(0.0));
        self.push_op(s, d, &[a], Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (s, d) = self.map(a, sigmoid);
        self.push_op(s, d, &[a], Op::Sigmoid(a))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis { axis, shape });
        }
        let out = softmax_along(self.data(x), &shape, axis);
        Ok(self.push_op(shape, out, &[x], Op::Softmax { x, axis }))
    }

    /// Normalizes each row over the last dimension, then applies `gamma`
    /// and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = self.value(x).len() / d;
        let xs = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push_op(
            shape,
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gathers rows of `table[V×d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix_dims(table, "embedding_lookup")?;
        if ids.is_empty() {
            return Err(Error::invalid("embedding_lookup with no ids"));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::IdOutOfRange { id, rows });
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        Ok(self.push_op(
            vec![ids.len(), d],
            out,
            &[table],
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `u ⊗ v` for two rank-1 tensors of equal length.
    pub fn outer_product(&mut self, u: Var, v: Var) -> Result<Var> {
        let (su, sv) = (self.shape(u), self.shape(v));
        if su.len() != 1 || su != sv {
            return Err(shape_err("outer_product", su, sv));
        }
        let d = su[0];
        let (a, b) = (self.data(u), self.data(v));
        let mut out = Vec::with_capacity(d * d);
        for &x in a {
            out.extend(b.iter().map(|&y| x * y));
        }
        Ok(self.push_op(vec![d, d], out, &[u, v], Op::Outer(u, v)))
    }

    fn row_vec_check(&self, x: Var, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let (r, c) = self.matrix_dims(x, op)?;
        if self.value(v).len() != c {
            return Err(shape_err(op, self.shape(x), self.shape(v)));
        }
        Ok((r, c))
    }

    /// Adds the vector `b` (length d) to every row of `x[N×d]`.
    pub fn add_row_vec(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.row_vec_check(x, b, "add_row_vec")?;
        let bv = self.data(b);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            add_into(row, bv);
        }
        Ok(self.push_op(vec![r, c], out, &[x, b], Op::AddRowVec(x, b)))
    }

    /// Multiplies every row of `x[N×d]` element-wise by the vector `v`.
    pub fn mul_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = self.row_vec_check(x, v, "mul_row_vec")?;
        let vv = self.data(v);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            for (o, &m) in row.iter_mut().zip(vv) {
                *o *= m;
            }
        }
        Ok(self.push_op(vec![r, c], out, &[x, v], Op::MulRowVec(x, v)))
    }

    /// Column sums of a matrix, as a `[1×d]` row.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.matrix_dims(x, "sum_rows")?;
        let mut out = vec![0.0; c];
        for row in self.data(x).chunks(c) {
            add_into(&mut out, row);
        }
        Ok(self.push_op(vec![1, c], out, &[x], Op::SumRows(x)))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push_op(vec![1], vec![s], &[x], Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.is_empty() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let d = self.data(x).to_vec();
        Ok(self.push_op(shape.to_vec(), d, &[x], Op::Reshape(x)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{} out of {r} rows",
                start + len
            )));
        }
        let d = self.data(x)[start * c..(start + len) * c].to_vec();
        Ok(self.push_op(vec![len, c], d, &[x], Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::invalid(format!(
                "slice_cols {start}..{} out of {c} columns",
                start + len
            )));
        }
        let src = self.data(x);
        let mut d = Vec::with_capacity(r * len);
        for i in 0..r {
            d.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push_op(vec![r, len], d, &[x], Op::SliceCols { x, start }))
    }

    /// Stacks matrices (or rank-1 rows) with equal column counts.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let c = self.value(first).as_matrix_dims().1;
        let mut rows = 0;
        let mut d = Vec::new();
        for &x in xs {
            if self.rank_le2(x).is_none() || self.value(x).as_matrix_dims().1 != c {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(x)));
            }
            rows += self.value(x).as_matrix_dims().0;
            d.extend_from_slice(self.data(x));
        }
        Ok(self.push_op(vec![rows, c], d, xs, Op::ConcatRows(xs.to_vec())))
    }

    fn rank_le2(&self, x: Var) -> Option<()> {
        (self.shape(x).len() <= 2).then_some(())
    }

    /// Joins matrices with equal row counts side by side. Rank-1 inputs
    /// are joined into a longer rank-1 tensor.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        if xs.iter().all(|&x| self.shape(x).len() == 1) {
            let d: Vec<f64> = xs.iter().flat_map(|&x| self.data(x).to_vec()).collect();
            let n = d.len();
            return Ok(self.push_op(vec![n], d, xs, Op::ConcatCols(xs.to_vec())));
        }
        let (r, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (rx, cx) = self.matrix_dims(x, "concat_cols")?;
            if rx != r {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(x)));
            }
            widths.push(cx);
        }
        let total: usize = widths.iter().sum();
        let mut d = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&x, &w) in xs.iter().zip(&widths) {
                d.extend_from_slice(&self.data(x)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push_op(vec![r, total], d, xs, Op::ConcatCols(xs.to_vec())))
    }

    /// The `i`-th element of the flattened tensor, shape `[1]`.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let n = self.value(x).len();
        if i >= n {
            return Err(Error::IdOutOfRange { id: i, rows: n });
        }
        let v = self.data(x)[i];
        Ok(self.push_op(vec![1], vec![v], &[x], Op::Index { x, i }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[N×C]`. Rows whose target equals `ignore_index` are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64], ignore_index: Option<i64>) -> Result<Var> {
        let (n, c) = self.value(logits).as_matrix_dims();
        if self.shape(logits).len() > 2 || targets.len() != n {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let probs = softmax_along(self.data(logits), &[n, c], 1);
        let mut loss = 0.0;
        let mut count = 0;
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) == ignore_index {
                continue;
            }
            if t < 0 || t as usize >= c {
                return Err(Error::IdOutOfRange {
                    id: t.max(0) as usize,
                    rows: c,
                });
            }
            // log-softmax computed from the logits keeps saturated rows finite
            let row = &self.data(logits)[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[t as usize];
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        Ok(self.push_op(
            vec![1],
            vec![loss / count as f64],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore: ignore_index,
                probs,
                count,
            },
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against targets in [0, 1].
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        if self.value(x).len() != targets.len() {
            return Err(shape_err("bce_with_logits", self.shape(x), &[targets.len()]));
        }
        let n = targets.len() as f64;
        let loss = self
            .data(x)
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        Ok(self.push_op(
            vec![1],
            vec![loss],
            &[x],
            Op::BceWithLogits {
                x,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Cosine similarity of two equally long tensors, shape `[1]`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err("cosine", self.shape(a), self.shape(b)));
        }
        let (x, y) = (self.data(a), self.data(b));
        let (na, nb) = (norm(x), norm(y));
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let s = (dot / (na * nb)).clamp(-1.0, 1.0);
        Ok(self.push_op(vec![1], vec![s], &[a, b], Op::Cosine { a, b }))
    }

    /// Inverted dropout: in training tapes each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; otherwise
    /// `x` is returned untouched.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::DropoutRate(p));
        }
        if !self.stochastic || p == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).len(), p, &mut self.rng);
        let m = Tensor::new(self.shape(x).to_vec(), mask)?;
        let m = self.constant(m);
        self.mul(x, m)
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(gz) = grads[idx].take() else { continue };
            let val = |v: Var| nodes[v.0].value.data();
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::MatMul(a, b) => {
                    let (m, k) = nodes[a.0].value.as_matrix_dims();
                    let n = nodes[b.0].value.as_matrix_dims().1;
                    acc(*a, &mut |g| matmul_bt_into(&gz, val(*b), m, n, k, g));
                    acc(*b, &mut |g| matmul_at_into(val(*a), &gz, m, k, n, g));
                }
                Op::Transpose(a) => {
                    let (r, c) = nodes[a.0].value.as_matrix_dims();
                    acc(*a, &mut |g| {
                        for i in 0..r {
                            for j in 0..c {
                                g[i * c + j] += gz[j * r + i];
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |g| add_into(g, &gz));
                    acc(*b, &mut |g| add_into(g, &gz));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |g| add_into(g, &gz));
                    acc(*b, &mut |g| {
                        for (x, y) in g.iter_mut().zip(&gz) {
                            *x -= y;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    acc(*a, &mut |g| {
                        for ((x, y), z) in g.iter_mut().zip(val(*b)).zip(&gz) {
                            *x += y * z;
                        }
                    });
                    acc(*b, &mut |g| {
                        for ((x, y), z) in g.iter_mut().zip(val(*a)).zip(&gz) {
                            *x += y * z;
                        }
                    });
                }
                Op::Scale(a, c) => acc(*a, &mut |g| {
                    for (x, z) in g.iter_mut().zip(&gz) {
                        *x += c * z;
                    }
                }),
                Op::ScalarMul { s, x } => {
                    let c = val(*s)[0];
                    acc(*s, &mut |g| {
                        g[0] += val(*x).iter().zip(&gz).map(|(a, b)| a * b).sum::<f64>();
                    });
                    acc(*x, &mut |g| {
                        for (a, z) in g.iter_mut().zip(&gz) {
                            *a += c * z;
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    acc(*a, &mut |g| {
                        for ((x, yv), z) in g.iter_mut().zip(y).zip(&gz) {
                            *x += z * (1.0 - yv * yv);
                        }
                    });
                }
                Op::Relu(a) => acc(*a, &mut |g| {
                    for ((x, &xin), z) in g.iter_mut().zip(val(*a)).zip(&gz) {
                        if xin > 0.0 {
                            *x += z;
                        }
                    }
                }),
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    acc(*a, &mut |g| {
                        for ((x, yv), z) in g.iter_mut().zip(y).zip(&gz) {
                            *x += z * yv * (1.0 - yv);
                        }
                    });
                }
                Op::Softmax { x, axis } => {
                    let shape = node.value.shape();
                    let y = node.value.data();
                    let (outer, len, inner) = axis_split(shape, *axis);
                    acc(*x, &mut |g| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |k: usize| o * len * inner + k * inner + i;
                                let dot: f64 = (0..len).map(|k| gz[at(k)] * y[at(k)]).sum();
                                for k in 0..len {
                                    g[at(k)] += y[at(k)] * (gz[at(k)] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = nodes[gamma.0].value.len();
                    let gm = val(*gamma);
                    acc(*gamma, &mut |g| {
                        for (r, zrow) in gz.chunks(d).enumerate() {
                            for j in 0..d {
                                g[j] += zrow[j] * xhat[r * d + j];
                            }
                        }
                    });
                    acc(*beta, &mut |g| {
                        for zrow in gz.chunks(d) {
                            add_into(g, zrow);
                        }
                    });
                    acc(*x, &mut |g| {
                        let df = d as f64;
                        for (r, zrow) in gz.chunks(d).enumerate() {
                            let h = &xhat[r * d..(r + 1) * d];
                            let dh: Vec<f64> = zrow.iter().zip(gm).map(|(z, w)| z * w).collect();
                            let s1: f64 = dh.iter().sum();
                            let s2: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                g[r * d + j] += inv_std[r] / df * (df * dh[j] - s1 - h[j] * s2);
                            }
                        }
                    });
                }
                Op::Gather { table, ids } => {
                    let d = nodes[table.0].value.as_matrix_dims().1;
                    acc(*table, &mut |g| {
                        for (k, &id) in ids.iter().enumerate() {
                            add_into(&mut g[id * d..(id + 1) * d], &gz[k * d..(k + 1) * d]);
                        }
                    });
                }
                Op::Outer(u, v) => {
                    let d = nodes[u.0].value.len();
                    acc(*u, &mut |g| {
                        for i in 0..d {
                            g[i] += (0..d).map(|j| gz[i * d + j] * val(*v)[j]).sum::<f64>();
                        }
                    });
                    acc(*v, &mut |g| {
                        for j in 0..d {
                            g[j] += (0..d).map(|i| gz[i * d + j] * val(*u)[i]).sum::<f64>();
                        }
                    });
                }
                Op::AddRowVec(x, b) => {
                    let c = nodes[b.0].value.len();
                    acc(*x, &mut |g| add_into(g, &gz));
                    acc(*b, &mut |g| {
                        for row in gz.chunks(c) {
                            add_into(g, row);
                        }
                    });
                }
                Op::MulRowVec(x, v) => {
                    let c = nodes[v.0].value.len();
                    let vv = val(*v);
                    acc(*x, &mut |g| {
                        for (grow, zrow) in g.chunks_mut(c).zip(gz.chunks(c)) {
                            for j in 0..c {
                                grow[j] += zrow[j] * vv[j];
                            }
                        }
                    });
                    acc(*v, &mut |g| {
                        for (xrow, zrow) in val(*x).chunks(c).zip(gz.chunks(c)) {
                            for j in 0..c {
                                g[j] += zrow[j] * xrow[j];
                            }
                        }
                    });
                }
                Op::SumRows(x) => acc(*x, &mut |g| {
                    for row in g.chunks_mut(gz.len()) {
                        add_into(row, &gz);
                    }
                }),
                Op::Sum(x) => acc(*x, &mut |g| {
                    for v in g.iter_mut() {
                        *v += gz[0];
                    }
                }),
                Op::Reshape(x) => acc(*x, &mut |g| add_into(g, &gz)),
                Op::SliceRows { x, start } => {
                    let c = nodes[x.0].value.as_matrix_dims().1;
                    acc(*x, &mut |g| add_into(&mut g[start * c..start * c + gz.len()], &gz));
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = nodes[x.0].value.as_matrix_dims();
                    let len = node.value.as_matrix_dims().1;
                    acc(*x, &mut |g| {
                        for i in 0..r {
                            add_into(
                                &mut g[i * c + start..i * c + start + len],
                                &gz[i * len..(i + 1) * len],
                            );
                        }
                    });
                }
                Op::ConcatRows(xs) => {
                    let mut off = 0;
                    for x in xs {
                        let n = nodes[x.0].value.len();
                        acc(*x, &mut |g| add_into(g, &gz[off..off + n]));
                        off += n;
                    }
                }
                Op::ConcatCols(xs) => {
                    if node.value.rank() == 1 {
                        let mut off = 0;
                        for x in xs {
                            let n = nodes[x.0].value.len();
                            acc(*x, &mut |g| add_into(g, &gz[off..off + n]));
                            off += n;
                        }
                    } else {
                        let (r, total) = node.value.as_matrix_dims();
                        let mut off = 0;
                        for x in xs {
                            let w = nodes[x.0].value.as_matrix_dims().1;
                            acc(*x, &mut |g| {
                                for i in 0..r {
                                    add_into(
                                        &mut g[i * w..(i + 1) * w],
                                        &gz[i * total + off..i * total + off + w],
                                    );
                                }
                            });
                            off += w;
                        }
                    }
                }
                Op::Index { x, i } => acc(*x, &mut |g| g[*i] += gz[0]),
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore,
                    probs,
                    count,
                } => {
                    let c = nodes[logits.0].value.as_matrix_dims().1;
                    let scale = gz[0] / *count as f64;
                    acc(*logits, &mut |g| {
                        for (i, &t) in targets.iter().enumerate() {
                            if Some(t) == *ignore {
                                continue;
                            }
                            for j in 0..c {
                                let onehot = if j == t as usize { 1.0 } else { 0.0 };
                                g[i * c + j] += scale * (probs[i * c + j] - onehot);
                            }
                        }
                    });
                }
                Op::BceWithLogits { x, targets } => {
                    let scale = gz[0] / targets.len() as f64;
                    acc(*x, &mut |g| {
                        for ((gv, &z), &y) in g.iter_mut().zip(val(*x)).zip(targets) {
                            *gv += scale * (sigmoid(z) - y);
                        }
                    });
                }
                Op::Cosine { a, b } => {
                    let s = node.value.data()[0];
                    let (x, y) = (val(*a), val(*b));
                    let (na, nb) = (norm(x), norm(y));
                    acc(*a, &mut |g| {
                        for ((gv, &xv), &yv) in g.iter_mut().zip(x).zip(y) {
                            *gv += gz[0] * (yv / (na * nb) - s * xv / (na * na));
                        }
                    });
                    acc(*b, &mut |g| {
                        for ((gv, &xv), &yv) in g.iter_mut().zip(x).zip(y) {
                            *gv += gz[0] * (xv / (na * nb) - s * yv / (nb * nb));
                        }
                    });
                }
            }
        }

        let mut out = Gradients::default();
        for (idx, node) in nodes.into_iter().enumerate() {
            if !node.requires_grad {
                continue;
            }
            match node.op {
                Op::Param(id) => {
                    let g = grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                    out.params.push((id, g));
                }
                Op::Leaf => {
                    let g = grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                    let t = Tensor::new(node.value.shape().to_vec(), g)
                        .expect("leaf gradient shape");
                    out.leaves.insert(Var(idx), t);
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_along(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let m = (0..len).map(|k| data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..len {
                let e = (data[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..len {
                out[at(k)] /= z;
            }
        }
    }
    out
}

/// Inverted-dropout keep mask: each entry is 0 with probability `p`,
/// otherwise `1/(1-p)`.
pub fn dropout_mask(n: usize, p: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}
