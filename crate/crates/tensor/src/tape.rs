use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Gather { table: Var, ids: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    BroadcastRows(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Ordered record of operations. Nodes are appended in evaluation order, so
/// the node list is always topologically sorted.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Result<Var> {
        if let Some(bad) = value.iter().find(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(format!("{} (value {bad})", op_name(&op))));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("recorded shapes are valid")
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records an untracked leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf(None), false)
            .expect("tensors hold finite values")
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(t))
    }

    /// Records (once per tape) the leaf bound to a stored parameter.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let t = store.by_id(id);
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf(Some(id)),
            t.requires_grad(),
        )?;
        self.params.insert(id, v);
        Ok(v)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Matrix product. A rank-1 left operand is treated as a single row and
    /// yields a rank-1 result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (m, k) = match sa.as_slice() {
            [k] => (1, *k),
            [m, k] => (*m, *k),
            _ => return Err(mismatch()),
        };
        let n = match sb.as_slice() {
            [kb, n] if *kb == k => *n,
            _ => return Err(mismatch()),
        };
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bpj) in row.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let shape = if sa.len() == 1 { vec![n] } else { vec![m, n] };
        let tracked = self.tracked(&[a, b]);
        self.push(shape, out, Op::MatMul(a, b), tracked)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = match self.shape(a) {
            [r, c] => (*r, *c),
            s => {
                return Err(TensorError::Shape {
                    op: "transpose",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let tracked = self.tracked(&[a]);
        self.push(vec![c, r], out, Op::Transpose(a), tracked)
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a, b]);
        self.push(shape, out, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    fn map(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a]);
        self.push(shape, out, op, tracked)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(Op::Scale(a, s), a, |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(Op::AddScalar(a), a, |x| x + s)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Tanh(a), a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Sigmoid(a), a, sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Relu(a), a, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Exp(a), a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                value: bad,
            });
        }
        self.map(Op::Log(a), a, f64::ln)
    }

    /// Softmax along `axis`, max-subtracted. Masked entries (`false`) are
    /// excluded from normalization and come out exactly zero.
    pub fn softmax(&mut self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len().max(1) || shape.is_empty() {
            return Err(TensorError::Usage(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        if let Some(m) = mask {
            if m.len() != self.value(a).len() {
                return Err(TensorError::Shape {
                    op: "softmax mask",
                    lhs: shape,
                    rhs: vec![m.len()],
                });
            }
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        let keep = |i: usize| mask.map_or(true, |m| m[i]);
        for o in 0..outer {
            for q in 0..inner {
                let at = |j: usize| (o * len + j) * inner + q;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    if keep(at(j)) && x[at(j)] > max {
                        max = x[at(j)];
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(TensorError::Degenerate("softmax"));
                }
                let mut sum = 0.0;
                for j in 0..len {
                    if keep(at(j)) {
                        let e = (x[at(j)] - max).exp();
                        out[at(j)] = e;
                        sum += e;
                    }
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let tracked = self.tracked(&[a]);
        self.push(shape, out, Op::Softmax { x: a, axis }, tracked)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || axis >= shape.len() {
            return Err(TensorError::Usage(format!(
                "log_softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for q in 0..inner {
                let at = |j: usize| (o * len + j) * inner + q;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (x[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] = x[at(j)] - lse;
                }
            }
        }
        let tracked = self.tracked(&[a]);
        self.push(shape, out, Op::LogSoftmax { x: a, axis }, tracked)
    }

    /// Standardizes the last axis (population variance) then applies
    /// `gain * x + bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap_or(&1);
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if eps <= 0.0 {
            return Err(TensorError::Usage("layer_norm eps must be positive".into()));
        }
        let (x, g, b) = (self.value(a), self.value(gain), self.value(bias));
        let mut out = vec![0.0; x.len()];
        for (row, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
            let (mean, rstd) = moments(row, eps);
            for j in 0..d {
                orow[j] = g[j] * ((row[j] - mean) * rstd) + b[j];
            }
        }
        let tracked = self.tracked(&[a, gain, bias]);
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x: a,
                gain,
                bias,
                eps,
            },
            tracked,
        )
    }

    /// Row gather from a `[V x d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = match self.shape(table) {
            [v, d] => (*v, *d),
            s => {
                return Err(TensorError::Shape {
                    op: "embedding",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        if ids.is_empty() {
            return Err(TensorError::Usage("embedding lookup of zero ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Index { index: bad, size: v });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let tracked = self.tracked(&[table]);
        self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        )
    }

    /// Gathers flat elements into a rank-1 tensor.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if idx.is_empty() {
            return Err(TensorError::Usage("pick of zero elements".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::Index { index: bad, size: n });
        }
        let v = self.value(a);
        let out = idx.iter().map(|&i| v[i]).collect();
        let tracked = self.tracked(&[a]);
        self.push(
            vec![idx.len()],
            out,
            Op::Pick {
                x: a,
                idx: idx.to_vec(),
            },
            tracked,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Usage(format!(
                "concat axis {axis} invalid for shape {base:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let tracked = self.tracked(parts);
        self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            tracked,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Usage(format!(
                "slice [{start}, {}) on axis {axis} out of bounds for {shape:?}",
                start + len
            )));
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let tracked = self.tracked(&[a]);
        self.push(new_shape, out, Op::Slice { x: a, axis, start }, tracked)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let v = self.value(a).to_vec();
        let tracked = self.tracked(&[a]);
        self.push(shape.to_vec(), v, Op::Reshape(a), tracked)
    }

    /// Repeats a `[d]` or `[1 x d]` row `n` times into `[n x d]`.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let d = match self.shape(a) {
            [d] | [1, d] => *d,
            s => {
                return Err(TensorError::Shape {
                    op: "broadcast_rows",
                    lhs: s.to_vec(),
                    rhs: vec![n],
                })
            }
        };
        let row = self.value(a).to_vec();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(&row);
        }
        let tracked = self.tracked(&[a]);
        self.push(vec![n, d], out, Op::BroadcastRows(a), tracked)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let tracked = self.tracked(&[a]);
        self.push(vec![], vec![s], Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let tracked = self.tracked(&[a]);
        self.push(vec![], vec![s], Op::Mean(a), tracked)
    }

    /// Reverse sweep from a scalar `loss`. Gradients of store-bound leaves are
    /// accumulated into `store`; the tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Usage("loss was not recorded on this tape".into()));
        }
        if self.node(loss).value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite(format!("gradient ({bad})")));
            }
            match &self.nodes[i].op {
                Op::Leaf(Some(id)) => store.accumulate(*id, &g),
                Op::Leaf(None) => {}
                _ => self.propagate(i, &g, &mut grads),
            }
        }
        self.clear();
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (self.shape(*b)[0], self.shape(*b)[1]);
                let m = av.len() / k;
                acc(*a, &|da| {
                    for r in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let grow = &g[r * n..(r + 1) * n];
                            da[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &|db| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let a_rp = av[r * k + p];
                            for (d, &gj) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += a_rp * gj;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, &|da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|d| add_into(d, g));
                acc(*b, &|d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|d| add_into(d, g));
                acc(*b, &|d| d.iter_mut().zip(g).for_each(|(x, gv)| *x -= gv));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &|d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &|d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * av[j];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &|d| d.iter_mut().zip(g).for_each(|(x, gv)| *x += gv * s)),
            Op::AddScalar(a) => acc(*a, &|d| add_into(d, g)),
            Op::Tanh(a) => acc(*a, &|d| {
                for j in 0..d.len() {
                    d[j] += g[j] * (1.0 - y[j] * y[j]);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &|d| {
                for j in 0..d.len() {
                    d[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            }),
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, &|d| {
                    for j in 0..d.len() {
                        if x[j] > 0.0 {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Exp(a) => acc(*a, &|d| {
                for j in 0..d.len() {
                    d[j] += g[j] * y[j];
                }
            }),
            Op::Log(a) => {
                let x = self.value(*a);
                acc(*a, &|d| {
                    for j in 0..d.len() {
                        d[j] += g[j] / x[j];
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                acc(*x, &|d| {
                    for o in 0..outer {
                        for q in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + q;
                            let dot: f64 = (0..len).map(|j| y[at(j)] * g[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                acc(*x, &|d| {
                    for o in 0..outer {
                        for q in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + q;
                            let gsum: f64 = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] += g[at(j)] - y[at(j)].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let dim = gv.len();
                acc(*x, &|d| {
                    for (r, row) in xv.chunks(dim).enumerate() {
                        let (mean, rstd) = moments(row, *eps);
                        let gr = &g[r * dim..(r + 1) * dim];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..dim {
                            let xhat = (row[j] - mean) * rstd;
                            let dxhat = gr[j] * gv[j];
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                        }
                        m1 /= dim as f64;
                        m2 /= dim as f64;
                        for j in 0..dim {
                            let xhat = (row[j] - mean) * rstd;
                            d[r * dim + j] += rstd * (gr[j] * gv[j] - m1 - xhat * m2);
                        }
                    }
                });
                acc(*gain, &|d| {
                    for (r, row) in xv.chunks(dim).enumerate() {
                        let (mean, rstd) = moments(row, *eps);
                        for j in 0..dim {
                            d[j] += g[r * dim + j] * (row[j] - mean) * rstd;
                        }
                    }
                });
                acc(*bias, &|d| {
                    for gr in g.chunks(dim) {
                        add_into(d, gr);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let dim = self.shape(*table)[1];
                acc(*table, &|d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                });
            }
            Op::Pick { x, idx } => acc(*x, &|d| {
                for (r, &i) in idx.iter().enumerate() {
                    d[i] += g[r];
                }
            }),
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    acc(p, &|d| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut d[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let src_shape = self.shape(*x);
                let (outer, alen, inner) = split_axis(src_shape, *axis);
                let chunk = node.shape[*axis] * inner;
                acc(*x, &|d| {
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        add_into(&mut d[base..base + chunk], &g[o * chunk..(o + 1) * chunk]);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &|d| add_into(d, g)),
            Op::BroadcastRows(a) => acc(*a, &|d| {
                for gr in g.chunks(d.len()) {
                    add_into(d, gr);
                }
            }),
            Op::Sum(a) => acc(*a, &|d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => acc(*a, &|d| {
                let n = d.len() as f64;
                d.iter_mut().for_each(|x| *x += g[0] / n);
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf(_) => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(_) => "add_scalar",
        Op::Tanh(_) => "tanh",
        Op::Sigmoid(_) => "sigmoid",
        Op::Relu(_) => "relu",
        Op::Exp(_) => "exp",
        Op::Log(_) => "log",
        Op::Softmax { .. } => "softmax",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gather { .. } => "embedding",
        Op::Pick { .. } => "pick",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Reshape(_) => "reshape",
        Op::BroadcastRows(_) => "broadcast_rows",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
    }
}
