use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Conv1dSame { input: usize, weight: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Log(usize),
    PowScalar(usize, f64),
    Clamp(usize, f64, f64),
    Softmax { input: usize, axis: usize },
    LogSoftmax { input: usize, axis: usize },
    Sum(usize),
    Mean(usize),
    SumAxis { input: usize, axis: usize },
    Embedding { table: usize, ids: Vec<usize> },
    Concat { inputs: Vec<usize>, axis: usize },
    SliceRows { input: usize, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records operations in execution order so gradients can be propagated
/// backwards. Nodes are only ever appended, so recording order is a
/// topological order of the graph.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for d in 0..rank {
        let da = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let db = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        out[d] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::shape(
                    op,
                    format!("cannot broadcast {a:?} with {b:?}"),
                ))
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index of the broadcast source.
fn index_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let rank = out.len();
    let offset = rank - inp.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..inp.len()).rev() {
        if inp[d] != 1 {
            strides[d + offset] = s;
        }
        s *= inp[d];
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Gradient buffer for node `i`, created on first use; `None` when the node
/// does not take part in differentiation.
fn grad_buf<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    i: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[i].requires_grad {
        return None;
    }
    let len = nodes[i].value.len();
    Some(grads[i].get_or_insert_with(|| vec![0.0; len]))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id {
            return Err(TensorError::Graph(format!(
                "variable belongs to tape {}, not tape {}",
                v.tape, self.id
            )));
        }
        if v.id >= self.nodes.len() {
            return Err(TensorError::Graph(format!(
                "variable {} is no longer on the tape",
                v.id
            )));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.id].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.check(v).ok()?;
        self.nodes[v.id].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v).is_ok() && self.nodes[v.id].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v)?;
        match *s {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::shape(op, format!("expected rank 2, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        let av = self.nodes[a.id].value.data();
        let bv = self.nodes[b.id].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.any_grad(&[a.id, b.id]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.id, b.id), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rank2("transpose", a)?;
        let av = self.nodes[a.id].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a.id), rg))
    }

    /// One-dimensional convolution along the token axis, stride 1, with
    /// `k - 1` zeros of padding split `floor((k-1)/2)` before and the rest
    /// after, so the output has as many rows as the input.
    ///
    /// `input` is `[N, c_in]`, `weight` is `[k, c_in, c_out]`, output `[N, c_out]`.
    pub fn conv1d_same(&mut self, input: Var, weight: Var) -> Result<Var> {
        let (n, cin) = self.rank2("conv1d_same", input)?;
        let ws = self.shape(weight)?.to_vec();
        let [k, wcin, cout] = ws[..] else {
            return Err(TensorError::shape(
                "conv1d_same",
                format!("weight must be [k, c_in, c_out], got {ws:?}"),
            ));
        };
        if wcin != cin || k == 0 {
            return Err(TensorError::shape(
                "conv1d_same",
                format!("input [{n}, {cin}] with weight {ws:?}"),
            ));
        }
        let pad = (k - 1) / 2;
        let x = self.nodes[input.id].value.data();
        let w = self.nodes[weight.id].value.data();
        let mut out = vec![0.0; n * cout];
        for t in 0..n {
            let orow = &mut out[t * cout..(t + 1) * cout];
            for j in 0..k {
                let src = t + j;
                if src < pad || src - pad >= n {
                    continue;
                }
                let xrow = &x[(src - pad) * cin..(src - pad + 1) * cin];
                for (i, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &w[(j * cin + i) * cout..(j * cin + i + 1) * cout];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let rg = self.any_grad(&[input.id, weight.id]);
        Ok(self.push(
            Tensor::new(vec![n, cout], out)?,
            Op::Conv1dSame {
                input: input.id,
                weight: weight.id,
            },
            rg,
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.nodes[a.id].value.shape();
        let sb = self.nodes[b.id].value.shape();
        let out_shape = broadcast_shape(name, sa, sb)?;
        let av = self.nodes[a.id].value.data();
        let bv = self.nodes[b.id].value.data();
        let data: Vec<f64> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = index_map(&out_shape, sa);
            let mb = index_map(&out_shape, sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(av[i], bv[j])).collect()
        };
        let rg = self.any_grad(&[a.id, b.id]);
        Ok(self.push(Tensor::new(out_shape, data)?, op, rg))
    }

    /// Elementwise sum with broadcasting (e.g. `[N, L] + [N, 1]`, `[T, d] + [d]`).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        let v = &self.nodes[a.id].value;
        let data = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x * c, Op::Scale(a.id, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddScalar(a.id))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a.id))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a.id))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.id))
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, gelu, Op::Gelu(a.id))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a.id))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log(a.id))
    }

    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary(a, |x| x.powf(p), Op::PowScalar(a.id, p))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a.id, lo, hi))
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let s = self.shape(a)?;
        if axis >= s.len() {
            return Err(TensorError::shape(
                op,
                format!("axis {axis} out of range for {s:?}"),
            ));
        }
        Ok(())
    }

    /// Softmax along `axis`; every slice along that axis sums to one.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let v = &self.nodes[a.id].value;
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let x = v.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for q in 0..inner {
                let at = |i: usize| (o * n + i) * inner + q;
                let max = (0..n).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..n {
                    let e = (x[at(i)] - max).exp();
                    out[at(i)] = e;
                    sum += e;
                }
                for i in 0..n {
                    out[at(i)] /= sum;
                }
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax { input: a.id, axis },
            rg,
        ))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let v = &self.nodes[a.id].value;
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let x = v.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for q in 0..inner {
                let at = |i: usize| (o * n + i) * inner + q;
                let max = (0..n).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|i| (x[at(i)] - max).exp()).sum::<f64>().ln();
                for i in 0..n {
                    out[at(i)] = x[at(i)] - lse;
                }
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LogSoftmax { input: a.id, axis },
            rg,
        ))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.nodes[a.id].value.data().iter().sum();
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(Tensor::scalar(s), Op::Sum(a.id), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.nodes[a.id].value.data();
        if v.is_empty() {
            return Err(TensorError::shape("mean", "empty tensor"));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(Tensor::scalar(m), Op::Mean(a.id), rg))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", a, axis)?;
        let v = &self.nodes[a.id].value;
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let x = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &x[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SumAxis { input: a.id, axis },
            rg,
        ))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.rank2("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::shape(
                "embedding",
                format!("id {bad} out of range for table of {v} rows"),
            ));
        }
        let t = self.nodes[table.id].value.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[table.id].requires_grad;
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first)?.to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p)?;
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::shape(
                    "concat",
                    format!("{s:?} does not match {base:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = &self.nodes[p.id].value;
                let n = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.any_grad(&ids);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat { inputs: ids, axis },
            rg,
        ))
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a)?.to_vec();
        if s.is_empty() || start > end || end > s[0] {
            return Err(TensorError::shape(
                "slice_rows",
                format!("rows {start}..{end} of {s:?}"),
            ));
        }
        let row: usize = s[1..].iter().product();
        let data = self.nodes[a.id].value.data()[start * row..end * row].to_vec();
        let mut shape = s;
        shape[0] = end - start;
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::SliceRows { input: a.id, start },
            rg,
        ))
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient and
    /// accumulates the result on leaves. Calling it again without
    /// [`Tape::zero_grad`] adds to the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.nodes[loss.id].value.len() != 1 {
            return Err(TensorError::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaf_grads.push((id, g)),
                op => self.propagate(op, id, &g, &mut grads),
            }
        }
        for (id, g) in leaf_grads {
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => {
                    for (a, x) in acc.data_mut().iter_mut().zip(&g) {
                        *a += x;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[id].value;
        macro_rules! with_buf {
            ($i:expr, |$b:ident| $body:block) => {
                if let Some($b) = grad_buf(nodes, grads, $i) {
                    $body
                }
            };
        }
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                let n = nodes[b].value.shape()[1];
                let av = nodes[a].value.data();
                let bv = nodes[b].value.data();
                with_buf!(a, |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                with_buf!(b, |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                with_buf!(a, |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Conv1dSame { input, weight } => {
                let (n, cin) = (nodes[input].value.shape()[0], nodes[input].value.shape()[1]);
                let ws = nodes[weight].value.shape();
                let (k, cout) = (ws[0], ws[2]);
                let pad = (k - 1) / 2;
                let x = nodes[input].value.data();
                let w = nodes[weight].value.data();
                with_buf!(input, |dx| {
                    for t in 0..n {
                        let grow = &g[t * cout..(t + 1) * cout];
                        for j in 0..k {
                            let src = t + j;
                            if src < pad || src - pad >= n {
                                continue;
                            }
                            let s = src - pad;
                            for i in 0..cin {
                                let wrow = &w[(j * cin + i) * cout..(j * cin + i + 1) * cout];
                                dx[s * cin + i] +=
                                    grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                });
                with_buf!(weight, |dw| {
                    for t in 0..n {
                        let grow = &g[t * cout..(t + 1) * cout];
                        for j in 0..k {
                            let src = t + j;
                            if src < pad || src - pad >= n {
                                continue;
                            }
                            let s = src - pad;
                            for i in 0..cin {
                                let xv = x[s * cin + i];
                                if xv == 0.0 {
                                    continue;
                                }
                                let drow = &mut dw[(j * cin + i) * cout..(j * cin + i + 1) * cout];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let sign_b = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let is_mul = matches!(op, Op::Mul(..));
                let os = out.shape();
                let (sa, sb) = (nodes[a].value.shape(), nodes[b].value.shape());
                let ma = (sa != os).then(|| index_map(os, sa));
                let mb = (sb != os).then(|| index_map(os, sb));
                let ia = |i: usize| ma.as_ref().map_or(i, |m| m[i]);
                let ib = |i: usize| mb.as_ref().map_or(i, |m| m[i]);
                let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
                with_buf!(a, |da| {
                    for (i, &gv) in g.iter().enumerate() {
                        da[ia(i)] += if is_mul { gv * bv[ib(i)] } else { gv };
                    }
                });
                with_buf!(b, |db| {
                    for (i, &gv) in g.iter().enumerate() {
                        db[ib(i)] += if is_mul { gv * av[ia(i)] } else { sign_b * gv };
                    }
                });
            }
            Op::Scale(a, c) => with_buf!(a, |da| {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += c * gv;
                }
            }),
            Op::AddScalar(a) => with_buf!(a, |da| {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            }),
            Op::Tanh(a) | Op::Sigmoid(a) | Op::Exp(a) => {
                let y = out.data();
                with_buf!(a, |da| {
                    for i in 0..g.len() {
                        let local = match op {
                            Op::Tanh(_) => 1.0 - y[i] * y[i],
                            Op::Sigmoid(_) => y[i] * (1.0 - y[i]),
                            _ => y[i],
                        };
                        da[i] += g[i] * local;
                    }
                });
            }
            Op::Relu(a) | Op::Gelu(a) | Op::Log(a) | Op::PowScalar(a, _) | Op::Clamp(a, _, _) => {
                let x = nodes[a].value.data();
                with_buf!(a, |da| {
                    for i in 0..g.len() {
                        let xi = x[i];
                        let local = match *op {
                            Op::Relu(_) => f64::from(u8::from(xi > 0.0)),
                            Op::Gelu(_) => gelu_grad(xi),
                            Op::Log(_) => 1.0 / xi,
                            Op::PowScalar(_, p) if p == 0.0 => 0.0,
                            Op::PowScalar(_, p) => p * xi.powf(p - 1.0),
                            Op::Clamp(_, lo, hi) => f64::from(u8::from(xi > lo && xi < hi)),
                            _ => unreachable!(),
                        };
                        da[i] += g[i] * local;
                    }
                });
            }
            Op::Softmax { input, axis } | Op::LogSoftmax { input, axis } => {
                let log = matches!(op, Op::LogSoftmax { .. });
                let (outer, n, inner) = axis_split(out.shape(), axis);
                let y = out.data();
                with_buf!(input, |dx| {
                    for o in 0..outer {
                        for q in 0..inner {
                            let at = |i: usize| (o * n + i) * inner + q;
                            if log {
                                let gs: f64 = (0..n).map(|i| g[at(i)]).sum();
                                for i in 0..n {
                                    dx[at(i)] += g[at(i)] - y[at(i)].exp() * gs;
                                }
                            } else {
                                let dot: f64 = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                                for i in 0..n {
                                    dx[at(i)] += y[at(i)] * (g[at(i)] - dot);
                                }
                            }
                        }
                    }
                });
            }
            Op::Sum(a) | Op::Mean(a) => {
                let len = nodes[a].value.len();
                let scale = if matches!(op, Op::Mean(_)) { 1.0 / len as f64 } else { 1.0 };
                with_buf!(a, |da| {
                    for d in da.iter_mut() {
                        *d += g[0] * scale;
                    }
                });
            }
            Op::SumAxis { input, axis } => {
                let (outer, n, inner) = axis_split(nodes[input].value.shape(), axis);
                with_buf!(input, |dx| {
                    for o in 0..outer {
                        let grow = &g[o * inner..(o + 1) * inner];
                        for i in 0..n {
                            let d = &mut dx[(o * n + i) * inner..(o * n + i + 1) * inner];
                            for (x, &gv) in d.iter_mut().zip(grow) {
                                *x += gv;
                            }
                        }
                    }
                });
            }
            Op::Embedding { table, ref ids } => {
                let d = nodes[table].value.shape()[1];
                with_buf!(table, |dt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for (x, &gv) in dt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *x += gv;
                        }
                    }
                });
            }
            Op::Concat { ref inputs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), axis);
                let mut offset = 0;
                for &p in inputs {
                    let n = nodes[p].value.shape()[axis];
                    with_buf!(p, |dp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            for (x, &gv) in dp[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *x += gv;
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::SliceRows { input, start } => {
                let row: usize = nodes[input].value.shape()[1..].iter().product();
                with_buf!(input, |dx| {
                    for (x, &gv) in dx[start * row..start * row + g.len()].iter_mut().zip(g) {
                        *x += gv;
                    }
                });
            }
        }
    }
}
