//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op appends a node holding its output value. Inputs always precede
//! the node that consumes them, so `backward` walks the node list in reverse
//! append order. A graph lives for one forward/backward pass and is confined
//! to the thread that built it.

use std::fmt;
use std::str::FromStr;

use crate::error::{CatnError, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    /// Centered window, zero padded so the output keeps the input length.
    Conv1dSame,
    /// Row gather. Rows listed in `padding_idx` never receive gradient.
    EmbeddingLookup { padding_idx: Option<usize> },
    Relu,
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    Mul,
    Sub,
    /// Same-shape sum, or `[r, c] + [c]` (bias added to every row).
    Add,
    /// Concatenation along the last axis.
    Concat,
    /// Softmax restricted to positions whose mask entry is nonzero.
    MaskedSoftmax,
    /// `w[l]`, `v[l, k]` -> `Σ_j w_j v_j`.
    WeightedSum,
    MeanAll,
    /// Adds a one-element tensor to every entry.
    ScalarAdd,
    Transpose,
    Scale(f64),
    SumAll,
    Row(usize),
    StackRows,
    Reshape(Vec<usize>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Conv1dSame => "conv1d_same",
            OpKind::EmbeddingLookup { .. } => "embedding_lookup",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::LeakyRelu(_) => "leaky_relu",
            OpKind::Mul => "elementwise_mul",
            OpKind::Sub => "elementwise_sub",
            OpKind::Add => "add",
            OpKind::Concat => "concat",
            OpKind::MaskedSoftmax => "masked_softmax",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::MeanAll => "mean_all",
            OpKind::ScalarAdd => "scalar_add",
            OpKind::Transpose => "transpose",
            OpKind::Scale(_) => "scale",
            OpKind::SumAll => "sum_all",
            OpKind::Row(_) => "row",
            OpKind::StackRows => "stack_rows",
            OpKind::Reshape(_) => "reshape",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::LeakyRelu(a) => write!(f, "leaky_relu({a})"),
            OpKind::Scale(c) => write!(f, "scale({c})"),
            OpKind::Row(i) => write!(f, "row({i})"),
            OpKind::EmbeddingLookup {
                padding_idx: Some(p),
            } => write!(f, "embedding_lookup({p})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Parses `name` or `name(arg)`, e.g. `relu`, `leaky_relu(0.01)`, `row(2)`.
impl FromStr for OpKind {
    type Err = CatnError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.find('(') {
            Some(open) if s.ends_with(')') => (&s[..open], Some(&s[open + 1..s.len() - 1])),
            _ => (s, None),
        };
        let unknown = || CatnError::UnknownOp(s.to_string());
        let num = |a: Option<&str>| -> Result<f64> {
            a.ok_or_else(unknown)?.trim().parse::<f64>().map_err(|_| unknown())
        };
        let idx = |a: Option<&str>| -> Result<usize> {
            a.ok_or_else(unknown)?.trim().parse::<usize>().map_err(|_| unknown())
        };
        let kind = match name {
            "matmul" => OpKind::MatMul,
            "conv1d_same" => OpKind::Conv1dSame,
            "embedding_lookup" => OpKind::EmbeddingLookup {
                padding_idx: arg.map(|a| idx(Some(a))).transpose()?,
            },
            "relu" => OpKind::Relu,
            "sigmoid" => OpKind::Sigmoid,
            "tanh" => OpKind::Tanh,
            "leaky_relu" => OpKind::LeakyRelu(num(arg)?),
            "elementwise_mul" => OpKind::Mul,
            "elementwise_sub" => OpKind::Sub,
            "add" => OpKind::Add,
            "concat" => OpKind::Concat,
            "masked_softmax" => OpKind::MaskedSoftmax,
            "weighted_sum" => OpKind::WeightedSum,
            "mean_all" => OpKind::MeanAll,
            "scalar_add" => OpKind::ScalarAdd,
            "transpose" => OpKind::Transpose,
            "scale" => OpKind::Scale(num(arg)?),
            "sum_all" => OpKind::SumAll,
            "row" => OpKind::Row(idx(arg)?),
            "stack_rows" => OpKind::StackRows,
            _ => return Err(unknown()),
        };
        Ok(kind)
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

struct Node<'a> {
    op: Option<OpKind>,
    inputs: Vec<usize>,
    value: Value<'a>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(None, Vec::new(), Value::Owned(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that reads a tensor owned elsewhere (typically a model parameter).
    pub fn borrowed(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push(None, Vec::new(), Value::Borrowed(value), requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op(&self, v: Var) -> Option<&OpKind> {
        self.nodes[v.0].op.as_ref()
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn push(&mut self, op: Option<OpKind>, inputs: Vec<usize>, value: Value<'a>, rg: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Applies `kind` to `inputs` and appends the result.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = eval_op(&kind, &values)?;
        debug_assert!(out.is_finite() || !values.iter().all(|t| t.is_finite()));
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let ids = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(Some(kind), ids, Value::Owned(out), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::MatMul, &[a, b])
    }

    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Conv1dSame, &[x, w, b])
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: Var, padding_idx: Option<usize>) -> Result<Var> {
        self.forward_op(OpKind::EmbeddingLookup { padding_idx }, &[table, ids])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.forward_op(OpKind::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.forward_op(OpKind::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.forward_op(OpKind::Tanh, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        if !(alpha > 0.0) {
            return Err(CatnError::InvalidArgument(format!(
                "leaky_relu slope must be positive, got {alpha}"
            )));
        }
        self.forward_op(OpKind::LeakyRelu(alpha), &[x])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Mul, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Sub, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Add, &[a, b])
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Concat, &[a, b])
    }

    pub fn masked_softmax(&mut self, logits: Var, mask: Var) -> Result<Var> {
        self.forward_op(OpKind::MaskedSoftmax, &[logits, mask])
    }

    pub fn weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        self.forward_op(OpKind::WeightedSum, &[weights, values])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.forward_op(OpKind::MeanAll, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.forward_op(OpKind::SumAll, &[x])
    }

    pub fn scalar_add(&mut self, x: Var, s: Var) -> Result<Var> {
        self.forward_op(OpKind::ScalarAdd, &[x, s])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.forward_op(OpKind::Transpose, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.forward_op(OpKind::Scale(c), &[x])
    }

    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        self.forward_op(OpKind::Row(r), &[x])
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        self.forward_op(OpKind::StackRows, rows)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.forward_op(OpKind::Reshape(shape.to_vec()), &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of all nodes that
    /// require them are kept until the next call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(CatnError::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| self.nodes[i].value.get()).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
                let local = backward_op(op, &inputs, node.value.get(), &g, &needs);
                for (k, contribution) in local.into_iter().enumerate() {
                    let Some(c) = contribution else { continue };
                    let slot = &mut grads[node.inputs[k]];
                    match slot {
                        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                        None => *slot = Some(c),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CatnError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn arity(kind: &OpKind, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(CatnError::InvalidArgument(format!(
            "{} takes {n} inputs, got {}",
            kind.name(),
            inputs.len()
        )));
    }
    Ok(())
}

fn as_matrix(op: &'static str, t: &Tensor, other: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        _ => Err(CatnError::shape(op, t.shape(), other.shape())),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `a[m,k] · b[k,n]`.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m,k] · b[n,k]ᵀ`.
fn mm_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k,m]ᵀ · b[k,n]`.
fn mm_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Forward evaluation of one op on concrete tensors.
pub fn eval_op(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    use OpKind::*;
    let unary = matches!(
        kind,
        Relu | Sigmoid | Tanh | LeakyRelu(_) | MeanAll | SumAll | Transpose | Scale(_) | Row(_) | Reshape(_)
    );
    if unary {
        arity(kind, inputs, 1)?;
    } else if !matches!(kind, Conv1dSame | StackRows) {
        arity(kind, inputs, 2)?;
    }
    let out = match kind {
        MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = as_matrix("matmul", a, b)?;
            let (k2, n) = as_matrix("matmul", b, a)?;
            if k != k2 {
                return Err(CatnError::shape("matmul", a.shape(), b.shape()));
            }
            Tensor::matrix(m, n, mm(a.data(), b.data(), m, k, n))
        }
        Conv1dSame => {
            arity(kind, inputs, 3)?;
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let (l, din, n, s) = conv_dims(x, w, b)?;
            conv1d_same_forward(x.data(), w.data(), b.data(), l, din, n, s)
        }
        EmbeddingLookup { .. } => {
            let (table, ids) = (inputs[0], inputs[1]);
            let (rows, d) = as_matrix("embedding_lookup", table, ids)?;
            let idx = token_indices(ids, rows)?;
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in &idx {
                data.extend_from_slice(table.row(i));
            }
            Tensor::matrix(idx.len(), d, data)
        }
        Relu => map(inputs[0], |v| v.max(0.0)),
        Sigmoid => map(inputs[0], sigmoid),
        Tanh => map(inputs[0], f64::tanh),
        LeakyRelu(alpha) => {
            let a = *alpha;
            map(inputs[0], move |v| if v > 0.0 { v } else { a * v })
        }
        Mul => {
            check_same("elementwise_mul", inputs[0], inputs[1])?;
            zip(inputs[0], inputs[1], |a, b| a * b)
        }
        Sub => {
            check_same("elementwise_sub", inputs[0], inputs[1])?;
            zip(inputs[0], inputs[1], |a, b| a - b)
        }
        Add => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() == b.shape() {
                zip(a, b, |x, y| x + y)
            } else if a.rank() == 2 && b.rank() == 1 && a.shape()[1] == b.len() {
                let c = b.len();
                let data = a.data().iter().enumerate().map(|(i, v)| v + b.data()[i % c]).collect();
                Tensor::new(a.shape().to_vec(), data)?
            } else {
                return Err(CatnError::shape("add", a.shape(), b.shape()));
            }
        }
        Concat => {
            let (a, b) = (inputs[0], inputs[1]);
            match (a.shape(), b.shape()) {
                ([_], [_]) => {
                    let mut data = a.data().to_vec();
                    data.extend_from_slice(b.data());
                    Tensor::vector(data)
                }
                ([r1, c1], [r2, c2]) if r1 == r2 => {
                    let mut data = Vec::with_capacity(r1 * (c1 + c2));
                    for r in 0..*r1 {
                        data.extend_from_slice(a.row(r));
                        data.extend_from_slice(b.row(r));
                    }
                    Tensor::matrix(*r1, c1 + c2, data)
                }
                _ => return Err(CatnError::shape("concat", a.shape(), b.shape())),
            }
        }
        MaskedSoftmax => {
            let (x, mask) = (inputs[0], inputs[1]);
            if x.rank() != 1 || x.shape() != mask.shape() {
                return Err(CatnError::shape("masked_softmax", x.shape(), mask.shape()));
            }
            Tensor::vector(masked_softmax(x.data(), mask.data()))
        }
        WeightedSum => {
            let (w, v) = (inputs[0], inputs[1]);
            let (l, k) = as_matrix("weighted_sum", v, w)?;
            if w.rank() != 1 || w.len() != l {
                return Err(CatnError::shape("weighted_sum", w.shape(), v.shape()));
            }
            let mut out = vec![0.0; k];
            for (j, &wj) in w.data().iter().enumerate() {
                if wj == 0.0 {
                    continue;
                }
                for (o, x) in out.iter_mut().zip(v.row(j)) {
                    *o += wj * x;
                }
            }
            Tensor::vector(out)
        }
        MeanAll => {
            let x = inputs[0];
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        }
        SumAll => Tensor::scalar(inputs[0].data().iter().sum()),
        ScalarAdd => {
            let (x, s) = (inputs[0], inputs[1]);
            if s.len() != 1 {
                return Err(CatnError::shape("scalar_add", x.shape(), s.shape()));
            }
            let c = s.item();
            map(x, move |v| v + c)
        }
        Transpose => {
            let x = inputs[0];
            let (r, c) = as_matrix("transpose", x, x)?;
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = x.data()[i * c + j];
                }
            }
            Tensor::matrix(c, r, data)
        }
        Scale(c) => {
            let c = *c;
            map(inputs[0], move |v| v * c)
        }
        Row(r) => {
            let x = inputs[0];
            let (rows, _) = as_matrix("row", x, x)?;
            if *r >= rows {
                return Err(CatnError::InvalidArgument(format!("row {r} out of range for {rows} rows")));
            }
            Tensor::vector(x.row(*r).to_vec())
        }
        StackRows => {
            let first = inputs
                .first()
                .ok_or_else(|| CatnError::InvalidArgument("stack_rows needs at least one row".into()))?;
            let c = first.len();
            let mut data = Vec::with_capacity(c * inputs.len());
            for t in inputs {
                if t.rank() != 1 || t.len() != c {
                    return Err(CatnError::shape("stack_rows", first.shape(), t.shape()));
                }
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(inputs.len(), c, data)
        }
        Reshape(shape) => {
            let x = inputs[0];
            if shape.iter().product::<usize>() != x.len() {
                return Err(CatnError::shape("reshape", x.shape(), shape));
            }
            Tensor::new(shape.clone(), x.data().to_vec())?
        }
    };
    Ok(out)
}

fn conv_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (l, din) = as_matrix("conv1d_same", x, w)?;
    let [n, s, din_w] = *w.shape() else {
        return Err(CatnError::shape("conv1d_same", x.shape(), w.shape()));
    };
    if s % 2 == 0 {
        return Err(CatnError::InvalidArgument(format!(
            "conv1d_same needs an odd window size, got {s}"
        )));
    }
    if din_w != din {
        return Err(CatnError::shape("conv1d_same", x.shape(), w.shape()));
    }
    if b.shape() != [n] {
        return Err(CatnError::shape("conv1d_same", w.shape(), b.shape()));
    }
    Ok((l, din, n, s))
}

fn conv1d_same_forward(x: &[f64], w: &[f64], b: &[f64], l: usize, din: usize, n: usize, s: usize) -> Tensor {
    let half = (s - 1) / 2;
    let mut out = vec![0.0; l * n];
    for h in 0..l {
        let orow = &mut out[h * n..(h + 1) * n];
        orow.copy_from_slice(b);
        for t in 0..s {
            let pos = h + t;
            if pos < half || pos - half >= l {
                continue;
            }
            let xrow = &x[(pos - half) * din..(pos - half + 1) * din];
            for (i, o) in orow.iter_mut().enumerate() {
                let wrow = &w[(i * s + t) * din..(i * s + t + 1) * din];
                *o += wrow.iter().zip(xrow).map(|(a, c)| a * c).sum::<f64>();
            }
        }
    }
    Tensor::matrix(l, n, out)
}

fn token_indices(ids: &Tensor, rows: usize) -> Result<Vec<usize>> {
    ids.data()
        .iter()
        .map(|&v| {
            if v < 0.0 || v.fract() != 0.0 || v as usize >= rows {
                Err(CatnError::OutOfVocabulary {
                    id: if v < 0.0 { usize::MAX } else { v as usize },
                    rows,
                })
            } else {
                Ok(v as usize)
            }
        })
        .collect()
}

pub(crate) fn masked_softmax(x: &[f64], mask: &[f64]) -> Vec<f64> {
    let max = x
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m != 0.0)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; x.len()];
    }
    let mut out: Vec<f64> = x
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m != 0.0 { (v - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

/// Vector-Jacobian products of one op. Entry `k` is `None` when input `k`
/// does not need a gradient.
fn backward_op(kind: &OpKind, inputs: &[&Tensor], out: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    use OpKind::*;
    let mut res: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    match kind {
        MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = a.dims2();
            let n = b.shape()[1];
            if needs[0] {
                res[0] = Some(mm_bt(g, b.data(), m, n, k));
            }
            if needs[1] {
                res[1] = Some(mm_at(a.data(), g, m, k, n));
            }
        }
        Conv1dSame => {
            let (x, w) = (inputs[0], inputs[1]);
            let (l, din) = x.dims2();
            let (n, s) = (w.shape()[0], w.shape()[1]);
            let half = (s - 1) / 2;
            let mut gx = needs[0].then(|| vec![0.0; l * din]);
            let mut gw = needs[1].then(|| vec![0.0; n * s * din]);
            if gx.is_some() || gw.is_some() {
                for h in 0..l {
                    let grow = &g[h * n..(h + 1) * n];
                    for t in 0..s {
                        let pos = h + t;
                        if pos < half || pos - half >= l {
                            continue;
                        }
                        let src = pos - half;
                        for (i, &gi) in grow.iter().enumerate() {
                            if gi == 0.0 {
                                continue;
                            }
                            let woff = (i * s + t) * din;
                            if let Some(gx) = gx.as_mut() {
                                let dst = &mut gx[src * din..(src + 1) * din];
                                for (d, wv) in dst.iter_mut().zip(&w.data()[woff..woff + din]) {
                                    *d += gi * wv;
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                let dst = &mut gw[woff..woff + din];
                                for (d, xv) in dst.iter_mut().zip(x.row(src)) {
                                    *d += gi * xv;
                                }
                            }
                        }
                    }
                }
            }
            res[0] = gx;
            res[1] = gw;
            if needs[2] {
                let mut gb = vec![0.0; n];
                for h in 0..l {
                    for (acc, v) in gb.iter_mut().zip(&g[h * n..(h + 1) * n]) {
                        *acc += v;
                    }
                }
                res[2] = Some(gb);
            }
        }
        EmbeddingLookup { padding_idx } => {
            if needs[0] {
                let table = inputs[0];
                let (rows, d) = table.dims2();
                let mut gt = vec![0.0; rows * d];
                for (j, &id) in inputs[1].data().iter().enumerate() {
                    let id = id as usize;
                    if Some(id) == *padding_idx {
                        continue;
                    }
                    for (acc, v) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[j * d..(j + 1) * d]) {
                        *acc += v;
                    }
                }
                res[0] = Some(gt);
            }
        }
        Relu => {
            res[0] = Some(inputs[0].data().iter().zip(g).map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 }).collect());
        }
        Sigmoid => {
            res[0] = Some(out.data().iter().zip(g).map(|(&y, &gv)| gv * y * (1.0 - y)).collect());
        }
        Tanh => {
            res[0] = Some(out.data().iter().zip(g).map(|(&y, &gv)| gv * (1.0 - y * y)).collect());
        }
        LeakyRelu(alpha) => {
            res[0] = Some(
                inputs[0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { alpha * gv })
                    .collect(),
            );
        }
        Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if needs[0] {
                res[0] = Some(b.data().iter().zip(g).map(|(x, y)| x * y).collect());
            }
            if needs[1] {
                res[1] = Some(a.data().iter().zip(g).map(|(x, y)| x * y).collect());
            }
        }
        Sub => {
            if needs[0] {
                res[0] = Some(g.to_vec());
            }
            if needs[1] {
                res[1] = Some(g.iter().map(|v| -v).collect());
            }
        }
        Add => {
            if needs[0] {
                res[0] = Some(g.to_vec());
            }
            if needs[1] {
                let b = inputs[1];
                if b.shape() == inputs[0].shape() {
                    res[1] = Some(g.to_vec());
                } else {
                    let c = b.len();
                    let mut gb = vec![0.0; c];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % c] += v;
                    }
                    res[1] = Some(gb);
                }
            }
        }
        Concat => {
            let (a, b) = (inputs[0], inputs[1]);
            let (rows, ca) = a.dims2();
            let cb = b.dims2().1;
            let mut ga = Vec::with_capacity(a.len());
            let mut gb = Vec::with_capacity(b.len());
            for r in 0..rows {
                let grow = &g[r * (ca + cb)..(r + 1) * (ca + cb)];
                ga.extend_from_slice(&grow[..ca]);
                gb.extend_from_slice(&grow[ca..]);
            }
            if needs[0] {
                res[0] = Some(ga);
            }
            if needs[1] {
                res[1] = Some(gb);
            }
        }
        MaskedSoftmax => {
            if needs[0] {
                let y = out.data();
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                res[0] = Some(y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)).collect());
            }
        }
        WeightedSum => {
            let (w, v) = (inputs[0], inputs[1]);
            let (l, k) = v.dims2();
            if needs[0] {
                res[0] = Some((0..l).map(|j| v.row(j).iter().zip(g).map(|(a, b)| a * b).sum()).collect());
            }
            if needs[1] {
                let mut gv = vec![0.0; l * k];
                for (j, &wj) in w.data().iter().enumerate() {
                    for (d, gi) in gv[j * k..(j + 1) * k].iter_mut().zip(g) {
                        *d = wj * gi;
                    }
                }
                res[1] = Some(gv);
            }
        }
        MeanAll => {
            let n = inputs[0].len();
            res[0] = Some(vec![g[0] / n as f64; n]);
        }
        SumAll => {
            res[0] = Some(vec![g[0]; inputs[0].len()]);
        }
        ScalarAdd => {
            if needs[0] {
                res[0] = Some(g.to_vec());
            }
            if needs[1] {
                res[1] = Some(vec![g.iter().sum()]);
            }
        }
        Transpose => {
            let (r, c) = inputs[0].dims2();
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] = g[j * r + i];
                }
            }
            res[0] = Some(ga);
        }
        Scale(c) => {
            res[0] = Some(g.iter().map(|v| v * c).collect());
        }
        Row(r) => {
            let (rows, c) = inputs[0].dims2();
            let mut ga = vec![0.0; rows * c];
            ga[r * c..(r + 1) * c].copy_from_slice(g);
            res[0] = Some(ga);
        }
        StackRows => {
            let c = inputs[0].len();
            for (k, need) in needs.iter().enumerate() {
                if *need {
                    res[k] = Some(g[k * c..(k + 1) * c].to_vec());
                }
            }
        }
        Reshape(_) => {
            res[0] = Some(g.to_vec());
        }
    }
    for (k, need) in needs.iter().enumerate() {
        if !need {
            res[k] = None;
        }
    }
    res
}
