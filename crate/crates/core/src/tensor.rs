//! Dense `f64` tensors and a tape that records operations for reverse-mode
//! differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes can only refer to
//! nodes created before them, so the recorded graph is acyclic by
//! construction and a reverse sweep over node ids is a valid topological
//! order for backprop.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("expects {n} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Size of the last dimension.
    fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Plain `[m, k] x [k, n]` product, accumulating each output over `k` in
/// ascending order.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Node handle inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    MatMul,
}

impl FromStr for BinaryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Self::Add),
            "sub" => Ok(Self::Sub),
            "mul" | "mul_elementwise" => Ok(Self::Mul),
            "matmul" => Ok(Self::MatMul),
            _ => Err(Error::UnknownKind {
                what: "binary op",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Sum,
    SoftmaxRows,
}

impl FromStr for UnaryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "sigmoid" => Ok(Self::Sigmoid),
            "relu" => Ok(Self::Relu),
            "exp" => Ok(Self::Exp),
            "log" => Ok(Self::Log),
            "sum" => Ok(Self::Sum),
            "softmax_rows" => Ok(Self::SoftmaxRows),
            _ => Err(Error::UnknownKind {
                what: "unary op",
                name: s.to_string(),
            }),
        }
    }
}

/// An operation defined outside this module (layers use this for
/// convolution, pooling, lookups and fused losses).
pub trait CustomOp: Send + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order. `None` marks an
    /// input that receives no gradient; `needs[i]` is false when input `i`
    /// does not require one, so it may be skipped.
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor, needs: &[bool])
        -> Vec<Option<Tensor>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    /// `alpha * x + beta`
    Affine(Var, f64),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by node.
#[derive(Debug, Default)]
pub struct GradientMap {
    entries: HashMap<Var, Tensor>,
}

impl GradientMap {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.entries.get(&v)
    }

    pub fn remove(&mut self, v: Var) -> Option<Tensor> {
        self.entries.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }
}

/// Operation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a [`CustomOp`] whose forward value has already been computed.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: Vec<Var>, output: Tensor) -> Result<Var> {
        check_finite(op.name(), &output)?;
        let rg = self.any_grad(&inputs);
        Ok(self.push(output, Op::Custom(op, inputs), rg))
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = match kind {
            BinaryKind::MatMul => {
                let op = "matmul";
                if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0] {
                    return Err(Error::ShapeMismatch {
                        op,
                        left: ta.shape.clone(),
                        right: tb.shape.clone(),
                    });
                }
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                Tensor {
                    shape: vec![m, n],
                    data: matmul_raw(&ta.data, &tb.data, m, k, n),
                }
            }
            _ => {
                let (op, f): (&'static str, fn(f64, f64) -> f64) = match kind {
                    BinaryKind::Add => ("add", |x, y| x + y),
                    BinaryKind::Sub => ("sub", |x, y| x - y),
                    _ => ("mul", |x, y| x * y),
                };
                elementwise(op, ta, tb, f)?
            }
        };
        check_finite(kind_name(kind), &out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::MatMul, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = match kind {
            UnaryKind::Tanh => x.map(f64::tanh),
            UnaryKind::Sigmoid => x.map(sigmoid),
            UnaryKind::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
            UnaryKind::Exp => x.map(f64::exp),
            UnaryKind::Log => {
                if let Some(bad) = x.data.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                x.map(f64::ln)
            }
            UnaryKind::Sum => Tensor::scalar(x.data.iter().sum()),
            UnaryKind::SoftmaxRows => {
                if x.rank() == 0 {
                    return Err(Error::InvalidShape {
                        op: "softmax_rows",
                        shape: x.shape.clone(),
                        reason: "rank must be at least 1".into(),
                    });
                }
                let cols = x.cols();
                let mut data = x.data.clone();
                for row in data.chunks_mut(cols) {
                    softmax_in_place(row);
                }
                Tensor {
                    shape: x.shape.clone(),
                    data,
                }
            }
        };
        check_finite(unary_name(kind), &out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Unary(kind, a), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sum, a)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::SoftmaxRows, a)
    }

    /// `alpha * a + beta`, elementwise.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Result<Var> {
        let out = self.value(a).map(|v| alpha * v + beta);
        check_finite("affine", &out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Affine(a, alpha), rg))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -1.0, 1.0)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let n: usize = shape.iter().product();
        if n != src.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: src.shape.clone(),
                right: shape.to_vec(),
            });
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: src.data.clone(),
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Stacks tensors along their first dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_rows input"))?;
        let tail = self.value(*first).shape[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.shape[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(*first).shape.clone(),
                    right: t.shape.clone(),
                });
            }
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor { shape, data }, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Reverse sweep from a scalar root. Every node that requires a gradient
    /// and is reachable from `root` appears in the result.
    pub fn backprop(&self, root: Var) -> Result<GradientMap> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape.clone()));
        }
        let mut map = GradientMap::default();
        if !self.nodes[root.0].requires_grad {
            return Ok(map);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(&root_val.shape));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, ig) in self.input_grads(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
            map.entries.insert(Var(idx), g);
        }
        Ok(map)
    }

    fn input_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                match kind {
                    BinaryKind::Add => vec![(*a, g.clone()), (*b, reduce_to(g, tb))],
                    BinaryKind::Sub => vec![(*a, g.clone()), (*b, reduce_to(&g.map(|v| -v), tb))],
                    BinaryKind::Mul => {
                        let ga = elementwise("mul", g, tb, |x, y| x * y).expect("checked in forward");
                        let gb_full = zip_map(g, ta, |x, y| x * y);
                        vec![(*a, ga), (*b, reduce_to(&gb_full, tb))]
                    }
                    BinaryKind::MatMul => {
                        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                        let mut out = Vec::with_capacity(2);
                        if self.requires_grad(*a) {
                            let bt = transpose_raw(&tb.data, k, n);
                            let ga = matmul_raw(&g.data, &bt, m, n, k);
                            out.push((*a, Tensor { shape: ta.shape.clone(), data: ga }));
                        }
                        if self.requires_grad(*b) {
                            let at = transpose_raw(&ta.data, m, k);
                            let gb = matmul_raw(&at, &g.data, k, m, n);
                            out.push((*b, Tensor { shape: tb.shape.clone(), data: gb }));
                        }
                        out
                    }
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let gx = match kind {
                    UnaryKind::Tanh => zip_map(g, y, |g, y| g * (1.0 - y * y)),
                    UnaryKind::Sigmoid => zip_map(g, y, |g, y| g * y * (1.0 - y)),
                    UnaryKind::Relu => zip_map(g, x, |g, x| if x > 0.0 { g } else { 0.0 }),
                    UnaryKind::Exp => zip_map(g, y, |g, y| g * y),
                    UnaryKind::Log => zip_map(g, x, |g, x| g / x),
                    UnaryKind::Sum => Tensor::full(&x.shape, g.data[0]),
                    UnaryKind::SoftmaxRows => {
                        let cols = y.cols();
                        let mut data = vec![0.0; y.len()];
                        for ((out, gr), yr) in data
                            .chunks_mut(cols)
                            .zip(g.data.chunks(cols))
                            .zip(y.data.chunks(cols))
                        {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                                *o = yv * (gv - dot);
                            }
                        }
                        Tensor {
                            shape: y.shape.clone(),
                            data,
                        }
                    }
                };
                vec![(*a, gx)]
            }
            Op::Affine(a, alpha) => vec![(*a, g.map(|v| alpha * v))],
            Op::Reshape(a) => vec![(
                *a,
                Tensor {
                    shape: self.value(*a).shape.clone(),
                    data: g.data.clone(),
                },
            )],
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let t = self.value(p);
                        let n = t.len();
                        let piece = Tensor {
                            shape: t.shape.clone(),
                            data: g.data[offset..offset + n].to_vec(),
                        };
                        offset += n;
                        (p, piece)
                    })
                    .collect()
            }
            Op::Custom(op, inputs) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.requires_grad(v)).collect();
                op.backward(g, &vals, y, &needs)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gi, &v)| gi.map(|t| (v, t)))
                    .collect()
            }
        }
    }
}

fn kind_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::MatMul => "matmul",
    }
}

fn unary_name(kind: UnaryKind) -> &'static str {
    match kind {
        UnaryKind::Tanh => "tanh",
        UnaryKind::Sigmoid => "sigmoid",
        UnaryKind::Relu => "relu",
        UnaryKind::Exp => "exp",
        UnaryKind::Log => "log",
        UnaryKind::Sum => "sum",
        UnaryKind::SoftmaxRows => "softmax_rows",
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// Equal shapes, or a rank-1 right operand broadcast over the rows of `a`.
fn elementwise(op: &'static str, a: &Tensor, b: &Tensor, f: fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        return Ok(zip_map(a, b, f));
    }
    if b.rank() == 1 && a.rank() >= 2 && a.cols() == b.shape[0] {
        let cols = b.shape[0];
        let data = a
            .data
            .chunks(cols)
            .flat_map(|row| row.iter().zip(&b.data).map(|(&x, &y)| f(x, y)))
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    Err(Error::ShapeMismatch {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    })
}

/// Sums a gradient over broadcast rows when `target` was broadcast.
fn reduce_to(g: &Tensor, target: &Tensor) -> Tensor {
    if g.shape == target.shape {
        return g.clone();
    }
    let cols = target.len();
    let mut data = vec![0.0; cols];
    for row in g.data.chunks(cols) {
        for (d, v) in data.iter_mut().zip(row) {
            *d += v;
        }
    }
    Tensor {
        shape: target.shape.clone(),
        data,
    }
}

/// Compares the backprop gradient of scalar `f` at `x` with central
/// differences. Returns the largest
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)` over coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    let grads = g.backprop(out)?;
    let analytic = grads
        .get(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros_like(x));

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + epsilon;
        let up = eval(&probe)?;
        probe.data[i] = orig - epsilon;
        let down = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic.data[i];
        let denom = 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
