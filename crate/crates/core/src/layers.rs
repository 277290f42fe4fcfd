//! Neural network layers on top of [`Graph`]: convolution, max-pooling,
//! dense projection, embedding lookup, GRU and LSTM cells, and the
//! softmax cross-entropy objective.
//!
//! Convolution, pooling, embedding and the loss are recorded as fused
//! [`CustomOp`]s with hand-written backward passes. The recurrent cells are
//! composed from elementary graph operations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, CustomOp, Graph, Tensor, Var};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(name, shape)` in insertion order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), graph.param(t.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Registers every tensor as a constant (inference, no gradients).
    pub fn bind_constants(&self, graph: &mut Graph) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), graph.constant(t.clone())))
            .collect();
        BoundParams { vars }
    }
}

/// Parameter names mapped to graph leaves for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn from_vars(vars: Vec<(String, Var)>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Uniform in `[-limit, limit]`, `limit = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Debug)]
struct Conv2dOp {
    stride: usize,
    padding: usize,
    batched: bool,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernels: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    /// Output columns `oj` for which input column `oj * stride + kj - padding`
    /// is inside the image.
    fn valid_cols(&self, kj: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride, self.padding);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        // oj * s + kj - p <= width - 1
        let hi = if self.width + p < kj + 1 {
            0
        } else {
            ((self.width - 1 + p - kj) / s + 1).min(self.out_w)
        };
        lo..hi.max(lo)
    }

    fn input_row(&self, oi: usize, ki: usize) -> Option<usize> {
        let r = oi * self.stride + ki;
        (r >= self.padding && r - self.padding < self.height).then(|| r - self.padding)
    }
}

fn conv_geometry(input: &[usize], kernel: &[usize], bias: &[usize], stride: usize, padding: usize) -> Result<(ConvGeom, bool)> {
    let (batched, b, c, h, w) = match *input {
        [c, h, w] => (false, 1, c, h, w),
        [b, c, h, w] => (true, b, c, h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: input.to_vec(),
                reason: "input must be C×H×W or B×C×H×W".into(),
            })
        }
    };
    let [k, kc, kh, kw] = *kernel else {
        return Err(Error::InvalidShape {
            op: "conv2d",
            shape: kernel.to_vec(),
            reason: "kernels must be K×C×kh×kw".into(),
        });
    };
    if kc != c || bias != [k] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: input.to_vec(),
            right: kernel.to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: input.to_vec(),
            right: kernel.to_vec(),
        });
    }
    let out_h = (h + 2 * padding - kh) / stride + 1;
    let out_w = (w + 2 * padding - kw) / stride + 1;
    Ok((
        ConvGeom {
            batch: b,
            channels: c,
            height: h,
            width: w,
            kernels: k,
            kh,
            kw,
            out_h,
            out_w,
            stride,
            padding,
        },
        batched,
    ))
}

impl ConvGeom {
    fn taps(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn plane_out(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unrolls one image into a `taps × plane_out` matrix; row
    /// `(c·kh + ki)·kw + kj` holds the input value under that kernel tap for
    /// every output position, or 0 where the tap falls into the padding.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let plane_out = self.plane_out();
        col.fill(0.0);
        for c in 0..self.channels {
            let xin = &x[c * self.height * self.width..][..self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let q = (c * self.kh + ki) * self.kw + kj;
                    let row = &mut col[q * plane_out..][..plane_out];
                    let cols = self.valid_cols(kj);
                    for oi in 0..self.out_h {
                        let Some(r) = self.input_row(oi, ki) else { continue };
                        let xrow = &xin[r * self.width..][..self.width];
                        let dst = &mut row[oi * self.out_w..][..self.out_w];
                        for oj in cols.clone() {
                            dst[oj] = xrow[oj * self.stride + kj - self.padding];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters tap gradients back onto
    /// the image.
    fn col2im(&self, col: &[f64], gx: &mut [f64]) {
        let plane_out = self.plane_out();
        for c in 0..self.channels {
            let gin = &mut gx[c * self.height * self.width..][..self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let q = (c * self.kh + ki) * self.kw + kj;
                    let row = &col[q * plane_out..][..plane_out];
                    let cols = self.valid_cols(kj);
                    for oi in 0..self.out_h {
                        let Some(r) = self.input_row(oi, ki) else { continue };
                        let grow = &mut gin[r * self.width..][..self.width];
                        let src = &row[oi * self.out_w..][..self.out_w];
                        for oj in cols.clone() {
                            grow[oj * self.stride + kj - self.padding] += src[oj];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip). Input is `C×H×W` or `B×C×H×W`,
/// kernels `K×C×kh×kw`, bias `K`. Each output starts at its bias and
/// accumulates `w * x` over channel, kernel row, kernel column in ascending
/// order; padded taps contribute an exact zero.
pub fn conv2d(graph: &mut Graph, input: Var, kernels: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
    let (geo, batched) = conv_geometry(
        graph.shape(input),
        graph.shape(kernels),
        graph.shape(bias),
        stride,
        padding,
    )?;
    let x = graph.value(input).data();
    let wt = graph.value(kernels).data();
    let bs = graph.value(bias).data();
    let plane_in = geo.channels * geo.height * geo.width;
    let plane_out = geo.plane_out();
    let taps = geo.taps();
    let mut out = vec![0.0; geo.batch * geo.kernels * plane_out];
    let mut col = vec![0.0; taps * plane_out];

    for b in 0..geo.batch {
        geo.im2col(&x[b * plane_in..][..plane_in], &mut col);
        for k in 0..geo.kernels {
            let o = &mut out[(b * geo.kernels + k) * plane_out..][..plane_out];
            o.fill(bs[k]);
            for (q, &wv) in wt[k * taps..][..taps].iter().enumerate() {
                for (ov, &xv) in o.iter_mut().zip(&col[q * plane_out..][..plane_out]) {
                    *ov += wv * xv;
                }
            }
        }
    }
    let shape = if batched {
        vec![geo.batch, geo.kernels, geo.out_h, geo.out_w]
    } else {
        vec![geo.kernels, geo.out_h, geo.out_w]
    };
    let output = Tensor::new(shape, out)?;
    graph.custom(
        Box::new(Conv2dOp {
            stride,
            padding,
            batched,
        }),
        vec![input, kernels, bias],
        output,
    )
}

impl CustomOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (input, kernels, bias) = (inputs[0], inputs[1], inputs[2]);
        let (geo, _) = conv_geometry(input.shape(), kernels.shape(), bias.shape(), self.stride, self.padding)
            .expect("validated in forward");
        debug_assert_eq!(self.batched, input.rank() == 4);
        let x = input.data();
        let wt = kernels.data();
        let g = grad_out.data();
        let plane_in = geo.channels * geo.height * geo.width;
        let plane_out = geo.plane_out();
        let taps = geo.taps();
        let need_x = needs[0];
        let mut gx = vec![0.0; if need_x { x.len() } else { 0 }];
        let mut gw = vec![0.0; wt.len()];
        let mut gb = vec![0.0; geo.kernels];
        let mut col = vec![0.0; taps * plane_out];
        let mut gcol = vec![0.0; if need_x { taps * plane_out } else { 0 }];

        for b in 0..geo.batch {
            geo.im2col(&x[b * plane_in..][..plane_in], &mut col);
            gcol.fill(0.0);
            for k in 0..geo.kernels {
                let go = &g[(b * geo.kernels + k) * plane_out..][..plane_out];
                gb[k] += go.iter().sum::<f64>();
                for q in 0..taps {
                    let crow = &col[q * plane_out..][..plane_out];
                    gw[k * taps + q] += dot(go, crow);
                    if need_x {
                        let wv = wt[k * taps + q];
                        for (gc, &gv) in gcol[q * plane_out..][..plane_out].iter_mut().zip(go) {
                            *gc += wv * gv;
                        }
                    }
                }
            }
            if need_x {
                geo.col2im(&gcol, &mut gx[b * plane_in..][..plane_in]);
            }
        }
        vec![
            need_x.then(|| Tensor::new(input.shape().to_vec(), gx).expect("same shape")),
            Some(Tensor::new(kernels.shape().to_vec(), gw).expect("same shape")),
            Some(Tensor::new(bias.shape().to_vec(), gb).expect("same shape")),
        ]
    }
}

/// Dot product with four independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut part = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            part[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (part[0] + part[1]) + (part[2] + part[3]) + tail
}

// ---------------------------------------------------------------------------
// Max pooling

#[derive(Debug)]
struct MaxPoolOp {
    /// Flat input index that produced each output element.
    argmax: Vec<usize>,
}

/// Max over `window×window` patches. Ties go to the first position in
/// row-major order, which also receives the whole gradient.
pub fn maxpool2d(graph: &mut Graph, input: Var, window: usize, stride: usize) -> Result<Var> {
    let shape = graph.shape(input).to_vec();
    let (lead, h, w) = match shape.as_slice() {
        [c, h, w] => (*c, *h, *w),
        [b, c, h, w] => (b * c, *h, *w),
        _ => {
            return Err(Error::InvalidShape {
                op: "maxpool2d",
                shape,
                reason: "input must be C×H×W or B×C×H×W".into(),
            })
        }
    };
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::InvalidShape {
            op: "maxpool2d",
            shape,
            reason: format!("window {window} / stride {stride} do not fit"),
        });
    }
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let x = graph.value(input).data();
    let mut out = Vec::with_capacity(lead * out_h * out_w);
    let mut argmax = Vec::with_capacity(lead * out_h * out_w);
    for p in 0..lead {
        let base = p * h * w;
        for oi in 0..out_h {
            for oj in 0..out_w {
                let mut best = base + oi * stride * w + oj * stride;
                for di in 0..window {
                    for dj in 0..window {
                        let idx = base + (oi * stride + di) * w + oj * stride + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let mut out_shape = shape.clone();
    let n = out_shape.len();
    out_shape[n - 2] = out_h;
    out_shape[n - 1] = out_w;
    let output = Tensor::new(out_shape, out)?;
    graph.custom(Box::new(MaxPoolOp { argmax }), vec![input], output)
}

impl CustomOp for MaxPoolOp {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let mut gx = Tensor::zeros_like(inputs[0]);
        let d = gx.data_mut();
        for (&idx, &g) in self.argmax.iter().zip(grad_out.data()) {
            d[idx] += g;
        }
        vec![Some(gx)]
    }
}

// ---------------------------------------------------------------------------
// Dense and embedding

/// `x · W + b`, bias broadcast over rows.
pub fn dense(graph: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let xw = graph.matmul(x, weight)?;
    graph.add(xw, bias)
}

#[derive(Debug)]
struct EmbeddingOp {
    ids: Vec<usize>,
}

/// Gathers rows of a `V×d` table; the gradient scatters back into them.
pub fn embedding(graph: &mut Graph, ids: &[usize], table: Var) -> Result<Var> {
    let shape = graph.shape(table).to_vec();
    let [vocab, dim] = shape[..] else {
        return Err(Error::InvalidShape {
            op: "embedding",
            shape,
            reason: "table must be V×d".into(),
        });
    };
    if ids.is_empty() {
        return Err(Error::Empty("embedding ids"));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            size: vocab,
        });
    }
    let t = graph.value(table).data();
    let mut out = Vec::with_capacity(ids.len() * dim);
    for &i in ids {
        out.extend_from_slice(&t[i * dim..(i + 1) * dim]);
    }
    let output = Tensor::new(vec![ids.len(), dim], out)?;
    graph.custom(Box::new(EmbeddingOp { ids: ids.to_vec() }), vec![table], output)
}

impl CustomOp for EmbeddingOp {
    fn name(&self) -> &'static str {
        "embedding"
    }

    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let dim = inputs[0].shape()[1];
        let mut gt = Tensor::zeros_like(inputs[0]);
        let d = gt.data_mut();
        for (row, &i) in grad_out.data().chunks(dim).zip(&self.ids) {
            for (a, b) in d[i * dim..(i + 1) * dim].iter_mut().zip(row) {
                *a += b;
            }
        }
        vec![Some(gt)]
    }
}

// ---------------------------------------------------------------------------
// Recurrent cells

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    /// Gate suffixes; every gate owns `W_<g>` (input×hidden), `U_<g>`
    /// (hidden×hidden) and `b_<g>` (hidden).
    pub fn gates(self) -> &'static [&'static str] {
        match self {
            CellKind::Gru => &["z", "r", "h"],
            CellKind::Lstm => &["i", "f", "o", "g"],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CellKind::Gru => "GRU",
            CellKind::Lstm => "LSTM",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            _ => Err(Error::UnknownKind {
                what: "recurrent cell",
                name: s.to_string(),
            }),
        }
    }
}

/// Named tensors for one layer, as stored in a model's [`ParamStore`] under
/// `<name>.<tensor>`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub name: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl LayerParams {
    /// Glorot-initialized matrices and zero biases for a recurrent cell.
    pub fn recurrent<R: Rng>(name: &str, kind: CellKind, input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut tensors = Vec::new();
        for g in kind.gates() {
            tensors.push((format!("W_{g}"), glorot_uniform(rng, &[input, hidden], input, hidden)));
            tensors.push((format!("U_{g}"), glorot_uniform(rng, &[hidden, hidden], hidden, hidden)));
            tensors.push((format!("b_{g}"), Tensor::zeros(&[hidden])));
        }
        Self {
            name: name.to_string(),
            tensors,
        }
    }

    /// Every tensor set to zero.
    pub fn zeroed(name: &str, kind: CellKind, input: usize, hidden: usize) -> Self {
        let mut tensors = Vec::new();
        for g in kind.gates() {
            tensors.push((format!("W_{g}"), Tensor::zeros(&[input, hidden])));
            tensors.push((format!("U_{g}"), Tensor::zeros(&[hidden, hidden])));
            tensors.push((format!("b_{g}"), Tensor::zeros(&[hidden])));
        }
        Self {
            name: name.to_string(),
            tensors,
        }
    }

    pub fn insert_into(self, store: &mut ParamStore) -> Result<()> {
        for (t, v) in self.tensors {
            store.insert(format!("{}.{t}", self.name), v)?;
        }
        Ok(())
    }
}

/// Gate weights of one recurrent cell bound into a graph.
#[derive(Clone, Debug)]
pub struct CellVars {
    kind: CellKind,
    /// `(W, U, b)` per gate in [`CellKind::gates`] order.
    gates: Vec<(Var, Var, Var)>,
}

impl CellVars {
    pub fn from_bound(bound: &BoundParams, prefix: &str, kind: CellKind) -> Result<Self> {
        let gates = kind
            .gates()
            .iter()
            .map(|g| {
                Ok((
                    bound.var(&format!("{prefix}.W_{g}"))?,
                    bound.var(&format!("{prefix}.U_{g}"))?,
                    bound.var(&format!("{prefix}.b_{g}"))?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { kind, gates })
    }

    /// Binds a standalone [`LayerParams`] as differentiable leaves.
    pub fn bind(graph: &mut Graph, params: &LayerParams, kind: CellKind) -> Result<Self> {
        let mut store = ParamStore::new();
        params.clone().insert_into(&mut store)?;
        let bound = store.bind(graph);
        Self::from_bound(&bound, &params.name, kind)
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn hidden(&self, graph: &Graph) -> usize {
        graph.shape(self.gates[0].2)[0]
    }

    /// `x·W + h·U + b` for gate `i`, with `h` optionally replaced.
    fn pre_activation(&self, graph: &mut Graph, i: usize, x: Var, h: Var) -> Result<Var> {
        let (w, u, b) = self.gates[i];
        let xw = graph.matmul(x, w)?;
        let hu = graph.matmul(h, u)?;
        let s = graph.add(xw, hu)?;
        graph.add(s, b)
    }
}

/// Lifts rank-1 inputs to a single-row batch.
fn as_batch(graph: &mut Graph, v: Var, what: &'static str) -> Result<(Var, bool)> {
    match graph.shape(v).len() {
        1 => {
            let n = graph.shape(v)[0];
            Ok((graph.reshape(v, &[1, n])?, true))
        }
        2 => Ok((v, false)),
        _ => Err(Error::InvalidShape {
            op: what,
            shape: graph.shape(v).to_vec(),
            reason: "expected a vector or a batch of row vectors".into(),
        }),
    }
}

fn check_state(graph: &Graph, cell: &CellVars, x: Var, h: Var, op: &'static str) -> Result<()> {
    let n = cell.hidden(graph);
    let (xs, hs) = (graph.shape(x), graph.shape(h));
    let input = graph.shape(cell.gates[0].0)[0];
    if hs[1] != n || xs[1] != input || xs[0] != hs[0] {
        return Err(Error::ShapeMismatch {
            op,
            left: xs.to_vec(),
            right: hs.to_vec(),
        });
    }
    Ok(())
}

/// One GRU step:
/// `z = σ(xW_z + hU_z + b_z)`, `r = σ(xW_r + hU_r + b_r)`,
/// `h̃ = tanh(xW_h + (r⊙h)U_h + b_h)`, `h' = (1−z)⊙h + z⊙h̃`.
pub fn gru_step(graph: &mut Graph, x: Var, h: Var, cell: &CellVars) -> Result<Var> {
    if cell.kind != CellKind::Gru {
        return Err(Error::Config("gru_step needs GRU parameters".into()));
    }
    let (x, single) = as_batch(graph, x, "gru_step")?;
    let (h, _) = as_batch(graph, h, "gru_step")?;
    check_state(graph, cell, x, h, "gru_step")?;

    let z_pre = cell.pre_activation(graph, 0, x, h)?;
    let z = graph.sigmoid(z_pre)?;
    let r_pre = cell.pre_activation(graph, 1, x, h)?;
    let r = graph.sigmoid(r_pre)?;
    let rh = graph.mul(r, h)?;
    let cand_pre = cell.pre_activation(graph, 2, x, rh)?;
    let cand = graph.tanh(cand_pre)?;
    let keep = graph.one_minus(z)?;
    let old = graph.mul(keep, h)?;
    let new = graph.mul(z, cand)?;
    let out = graph.add(old, new)?;
    if single {
        let n = graph.shape(out)[1];
        graph.reshape(out, &[n])
    } else {
        Ok(out)
    }
}

/// One LSTM step:
/// `i, f, o = σ(xW + hU + b)`, `g = tanh(xW_g + hU_g + b_g)`,
/// `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_step(graph: &mut Graph, x: Var, h: Var, c: Var, cell: &CellVars) -> Result<(Var, Var)> {
    if cell.kind != CellKind::Lstm {
        return Err(Error::Config("lstm_step needs LSTM parameters".into()));
    }
    let (x, single) = as_batch(graph, x, "lstm_step")?;
    let (h, _) = as_batch(graph, h, "lstm_step")?;
    let (c, _) = as_batch(graph, c, "lstm_step")?;
    check_state(graph, cell, x, h, "lstm_step")?;
    if graph.shape(c) != graph.shape(h) {
        return Err(Error::ShapeMismatch {
            op: "lstm_step",
            left: graph.shape(h).to_vec(),
            right: graph.shape(c).to_vec(),
        });
    }

    let gate = |graph: &mut Graph, i: usize| -> Result<Var> {
        let pre = cell.pre_activation(graph, i, x, h)?;
        if i == 3 {
            graph.tanh(pre)
        } else {
            graph.sigmoid(pre)
        }
    };
    let ig = gate(graph, 0)?;
    let fg = gate(graph, 1)?;
    let og = gate(graph, 2)?;
    let gg = gate(graph, 3)?;
    let fc = graph.mul(fg, c)?;
    let ic = graph.mul(ig, gg)?;
    let c_next = graph.add(fc, ic)?;
    let tc = graph.tanh(c_next)?;
    let h_next = graph.mul(og, tc)?;
    if single {
        let n = graph.shape(h_next)[1];
        Ok((graph.reshape(h_next, &[n])?, graph.reshape(c_next, &[n])?))
    } else {
        Ok((h_next, c_next))
    }
}

// ---------------------------------------------------------------------------
// Loss

#[derive(Debug)]
struct SoftmaxCrossEntropyOp {
    probs: Vec<f64>,
    targets: Vec<Option<usize>>,
    count: usize,
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits` (`B×V`). Positions equal to `ignore_index` do not count.
pub fn softmax_cross_entropy(graph: &mut Graph, logits: Var, targets: &[usize], ignore_index: Option<usize>) -> Result<Var> {
    let shape = graph.shape(logits).to_vec();
    let [rows, vocab] = shape[..] else {
        return Err(Error::InvalidShape {
            op: "softmax_cross_entropy",
            shape,
            reason: "logits must be B×V".into(),
        });
    };
    if targets.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: shape,
            right: vec![targets.len()],
        });
    }
    let kept: Vec<Option<usize>> = targets
        .iter()
        .map(|&t| (Some(t) != ignore_index).then_some(t))
        .collect();
    if let Some(bad) = kept.iter().flatten().find(|&&t| t >= vocab) {
        return Err(Error::IndexOutOfRange {
            index: *bad,
            size: vocab,
        });
    }
    let count = kept.iter().flatten().count();
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut probs = graph.value(logits).data().to_vec();
    let mut total = 0.0;
    let raw = graph.value(logits).data();
    for (r, t) in kept.iter().enumerate() {
        let row = &raw[r * vocab..(r + 1) * vocab];
        softmax_in_place(&mut probs[r * vocab..(r + 1) * vocab]);
        if let Some(t) = t {
            // log-sum-exp form stays accurate when the target dominates
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[*t];
        }
    }
    let loss = Tensor::scalar(total / count as f64);
    graph.custom(
        Box::new(SoftmaxCrossEntropyOp {
            probs,
            targets: kept,
            count,
        }),
        vec![logits],
        loss,
    )
}

impl CustomOp for SoftmaxCrossEntropyOp {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let vocab = inputs[0].shape()[1];
        let scale = grad_out.item() / self.count as f64;
        let mut g = vec![0.0; self.probs.len()];
        for (r, t) in self.targets.iter().enumerate() {
            let Some(t) = t else { continue };
            let row = &mut g[r * vocab..(r + 1) * vocab];
            for (o, p) in row.iter_mut().zip(&self.probs[r * vocab..]) {
                *o = p * scale;
            }
            row[*t] -= scale;
        }
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), g).expect("same shape"))]
    }
}
