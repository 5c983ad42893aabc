//! Eager reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it executes. Node indices are a
//! topological order, so [`Graph::backward`] is a single reverse sweep that
//! visits each node once and accumulates gradients additively at fan-out.
//! Parameters are borrowed, not copied, for the lifetime of the graph.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{param_err, Error, Result};
use crate::modulation::ModulationKind;
use crate::scalar::Scalar;
use crate::tensor::{self, relu6, relu6_grad, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Relu(Var),
    Relu6(Var),
    Abs(Var),
    Square(Var),
    Tanh(Var),
    Exp(Var),
    Modulate(ModulationKind, Var, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MeanRows(Var),
    SumAll(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    TileRows(Var),
    RepeatRows(Var, usize),
    MeanGroups(Var, usize),
    MeanTiles(Var, usize),
    GatherRows(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation counts gathered while a graph executes.
///
/// Matmul multiply-accumulates are attributed to the scope active when the
/// matmul ran; elementwise work is tallied per kind.
#[derive(Clone, Debug, Default)]
pub struct OpCounter {
    scope: String,
    pub matmul_macs: BTreeMap<String, u64>,
    pub elementwise: BTreeMap<String, u64>,
}

impl OpCounter {
    pub fn total_macs(&self) -> u64 {
        self.matmul_macs.values().sum()
    }

    fn add_macs(&mut self, n: usize) {
        *self.matmul_macs.entry(self.scope.clone()).or_default() += n as u64;
    }

    fn add_elementwise(&mut self, kind: &str, n: usize) {
        *self.elementwise.entry(kind.to_string()).or_default() += n as u64;
    }
}

pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    counter: Option<OpCounter>,
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            counter: None,
        }
    }

    /// A graph that counts multiply-accumulates and elementwise work.
    pub fn instrumented() -> Self {
        Self {
            nodes: Vec::new(),
            counter: Some(OpCounter::default()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Attributes subsequent matmul MACs to `scope`. No-op without a counter.
    pub fn set_scope(&mut self, scope: &str) {
        if let Some(c) = self.counter.as_mut() {
            c.scope.clear();
            c.scope.push_str(scope);
        }
    }

    pub fn counter(&self) -> Result<&OpCounter> {
        self.counter
            .as_ref()
            .ok_or_else(|| Error::Unavailable("graph was built without instrumentation".into()))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, op_name: &'static str) -> Result<Var> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = self.inputs_require_grad(&op);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_require_grad(&self, op: &Op<T>) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::Modulate(_, a, b) => rg(a) || rg(b),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Relu6(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::SoftmaxRows(a)
            | Op::MeanRows(a)
            | Op::SumAll(a)
            | Op::SliceCols(a, _)
            | Op::TileRows(a)
            | Op::RepeatRows(a, _)
            | Op::MeanGroups(a, _)
            | Op::MeanTiles(a, _)
            | Op::GatherRows(a, _) => rg(a),
            Op::LayerNorm { x, gain, bias, .. } => rg(x) || rg(gain) || rg(bias),
            Op::ConcatCols(parts) => parts.iter().any(rg),
            Op::CrossEntropy { logits, .. } => rg(logits),
        }
    }

    // ---- leaves ----

    /// Borrowed leaf that receives a gradient.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        if let Some(c) = self.counter.as_mut() {
            let (m, k) = self.nodes[a.0].value.dims2();
            c.add_macs(m * k * out.cols());
        }
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        if let Some(c) = self.counter.as_mut() {
            let (m, k) = self.nodes[a.0].value.dims2();
            c.add_macs(m * k * out.cols());
        }
        self.push(out, Op::MatMulNt(a, b), "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a), "transpose")
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v * s).collect());
        self.push(out, Op::Scale(a, s), "scale")
    }

    /// Adds the vector `bias` (length = columns of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let c = x.cols();
        if b.numel() != c {
            return Err(Error::Dimension {
                op: "add_row",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(out, Op::AddRow(a, bias), "add_row")
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>, name: &'static str) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect());
        self.push(out, op, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| v.max(T::zero()), Op::Relu(a), "relu")
    }

    pub fn relu6(&mut self, a: Var) -> Result<Var> {
        self.unary(a, relu6, Op::Relu6(a), "relu6")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, T::abs, Op::Abs(a), "abs")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| v * v, Op::Square(a), "square")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, T::tanh, Op::Tanh(a), "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, T::exp, Op::Exp(a), "exp")
    }

    /// Elementwise `kind(R = r, C = c)`.
    pub fn modulate(&mut self, kind: ModulationKind, r: Var, c: Var) -> Result<Var> {
        let out = crate::modulation::transfer(kind, self.value(r), self.value(c))?;
        if let Some(cnt) = self.counter.as_mut() {
            cnt.add_elementwise("modulation", out.numel());
        }
        self.push(out, Op::Modulate(kind, r, c), "modulate")
    }

    // ---- normalization ----

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows();
        if let Some(cnt) = self.counter.as_mut() {
            cnt.add_elementwise("softmax", out.numel());
        }
        self.push(out, Op::SoftmaxRows(a), "softmax_rows")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let e = xv.cols();
        if e < 2 {
            return Err(param_err("layer_norm needs at least 2 features"));
        }
        if g.numel() != e || b.numel() != e {
            return Err(Error::Dimension {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = Vec::with_capacity(xv.rows());
        for (row, dst) in xv.data().chunks(e).zip(xhat.chunks_mut(e)) {
            inv_std.push(tensor::standardize(row, dst, eps).1);
        }
        let out: Vec<T> = xhat
            .chunks(e)
            .flat_map(|row| {
                row.iter()
                    .zip(g.data().iter().zip(b.data()))
                    .map(|(&h, (&gv, &bv))| h * gv + bv)
            })
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        if let Some(cnt) = self.counter.as_mut() {
            cnt.add_elementwise("layer_norm", out.numel());
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    // ---- reductions and reshaping ----

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mean_rows();
        self.push(out, Op::MeanRows(a), "mean_rows")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::from_parts(vec![1], vec![self.value(a).sum()]);
        self.push(out, Op::SumAll(a), "sum_all")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, len)?;
        self.push(out, Op::SliceCols(a, start), "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor<T>> = parts.iter().map(|&v| self.value(v).clone()).collect();
        let out = Tensor::concat_cols(&tensors)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Stacks `times` copies of the whole matrix: row `t·n + i` is row `i`.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2();
        let mut out = Vec::with_capacity(times * x.numel());
        for _ in 0..times {
            out.extend_from_slice(x.data());
        }
        let out = Tensor::from_parts(vec![times * r, c], out);
        self.push(out, Op::TileRows(a), "tile_rows")
    }

    /// Repeats each row `times` times in place: row `i·times + j` is row `i`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2();
        let mut out = Vec::with_capacity(times * x.numel());
        for i in 0..r {
            for _ in 0..times {
                out.extend_from_slice(x.row(i));
            }
        }
        let out = Tensor::from_parts(vec![r * times, c], out);
        self.push(out, Op::RepeatRows(a, times), "repeat_rows")
    }

    /// Means over consecutive blocks of `group` rows: `(g·group)×c → g×c`.
    pub fn mean_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2();
        if group == 0 || r % group != 0 {
            return Err(param_err(format!("mean_groups: {r} rows not divisible by {group}")));
        }
        let count = T::of(group as f64);
        let mut out = vec![T::zero(); (r / group) * c];
        for (i, row) in x.data().chunks(c).enumerate() {
            let dst = &mut out[(i / group) * c..(i / group + 1) * c];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
        // divide after summing so means never leave the inputs' range
        out.iter_mut().for_each(|d| *d /= count);
        let out = Tensor::from_parts(vec![r / group, c], out);
        self.push(out, Op::MeanGroups(a, group), "mean_groups")
    }

    /// Means over `tiles` stacked blocks: row `i` of the result averages rows
    /// `i, i + n, i + 2n, …` where `n = rows / tiles`.
    pub fn mean_tiles(&mut self, a: Var, tiles: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2();
        if tiles == 0 || r % tiles != 0 {
            return Err(param_err(format!("mean_tiles: {r} rows not divisible by {tiles}")));
        }
        let n = r / tiles;
        let count = T::of(tiles as f64);
        let mut out = vec![T::zero(); n * c];
        for (i, row) in x.data().chunks(c).enumerate() {
            let dst = &mut out[(i % n) * c..(i % n + 1) * c];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
        out.iter_mut().for_each(|d| *d /= count);
        let out = Tensor::from_parts(vec![n, c], out);
        self.push(out, Op::MeanTiles(a, tiles), "mean_tiles")
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(a).select_rows(idx)?;
        self.push(out, Op::GatherRows(a, idx.to_vec()), "gather_rows")
    }

    /// Mean softmax cross-entropy of `logits` (`B×C`) against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (b, c) = x.dims2();
        if labels.len() != b {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: x.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(param_err(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = x.data().to_vec();
        let mut loss = T::zero();
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[label];
            tensor::softmax_in_place(row);
        }
        let out = Tensor::from_parts(vec![1], vec![loss / T::of(b as f64)]);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Smallest distance of any recorded relu/relu6/abs input (or Cooperation
    /// modulation argument) from a non-differentiable point.
    pub fn kink_margin(&self) -> Option<T> {
        let mut best: Option<T> = None;
        let mut note = |d: T| best = Some(best.map_or(d, |b: T| b.min(d)));
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::Abs(x) => {
                    self.value(*x).data().iter().for_each(|v| note(v.abs()))
                }
                Op::Relu6(x) => self
                    .value(*x)
                    .data()
                    .iter()
                    .for_each(|&v| note(v.abs().min((v - T::of(6.0)).abs()))),
                Op::Modulate(kind, r, c) => {
                    for (&rv, &cv) in self.value(*r).data().iter().zip(self.value(*c).data()) {
                        if let Some(d) = kind.kink_distance(rv, cv) {
                            note(d);
                        }
                    }
                }
                _ => {}
            }
        }
        best
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.filter(|_| n.requires_grad))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node<'p, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: &Var| self.nodes[v.0].value.data();
        let dims = |v: &Var| self.nodes[v.0].value.dims2();
        let y = node.value.data();
        let zero = T::zero();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(a);
                let n = node.value.cols();
                if let Some(da) = self.slot(grads, a) {
                    tensor::matmul_nt(g, val(b), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, b) {
                    tensor::matmul_tn(val(a), g, db, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims(a);
                let n = node.value.cols();
                if let Some(da) = self.slot(grads, a) {
                    tensor::matmul_nn(g, val(b), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, b) {
                    tensor::matmul_tn(g, val(a), db, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dims(a);
                if let Some(da) = self.slot(grads, a) {
                    let mut t = vec![zero; r * c];
                    tensor::transpose(g, &mut t, c, r);
                    add_into(da, &t);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, b) {
                    db.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv);
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.slot(grads, a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(val(b)) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(val(a)) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = self.slot(grads, a) {
                    da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *s);
                }
            }
            Op::AddRow(a, b) => {
                if let Some(da) = self.slot(grads, a) {
                    add_into(da, g);
                }
                let c = node.value.cols();
                if let Some(db) = self.slot(grads, b) {
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                }
            }
            Op::Relu(a) => self.unary_back(grads, a, g, |x, _| if x > zero { T::one() } else { zero }, y),
            Op::Relu6(a) => self.unary_back(grads, a, g, |x, _| relu6_grad(x), y),
            Op::Abs(a) => self.unary_back(
                grads,
                a,
                g,
                |x, _| {
                    if x > zero {
                        T::one()
                    } else if x < zero {
                        -T::one()
                    } else {
                        zero
                    }
                },
                y,
            ),
            Op::Square(a) => self.unary_back(grads, a, g, |x, _| T::of(2.0) * x, y),
            Op::Tanh(a) => self.unary_back(grads, a, g, |_, yv| T::one() - yv * yv, y),
            Op::Exp(a) => self.unary_back(grads, a, g, |_, yv| yv, y),
            Op::Modulate(kind, r, c) => {
                let (rv, cv) = (val(r), val(c));
                let partials: Vec<(T, T)> = rv
                    .iter()
                    .zip(cv)
                    .map(|(&a, &b)| kind.partials(a, b))
                    .collect();
                if let Some(dr) = self.slot(grads, r) {
                    for ((d, &gv), p) in dr.iter_mut().zip(g).zip(&partials) {
                        *d += gv * p.0;
                    }
                }
                if let Some(dc) = self.slot(grads, c) {
                    for ((d, &gv), p) in dc.iter_mut().zip(g).zip(&partials) {
                        *d += gv * p.1;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                if let Some(da) = self.slot(grads, a) {
                    for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let e = node.value.cols();
                let gv = val(gain);
                if let Some(dg) = self.slot(grads, gain) {
                    for (grow, hrow) in g.chunks(e).zip(xhat.chunks(e)) {
                        for ((d, &gg), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d += gg * h;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, bias) {
                    for grow in g.chunks(e) {
                        add_into(db, grow);
                    }
                }
                if let Some(dx) = self.slot(grads, x) {
                    let ef = T::of(e as f64);
                    let mut dh = vec![zero; e];
                    for (((dxrow, grow), hrow), &is) in dx
                        .chunks_mut(e)
                        .zip(g.chunks(e))
                        .zip(xhat.chunks(e))
                        .zip(inv_std)
                    {
                        for j in 0..e {
                            dh[j] = grow[j] * gv[j];
                        }
                        let sum_dh: T = dh.iter().copied().sum();
                        let sum_dh_h: T = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..e {
                            dxrow[j] += is / ef * (ef * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                let (r, c) = dims(a);
                let inv = T::one() / T::of(r as f64);
                if let Some(da) = self.slot(grads, a) {
                    for row in da.chunks_mut(c) {
                        row.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * inv);
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(da) = self.slot(grads, a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SliceCols(a, start) => {
                let c = dims(a).1;
                let len = node.value.cols();
                if let Some(da) = self.slot(grads, a) {
                    for (drow, grow) in da.chunks_mut(c).zip(g.chunks(len)) {
                        add_into(&mut drow[*start..*start + len], grow);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let c = dims(p).1;
                    if let Some(dp) = self.slot(grads, p) {
                        for (drow, grow) in dp.chunks_mut(c).zip(g.chunks(total)) {
                            add_into(drow, &grow[offset..offset + c]);
                        }
                    }
                    offset += c;
                }
            }
            Op::TileRows(a) => {
                let n = self.nodes[a.0].value.numel();
                if let Some(da) = self.slot(grads, a) {
                    for block in g.chunks(n) {
                        add_into(da, block);
                    }
                }
            }
            Op::RepeatRows(a, times) => {
                let c = dims(a).1;
                if let Some(da) = self.slot(grads, a) {
                    for (i, grow) in g.chunks(c).enumerate() {
                        let r = i / times;
                        add_into(&mut da[r * c..(r + 1) * c], grow);
                    }
                }
            }
            Op::MeanGroups(a, group) => {
                let c = dims(a).1;
                let inv = T::one() / T::of(*group as f64);
                if let Some(da) = self.slot(grads, a) {
                    for (i, drow) in da.chunks_mut(c).enumerate() {
                        let grow = &g[(i / group) * c..(i / group + 1) * c];
                        drow.iter_mut().zip(grow).for_each(|(d, &gv)| *d += gv * inv);
                    }
                }
            }
            Op::MeanTiles(a, tiles) => {
                let (r, c) = dims(a);
                let n = r / tiles;
                let inv = T::one() / T::of(*tiles as f64);
                if let Some(da) = self.slot(grads, a) {
                    for (i, drow) in da.chunks_mut(c).enumerate() {
                        let grow = &g[(i % n) * c..(i % n + 1) * c];
                        drow.iter_mut().zip(grow).for_each(|(d, &gv)| *d += gv * inv);
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let c = dims(a).1;
                if let Some(da) = self.slot(grads, a) {
                    for (grow, &r) in g.chunks(c).zip(idx) {
                        add_into(&mut da[r * c..(r + 1) * c], grow);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (b, c) = dims(logits);
                let scale = g[0] / T::of(b as f64);
                if let Some(dl) = self.slot(grads, logits) {
                    for (row, (prow, &label)) in dl.chunks_mut(c).zip(probs.chunks(c).zip(labels)) {
                        for (j, (d, &p)) in row.iter_mut().zip(prow).enumerate() {
                            let target = if j == label { T::one() } else { zero };
                            *d += scale * (p - target);
                        }
                    }
                }
            }
        }
    }

    fn unary_back(
        &self,
        grads: &mut [Option<Vec<T>>],
        a: &Var,
        g: &[T],
        d: impl Fn(T, T) -> T,
        y: &[T],
    ) {
        let x = self.nodes[a.0].value.data();
        if let Some(da) = self.slot(grads, a) {
            for (((dv, &gv), &xv), &yv) in da.iter_mut().zip(g).zip(x).zip(y) {
                *dv += gv * d(xv, yv);
            }
        }
    }

    /// Gradient buffer of `v`, allocated on first use; `None` if `v` needs no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: &Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![T::zero(); node.value.numel()])
                .as_mut_slice(),
        )
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of [`Graph::backward`]: one gradient per node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn slice(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.slice(v)
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.to_vec()))
    }
}
