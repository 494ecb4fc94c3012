use std::sync::Arc;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-normalized neighbor lists used by weighted mean aggregation.
///
/// For receiving node `i`, each entry `(j, c_ij, e)` carries the normalized
/// coefficient `c_ij = w_ij / sum_k w_ik` and the id `e` of the undirected
/// edge it came from, so an optional per-edge scale can be applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    n_nodes: usize,
    n_edges: usize,
    offsets: Vec<usize>,
    sources: Vec<usize>,
    coeffs: Vec<f64>,
    edge_ids: Vec<usize>,
}

impl Neighborhood {
    /// Builds the structure from undirected `(i, j, w)` edges. Each edge is
    /// seen from both endpoints.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut lists: Vec<Vec<(usize, f64, usize)>> = vec![Vec::new(); n_nodes];
        for (e, &(i, j, w)) in edges.iter().enumerate() {
            if i >= n_nodes || j >= n_nodes {
                return Err(Error::Data(format!("edge ({i}, {j}) outside {n_nodes} nodes")));
            }
            if i == j {
                return Err(Error::Data(format!("self-loop on node {i}")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Data(format!("edge ({i}, {j}) has weight {w}")));
            }
            lists[i].push((j, w, e));
            lists[j].push((i, w, e));
        }
        let mut offsets = Vec::with_capacity(n_nodes + 1);
        let mut sources = Vec::new();
        let mut coeffs = Vec::new();
        let mut edge_ids = Vec::new();
        offsets.push(0);
        for list in &mut lists {
            list.sort_by(|a, b| a.0.cmp(&b.0).then(a.2.cmp(&b.2)));
            let total: f64 = list.iter().map(|x| x.1).sum();
            for &(j, w, e) in list.iter() {
                sources.push(j);
                coeffs.push(if total > 0.0 { w / total } else { 0.0 });
                edge_ids.push(e);
            }
            offsets.push(sources.len());
        }
        Ok(Neighborhood { n_nodes, n_edges: edges.len(), offsets, sources, coeffs, edge_ids })
    }

    pub fn empty(n_nodes: usize) -> Self {
        Neighborhood {
            n_nodes,
            n_edges: 0,
            offsets: vec![0; n_nodes + 1],
            sources: Vec::new(),
            coeffs: Vec::new(),
            edge_ids: Vec::new(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    /// `(source, coefficient, edge id)` for every neighbor of `node`.
    pub fn incoming(&self, node: usize) -> impl Iterator<Item = (usize, f64, usize)> + '_ {
        let range = self.offsets[node]..self.offsets[node + 1];
        range.map(move |k| (self.sources[k], self.coeffs[k], self.edge_ids[k]))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddBias(Var, Var),
    MulCols(Var, Var),
    Concat(Vec<Var>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Ln(Var),
    Softplus(Var),
    OneMinus(Var),
    Scale(Var, f64),
    RowMean { x: Var, nb: Arc<Neighborhood>, edge_scale: Option<Var> },
    Dropout { x: Var, mask: Vec<f64> },
    SliceTime { x: Var, t: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    BceWithLogits { logits: Var, targets: Vec<f64>, mask: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], addressable by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `c = alpha * op(a) * op(b) + beta * c` over row-major storage.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the slices have exactly the lengths implied by (m, k, n) and
    // the strides address only elements inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn accumulate_with(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf: receives a gradient on backward.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A constant: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, rg, Op::MatMul(a, b)))
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor { shape: va.shape().to_vec(), data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map("hadamard", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Hadamard(a, b)))
    }

    fn row_broadcast(
        &mut self,
        op: &'static str,
        x: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.ndim() != 1 || vx.ndim() == 0 || vx.last_dim() != vr.numel() {
            return Err(Error::shape(op, format!("{:?} with row {:?}", vx.shape(), vr.shape())));
        }
        let d = vr.numel();
        let r = vr.data();
        let data = vx.data().iter().enumerate().map(|(k, &v)| f(v, r[k % d])).collect();
        Ok(Tensor { shape: vx.shape().to_vec(), data })
    }

    /// `x + b` with `b` broadcast over every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.row_broadcast("add_bias", x, bias, |v, b| v + b)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, rg, Op::AddBias(x, bias)))
    }

    /// `x * m` with the column scale `m` broadcast over every row of `x`.
    pub fn mul_cols(&mut self, x: Var, scale: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_cols", x, scale, |v, s| v * s)?;
        let rg = self.any_grad(&[x, scale]);
        Ok(self.push(out, rg, Op::MulCols(x, scale)))
    }

    /// Concatenation along the last dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_lastdim", "no inputs".to_string()))?;
        let lead_shape = self.shape(*first).split_last().map(|(_, l)| l.to_vec()).unwrap_or_default();
        let rows = self.value(*first).leading();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead_shape[..] {
                return Err(Error::shape(
                    "concat_lastdim",
                    format!("{:?} vs {:?}", self.shape(*first), s),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead_shape;
        shape.push(total);
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor { shape, data }, rg, Op::Concat(parts.to_vec())))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor { shape: v.shape().to_vec(), data: v.data().iter().map(|&a| f(a)).collect() }
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, sigmoid);
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.map(x, f64::tanh);
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |a| a.max(0.0));
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Relu(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.map(x, f64::ln);
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Ln(x))
    }

    /// `ln(1 + e^x)`, stable for large `|x|`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.map(x, softplus);
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Softplus(x))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let out = self.map(x, |a| 1.0 - a);
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::OneMinus(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |a| a * c);
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Scale(x, c))
    }

    /// Weighted mean over graph neighbors: row `i` of the output is
    /// `sum_j s_e c_ij x_j`, where `s_e` is the optional per-edge scale
    /// (1 when absent). Nodes without neighbors get a zero row.
    pub fn weighted_row_mean(
        &mut self,
        x: Var,
        nb: &Arc<Neighborhood>,
        edge_scale: Option<Var>,
    ) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 2 || vx.shape()[0] != nb.n_nodes() {
            return Err(Error::shape(
                "weighted_row_mean",
                format!("features {:?} for {} nodes", vx.shape(), nb.n_nodes()),
            ));
        }
        if let Some(s) = edge_scale {
            let ss = self.shape(s);
            if ss != [nb.n_edges()] {
                return Err(Error::shape(
                    "weighted_row_mean",
                    format!("edge scale {ss:?} for {} edges", nb.n_edges()),
                ));
            }
        }
        let d = vx.last_dim();
        let scale = edge_scale.map(|s| self.value(s).data());
        let mut out = vec![0.0; nb.n_nodes() * d];
        for i in 0..nb.n_nodes() {
            let row = &mut out[i * d..(i + 1) * d];
            for (j, c, e) in nb.incoming(i) {
                let w = c * scale.map_or(1.0, |s| s[e]);
                for (o, &v) in row.iter_mut().zip(vx.row(j)) {
                    *o += w * v;
                }
            }
        }
        let shape = vx.shape().to_vec();
        let mut inputs = vec![x];
        inputs.extend(edge_scale);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            Tensor { shape, data: out },
            rg,
            Op::RowMean { x, nb: Arc::clone(nb), edge_scale },
        ))
    }

    /// Inverted dropout with a mask drawn from `rng`. `rate == 0` is a no-op.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let mask: Vec<f64> =
            (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor { shape: v.shape().to_vec(), data };
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::Dropout { x, mask }))
    }

    /// Time step `t` of a `[n, t, d]` value, as `[n, d]`.
    pub fn slice_time(&mut self, x: Var, t: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || t >= s[1] {
            return Err(Error::shape("slice", format!("step {t} of {s:?}")));
        }
        let out = self.value(x).time_step(t);
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::SliceTime { x, t }))
    }

    /// Rows `idx` of a 2-D value (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", format!("{s:?} is not 2-D")));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {s:?}")));
        }
        let out = self.value(x).select_rows(idx);
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.data().iter().sum::<f64>() / v.numel().max(1) as f64);
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Mean(x))
    }

    /// Mean binary cross-entropy of `logits` against `targets` over the
    /// entries listed in `mask`, computed in the numerically stable form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], mask: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if v.numel() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?} vs {} targets", v.shape(), targets.len()),
            ));
        }
        if mask.is_empty() {
            return Err(Error::Data("loss mask is empty".to_string()));
        }
        if let Some(&bad) = mask.iter().find(|&&i| i >= targets.len()) {
            return Err(Error::shape("bce_with_logits", format!("mask index {bad}")));
        }
        let z = v.data();
        let total: f64 = mask
            .iter()
            .map(|&i| {
                let (zi, yi) = (z[i], targets[i]);
                zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p()
            })
            .sum();
        let out = Tensor::scalar(total / mask.len() as f64);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            out,
            rg,
            Op::BceWithLogits { logits, targets: targets.to_vec(), mask: mask.to_vec() },
        ))
    }

    /// Reverse pass from a scalar `loss`. The seed gradient is 1. Every
    /// trainable leaf gets a gradient (zeros when `loss` does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape("backward", format!("loss has shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                Some(Tensor { shape, data })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.wants(*a) {
                    accumulate_with(&mut grads[a.0], m * k, |buf| {
                        gemm(m, n, k, g, false, vb.data(), true, buf, 1.0)
                    });
                }
                if self.wants(*b) {
                    accumulate_with(&mut grads[b.0], k * n, |buf| {
                        gemm(k, m, n, va.data(), true, g, false, buf, 1.0)
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(&mut grads[v.0], g.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|x| -x).collect());
                }
            }
            Op::Hadamard(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.iter().zip(vb).map(|(x, y)| x * y).collect());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
                if self.wants(*b) {
                    let d = self.value(*b).numel();
                    accumulate_with(&mut grads[b.0], d, |buf| {
                        for (k, gv) in g.iter().enumerate() {
                            buf[k % d] += gv;
                        }
                    });
                }
            }
            Op::MulCols(x, s) => {
                let (vx, vs) = (self.value(*x).data(), self.value(*s).data());
                let d = vs.len();
                if self.wants(*x) {
                    accumulate(
                        &mut grads[x.0],
                        g.iter().enumerate().map(|(k, gv)| gv * vs[k % d]).collect(),
                    );
                }
                if self.wants(*s) {
                    accumulate_with(&mut grads[s.0], d, |buf| {
                        for (k, gv) in g.iter().enumerate() {
                            buf[k % d] += gv * vx[k];
                        }
                    });
                }
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.leading();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    if self.wants(*p) {
                        accumulate_with(&mut grads[p.0], rows * w, |buf| {
                            for r in 0..rows {
                                let src = &g[r * total + offset..r * total + offset + w];
                                for (b, s) in buf[r * w..(r + 1) * w].iter_mut().zip(src) {
                                    *b += s;
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::Sigmoid(x) => accumulate(
                &mut grads[x.0],
                g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect(),
            ),
            Op::Tanh(x) => accumulate(
                &mut grads[x.0],
                g.iter().zip(out).map(|(gv, y)| gv * (1.0 - y * y)).collect(),
            ),
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                accumulate(
                    &mut grads[x.0],
                    g.iter().zip(vx).map(|(gv, a)| if *a > 0.0 { *gv } else { 0.0 }).collect(),
                )
            }
            Op::Ln(x) => {
                let vx = self.value(*x).data();
                accumulate(&mut grads[x.0], g.iter().zip(vx).map(|(gv, a)| gv / a).collect())
            }
            Op::Softplus(x) => {
                let vx = self.value(*x).data();
                accumulate(&mut grads[x.0], g.iter().zip(vx).map(|(gv, a)| gv * sigmoid(*a)).collect())
            }
            Op::OneMinus(x) => accumulate(&mut grads[x.0], g.iter().map(|v| -v).collect()),
            Op::Scale(x, c) => accumulate(&mut grads[x.0], g.iter().map(|v| v * c).collect()),
            Op::RowMean { x, nb, edge_scale } => {
                let vx = self.value(*x);
                let d = vx.last_dim();
                let scale = edge_scale.map(|s| self.value(s).data());
                if self.wants(*x) {
                    accumulate_with(&mut grads[x.0], vx.numel(), |buf| {
                        for i in 0..nb.n_nodes() {
                            let gi = &g[i * d..(i + 1) * d];
                            for (j, c, e) in nb.incoming(i) {
                                let w = c * scale.map_or(1.0, |s| s[e]);
                                for (b, gv) in buf[j * d..(j + 1) * d].iter_mut().zip(gi) {
                                    *b += w * gv;
                                }
                            }
                        }
                    });
                }
                if let Some(s) = edge_scale.filter(|s| self.wants(*s)) {
                    accumulate_with(&mut grads[s.0], nb.n_edges(), |buf| {
                        for i in 0..nb.n_nodes() {
                            let gi = &g[i * d..(i + 1) * d];
                            for (j, c, e) in nb.incoming(i) {
                                let dot: f64 = gi.iter().zip(vx.row(j)).map(|(a, b)| a * b).sum();
                                buf[e] += c * dot;
                            }
                        }
                    });
                }
            }
            Op::Dropout { x, mask } => accumulate(
                &mut grads[x.0],
                g.iter().zip(mask).map(|(gv, m)| gv * m).collect(),
            ),
            Op::SliceTime { x, t } => {
                let s = self.shape(*x);
                let (n, steps, d) = (s[0], s[1], s[2]);
                accumulate_with(&mut grads[x.0], n * steps * d, |buf| {
                    for i in 0..n {
                        let base = (i * steps + t) * d;
                        for (b, gv) in buf[base..base + d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *b += gv;
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let vx = self.value(*x);
                let d = vx.last_dim();
                accumulate_with(&mut grads[x.0], vx.numel(), |buf| {
                    for (r, &src) in idx.iter().enumerate() {
                        for (b, gv) in buf[src * d..(src + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *b += gv;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate(&mut grads[x.0], vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                accumulate(&mut grads[x.0], vec![g[0] / n as f64; n]);
            }
            Op::BceWithLogits { logits, targets, mask } => {
                let z = self.value(*logits).data();
                let scale = g[0] / mask.len() as f64;
                accumulate_with(&mut grads[logits.0], z.len(), |buf| {
                    for &i in mask {
                        buf[i] += scale * (sigmoid(z[i]) - targets[i]);
                    }
                });
            }
        }
    }
}
