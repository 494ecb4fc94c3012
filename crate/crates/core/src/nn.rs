//! Parameter storage and the recurrent/graph layers built on the tape.
//!
//! Layers hold only parameter names and sizes; values live in a
//! [`ParamStore`] and are placed on a tape with [`ParamStore::bind`] before
//! each forward pass. Weights are Glorot-uniform, biases start at zero.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::TensorMap;
use crate::tensor::{Neighborhood, Tape, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: TensorMap,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn from_map(tensors: TensorMap) -> Self {
        ParamStore { tensors }
    }

    pub fn as_map(&self) -> &TensorMap {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Places every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Checks that every parameter of `other` exists here with the same shape.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (k, t) in &other.tensors {
            let mine = self.get(k)?;
            if mine.shape() != t.shape() {
                return Err(Error::shape("params", format!("`{k}`: {:?} vs {:?}", mine.shape(), t.shape())));
            }
        }
        if self.len() != other.len() {
            return Err(Error::Data(format!("parameter count {} vs {}", self.len(), other.len())));
        }
        Ok(())
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        BoundParams { vars: pairs.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("parameter `{name}` not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-limit..=limit))
}

/// `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: String,
    b: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(prefix: &str, d_in: usize, d_out: usize) -> Self {
        Linear { w: format!("{prefix}.w"), b: format!("{prefix}.b"), d_in, d_out }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(&self.w, glorot_uniform(self.d_in, self.d_out, rng));
        store.insert(&self.b, Tensor::zeros(&[self.d_out]));
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }

    pub fn bias_name(&self) -> &str {
        &self.b
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(&self.w)?)?;
        tape.add_bias(y, p.var(&self.b)?)
    }
}

/// Graph-aware inputs shared by every graph layer of one forward pass.
#[derive(Clone, Debug)]
pub struct GraphCtx {
    pub nb: Arc<Neighborhood>,
    /// Optional per-edge message scale (explainer edge mask).
    pub edge_scale: Option<Var>,
}

impl GraphCtx {
    pub fn new(nb: Arc<Neighborhood>) -> Self {
        GraphCtx { nb, edge_scale: None }
    }

    pub fn empty(n: usize) -> Self {
        GraphCtx::new(Arc::new(Neighborhood::empty(n)))
    }

    fn has_edges(&self) -> bool {
        self.nb.n_edges() > 0
    }

    /// Weighted neighbor mean of `x`, or `None` on an edgeless graph.
    pub fn aggregate(&self, tape: &mut Tape, x: Var) -> Result<Option<Var>> {
        if tape.shape(x)[0] != self.nb.n_nodes() {
            return Err(Error::shape(
                "graphsage",
                format!("{} feature rows for {} graph nodes", tape.shape(x)[0], self.nb.n_nodes()),
            ));
        }
        if !self.has_edges() {
            return Ok(None);
        }
        tape.weighted_row_mean(x, &self.nb, self.edge_scale).map(Some)
    }
}

/// GraphSAGE layer with weighted mean aggregation:
/// `out_i = x_i W_self + mean_w(x_j) W_neigh + b`.
#[derive(Clone, Debug)]
pub struct SageLayer {
    w_self: String,
    w_neigh: String,
    bias: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl SageLayer {
    pub fn new(prefix: &str, d_in: usize, d_out: usize) -> Self {
        SageLayer {
            w_self: format!("{prefix}.w_self"),
            w_neigh: format!("{prefix}.w_neigh"),
            bias: format!("{prefix}.bias"),
            d_in,
            d_out,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(&self.w_self, glorot_uniform(self.d_in, self.d_out, rng));
        store.insert(&self.w_neigh, glorot_uniform(self.d_in, self.d_out, rng));
        store.insert(&self.bias, Tensor::zeros(&[self.d_out]));
    }

    pub fn param_names(&self) -> [&str; 3] {
        [&self.w_self, &self.w_neigh, &self.bias]
    }

    /// Applies the layer given a precomputed aggregation of `x`.
    pub fn apply(&self, tape: &mut Tape, p: &BoundParams, x: Var, agg: Option<Var>) -> Result<Var> {
        if tape.shape(x)[1] != self.d_in {
            return Err(Error::shape("graphsage", format!("input width {} != {}", tape.shape(x)[1], self.d_in)));
        }
        let mut out = tape.matmul(x, p.var(&self.w_self)?)?;
        if let Some(a) = agg {
            let n = tape.matmul(a, p.var(&self.w_neigh)?)?;
            out = tape.add(out, n)?;
        }
        tape.add_bias(out, p.var(&self.bias)?)
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var, g: &GraphCtx) -> Result<Var> {
        let agg = g.aggregate(tape, x)?;
        self.apply(tape, p, x, agg)
    }
}

/// GRU cell whose gate transforms are GraphSAGE layers over `[x, h]`.
#[derive(Clone, Debug)]
pub struct StgnnCell {
    pub reset: SageLayer,
    pub update: SageLayer,
    pub candidate: SageLayer,
    pub d_in: usize,
    pub d_hidden: usize,
}

impl StgnnCell {
    pub fn new(prefix: &str, d_in: usize, d_hidden: usize) -> Self {
        let d = d_in + d_hidden;
        StgnnCell {
            reset: SageLayer::new(&format!("{prefix}.r"), d, d_hidden),
            update: SageLayer::new(&format!("{prefix}.u"), d, d_hidden),
            candidate: SageLayer::new(&format!("{prefix}.c"), d, d_hidden),
            d_in,
            d_hidden,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in [&self.reset, &self.update, &self.candidate] {
            l.init(store, rng);
        }
    }

    pub fn step(&self, tape: &mut Tape, p: &BoundParams, x: Var, h: Var, g: &GraphCtx) -> Result<Var> {
        let xh = tape.concat(&[x, h])?;
        let agg = g.aggregate(tape, xh)?;
        let r = self.reset.apply(tape, p, xh, agg)?;
        let r = tape.sigmoid(r);
        let u = self.update.apply(tape, p, xh, agg)?;
        let u = tape.sigmoid(u);
        let rh = tape.hadamard(r, h)?;
        let xrh = tape.concat(&[x, rh])?;
        let c = self.candidate.forward(tape, p, xrh, g)?;
        let c = tape.tanh(c);
        let keep = tape.hadamard(u, h)?;
        let one_minus_u = tape.one_minus(u);
        let fresh = tape.hadamard(one_minus_u, c)?;
        tape.add(keep, fresh)
    }
}

/// Stacked STGNN cells; layer `l + 1` reads layer `l`'s per-step states.
#[derive(Clone, Debug)]
pub struct StgnnEncoder {
    pub cells: Vec<StgnnCell>,
}

impl StgnnEncoder {
    pub fn new(prefix: &str, d_in: usize, d_hidden: usize, n_layers: usize) -> Self {
        let cells = (0..n_layers)
            .map(|l| StgnnCell::new(&format!("{prefix}.l{l}"), if l == 0 { d_in } else { d_hidden }, d_hidden))
            .collect();
        StgnnEncoder { cells }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.cells.iter().for_each(|c| c.init(store, rng));
    }

    pub fn d_hidden(&self) -> usize {
        self.cells[0].d_hidden
    }

    /// Final top-layer state for per-step inputs `xs`, from a zero state.
    pub fn encode(&self, tape: &mut Tape, p: &BoundParams, xs: &[Var], g: &GraphCtx) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Config("sequence has no time steps".into()));
        }
        let n = tape.shape(xs[0])[0];
        let mut inputs = xs.to_vec();
        for cell in &self.cells {
            let mut h = tape.constant(Tensor::zeros(&[n, cell.d_hidden]));
            let mut states = Vec::with_capacity(inputs.len());
            for &x in &inputs {
                h = cell.step(tape, p, x, h, g)?;
                states.push(h);
            }
            inputs = states;
        }
        Ok(*inputs.last().unwrap())
    }
}

/// Per-node LSTM with no graph term.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input: Linear,
    pub forget: Linear,
    pub output: Linear,
    pub cell: Linear,
    pub d_hidden: usize,
}

impl LstmCell {
    pub fn new(prefix: &str, d_in: usize, d_hidden: usize) -> Self {
        let d = d_in + d_hidden;
        LstmCell {
            input: Linear::new(&format!("{prefix}.i"), d, d_hidden),
            forget: Linear::new(&format!("{prefix}.f"), d, d_hidden),
            output: Linear::new(&format!("{prefix}.o"), d, d_hidden),
            cell: Linear::new(&format!("{prefix}.g"), d, d_hidden),
            d_hidden,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in [&self.input, &self.forget, &self.output, &self.cell] {
            l.init(store, rng);
        }
    }

    /// One step; returns `(h, c)`.
    pub fn step(&self, tape: &mut Tape, p: &BoundParams, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let xh = tape.concat(&[x, h])?;
        let i = self.input.forward(tape, p, xh)?;
        let i = tape.sigmoid(i);
        let f = self.forget.forward(tape, p, xh)?;
        let f = tape.sigmoid(f);
        let o = self.output.forward(tape, p, xh)?;
        let o = tape.sigmoid(o);
        let g = self.cell.forward(tape, p, xh)?;
        let g = tape.tanh(g);
        let kept = tape.hadamard(f, c)?;
        let written = tape.hadamard(i, g)?;
        let c = tape.add(kept, written)?;
        let tc = tape.tanh(c);
        let h = tape.hadamard(o, tc)?;
        Ok((h, c))
    }
}

#[derive(Clone, Debug)]
pub struct LstmEncoder {
    pub cells: Vec<LstmCell>,
}

impl LstmEncoder {
    pub fn new(prefix: &str, d_in: usize, d_hidden: usize, n_layers: usize) -> Self {
        let cells = (0..n_layers)
            .map(|l| LstmCell::new(&format!("{prefix}.l{l}"), if l == 0 { d_in } else { d_hidden }, d_hidden))
            .collect();
        LstmEncoder { cells }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.cells.iter().for_each(|c| c.init(store, rng));
    }

    pub fn encode(&self, tape: &mut Tape, p: &BoundParams, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Config("sequence has no time steps".into()));
        }
        let n = tape.shape(xs[0])[0];
        let mut inputs = xs.to_vec();
        for cell in &self.cells {
            let mut h = tape.constant(Tensor::zeros(&[n, cell.d_hidden]));
            let mut c = h;
            let mut states = Vec::with_capacity(inputs.len());
            for &x in &inputs {
                (h, c) = cell.step(tape, p, x, h, c)?;
                states.push(h);
            }
            inputs = states;
        }
        Ok(*inputs.last().unwrap())
    }
}

/// Non-temporal GraphSAGE stack: relu between layers, identity on the last.
#[derive(Clone, Debug)]
pub struct GnnBaseline {
    pub layers: Vec<SageLayer>,
}

impl GnnBaseline {
    pub fn new(prefix: &str, d_in: usize, d_hidden: usize, n_layers: usize) -> Self {
        let layers = (0..n_layers)
            .map(|l| SageLayer::new(&format!("{prefix}.l{l}"), if l == 0 { d_in } else { d_hidden }, d_hidden))
            .collect();
        GnnBaseline { layers }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.layers.iter().for_each(|l| l.init(store, rng));
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var, g: &GraphCtx) -> Result<Var> {
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h, g)?;
            if k + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// `relu(x W1 + b1)`, dropout, then a linear map to one logit.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl MlpHead {
    pub fn new(prefix: &str, d_in: usize, h_mlp: usize) -> Self {
        MlpHead {
            hidden: Linear::new(&format!("{prefix}.hidden"), d_in, h_mlp),
            out: Linear::new(&format!("{prefix}.out"), h_mlp, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.hidden.init(store, rng);
        self.out.init(store, rng);
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        x: Var,
        dropout: Option<(f64, &mut dyn rand::RngCore)>,
    ) -> Result<Var> {
        let h = self.hidden.forward(tape, p, x)?;
        let mut h = tape.relu(h);
        if let Some((rate, rng)) = dropout {
            h = tape.dropout(h, rate, rng)?;
        }
        self.out.forward(tape, p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check_multi;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn setup<F: Fn(&mut ParamStore, &mut ChaCha8Rng)>(f: F) -> (ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        f(&mut store, &mut rng);
        (store, rng)
    }

    fn path_graph() -> GraphCtx {
        GraphCtx::new(Arc::new(Neighborhood::from_edges(3, &[(0, 1, 0.5), (1, 2, 0.25)]).unwrap()))
    }

    #[test]
    fn sage_matches_dense_oracle() {
        let layer = SageLayer::new("s", 2, 3);
        let (store, mut rng) = setup(|s, r| layer.init(s, r));
        let mut store = store;
        store.insert("s.bias", Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap());
        let x = rand_tensor(&[3, 2], &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = layer.forward(&mut tape, &p, xv, &path_graph()).unwrap();
        // Dense D^-1 A X.
        let a = [[0.0, 0.5, 0.0], [0.5, 0.0, 0.25], [0.0, 0.25, 0.0]];
        let ws = store.get("s.w_self").unwrap();
        let wn = store.get("s.w_neigh").unwrap();
        for i in 0..3 {
            let deg: f64 = a[i].iter().sum();
            for o in 0..3 {
                let mut v = 0.1 * [1.0, -2.0, 3.0][o];
                for d in 0..2 {
                    let agg: f64 = (0..3).map(|j| a[i][j] * x.at(j, d)).sum::<f64>() / deg;
                    v += x.at(i, d) * ws.at(d, o) + agg * wn.at(d, o);
                }
                assert!((tape.value(out).at(i, o) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sage_on_empty_graph_is_self_map() {
        let layer = SageLayer::new("s", 2, 2);
        let (store, mut rng) = setup(|s, r| layer.init(s, r));
        let x = rand_tensor(&[4, 2], &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = layer.forward(&mut tape, &p, xv, &GraphCtx::empty(4)).unwrap();
        let w = store.get("s.w_self").unwrap();
        for i in 0..4 {
            for o in 0..2 {
                let v = x.at(i, 0) * w.at(0, o) + x.at(i, 1) * w.at(1, o);
                assert!((tape.value(out).at(i, o) - v).abs() < 1e-15);
            }
        }
        let bad = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(layer.forward(&mut tape, &p, bad, &GraphCtx::empty(4)).is_err());
    }

    #[test]
    fn saturated_update_gate_keeps_state() {
        let cell = StgnnCell::new("c", 2, 3);
        let (mut store, mut rng) = setup(|s, r| cell.init(s, r));
        store.insert("c.u.bias", Tensor::full(&[3], 40.0));
        let x = rand_tensor(&[3, 2], &mut rng);
        let h = rand_tensor(&[3, 3], &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let (xv, hv) = (tape.constant(x), tape.constant(h.clone()));
        let out = cell.step(&mut tape, &p, xv, hv, &path_graph()).unwrap();
        assert!(tape.value(out).max_abs_diff(&h) < 1e-6);
    }

    #[test]
    fn first_step_is_bounded() {
        let enc = StgnnEncoder::new("e", 2, 4, 2);
        let (store, mut rng) = setup(|s, r| enc.init(s, r));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(rand_tensor(&[3, 2], &mut rng));
        let out = enc.encode(&mut tape, &p, &[x], &path_graph()).unwrap();
        assert!(tape.value(out).data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn lstm_with_open_forget_and_closed_input_keeps_cell() {
        let cell = LstmCell::new("l", 2, 2);
        let (mut store, mut rng) = setup(|s, r| cell.init(s, r));
        store.insert("l.f.b", Tensor::full(&[2], 50.0));
        store.insert("l.i.b", Tensor::full(&[2], -50.0));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let c0 = rand_tensor(&[3, 2], &mut rng);
        let (x, h, c) = (
            tape.constant(rand_tensor(&[3, 2], &mut rng)),
            tape.constant(rand_tensor(&[3, 2], &mut rng)),
            tape.constant(c0.clone()),
        );
        let (_, c1) = cell.step(&mut tape, &p, x, h, c).unwrap();
        assert!(tape.value(c1).max_abs_diff(&c0) < 1e-12);
    }

    #[test]
    fn lstm_single_step_hand_algebra() {
        let cell = LstmCell::new("l", 2, 1);
        let mut store = ParamStore::new();
        // Rows act on [x0, x1, h].
        let w = |a: f64, b: f64, c: f64| Tensor::new(vec![3, 1], vec![a, b, c]).unwrap();
        store.insert("l.i.w", w(0.1, 0.2, 0.3));
        store.insert("l.i.b", Tensor::full(&[1], 0.05));
        store.insert("l.f.w", w(-0.1, 0.4, 0.0));
        store.insert("l.f.b", Tensor::full(&[1], 0.0));
        store.insert("l.o.w", w(0.3, -0.3, 0.2));
        store.insert("l.o.b", Tensor::full(&[1], 0.1));
        store.insert("l.g.w", w(0.5, 0.5, -0.5));
        store.insert("l.g.b", Tensor::full(&[1], -0.1));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
        let h = tape.constant(Tensor::full(&[1, 1], 0.5));
        let c = tape.constant(Tensor::full(&[1, 1], -0.25));
        let (h1, c1) = cell.step(&mut tape, &p, x, h, c).unwrap();
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let i = s(0.1 - 0.4 + 0.15 + 0.05);
        let f = s(-0.1 - 0.8);
        let o = s(0.3 + 0.6 + 0.1 + 0.1);
        let g = (0.5 - 1.0 - 0.25 - 0.1f64).tanh();
        let c_ref = f * -0.25 + i * g;
        let h_ref = o * c_ref.tanh();
        assert!((tape.value(c1).item() - c_ref).abs() < 1e-12);
        assert!((tape.value(h1).item() - h_ref).abs() < 1e-12);
    }

    #[test]
    fn encoders_pass_gradient_check() {
        let enc = StgnnEncoder::new("e", 2, 3, 2);
        let lstm = LstmEncoder::new("m", 2, 3, 1);
        let gnn = GnnBaseline::new("g", 2, 3, 2);
        let (store, mut rng) = setup(|s, r| {
            enc.init(s, r);
            lstm.init(s, r);
            gnn.init(s, r);
        });
        let names: Vec<String> = store.names().cloned().collect();
        let mut inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        let xs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&[3, 2], &mut rng)).collect();
        inputs.extend(xs.iter().cloned());
        let k = names.len();
        let err = finite_diff_check_multi(
            |tape, vars| {
                let p = BoundParams::from_pairs(names.iter().cloned().zip(vars[..k].iter().copied()));
                let g = path_graph();
                let a = enc.encode(tape, &p, &vars[k..], &g)?;
                let b = lstm.encode(tape, &p, &vars[k..])?;
                let c = gnn.forward(tape, &p, vars[k + 2], &g)?;
                let ab = tape.add(a, b)?;
                tape.add(ab, c)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
