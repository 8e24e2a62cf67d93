//! Layers built on the differentiable graph.
//!
//! Parameters live in a [`ParamStore`] under hierarchical paths such as
//! `"sgtm.atd.q_proj.weight"`. Layer structs only remember their path prefix
//! and dimensions; a forward pass binds the stored values onto a [`Graph`]
//! through a [`Binder`], which also decides which paths are frozen.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{Gradients, Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(params: BTreeMap<String, Tensor>) -> Self {
        ParamStore { params }
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) {
        self.params.insert(path.into(), value);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .ok_or_else(|| Error::invalid("param", format!("no parameter named {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(path)
            .ok_or_else(|| Error::invalid("param", format!("no parameter named {path}")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    /// Entries whose path starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(k, _)| has_prefix(k, prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    /// Overwrites existing entries from `other`; unknown paths are an error.
    pub fn load_from(&mut self, other: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, v) in other {
            let slot = self.get_mut(k)?;
            if slot.shape() != v.shape() {
                return Err(Error::shape("load_params", slot.shape(), v.shape()));
            }
            *slot = v.clone();
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

/// `path` equals `prefix` or continues it at a `.` boundary.
pub fn has_prefix(path: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || path == prefix
        || (path.len() > prefix.len() && path.starts_with(prefix) && path.as_bytes()[prefix.len()] == b'.')
}

/// Creates parameters with per-path random streams, so a parameter's initial
/// value depends only on the seed and its path.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub seed: u64,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Init { store, seed }
    }

    pub fn uniform(&mut self, path: &str, shape: &[usize], bound: f64) {
        let mut r = stream(self.seed, path, 0);
        let t = Tensor::from_fn(shape, |_| r.gen_range(-bound..=bound));
        self.store.insert(path, t);
    }

    pub fn constant(&mut self, path: &str, shape: &[usize], value: f64) {
        self.store.insert(path, Tensor::full(shape, value));
    }
}

/// Binds stored parameters onto a graph for one forward/backward pass.
pub struct Binder<'g> {
    graph: &'g Graph,
    store: Option<&'g ParamStore>,
    frozen: Vec<String>,
    bound: RefCell<BTreeMap<String, Var<'g>>>,
}

impl<'g> Binder<'g> {
    pub fn new(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Binder {
            graph,
            store: Some(store),
            frozen: Vec::new(),
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// A binder over already-bound variables, e.g. the leaves of a
    /// finite-difference check.
    pub fn from_vars(graph: &'g Graph, vars: BTreeMap<String, Var<'g>>) -> Self {
        Binder {
            graph,
            store: None,
            frozen: Vec::new(),
            bound: RefCell::new(vars),
        }
    }

    /// Parameters under `prefix` are bound as constants and receive no gradient.
    pub fn freeze(mut self, prefix: &str) -> Self {
        self.frozen.push(prefix.to_string());
        self
    }

    /// Binds everything as constants.
    pub fn frozen_all(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Self::new(graph, store).freeze("")
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn is_frozen(&self, path: &str) -> bool {
        self.frozen.iter().any(|p| has_prefix(path, p))
    }

    pub fn param(&self, path: &str) -> Result<Var<'g>> {
        if let Some(v) = self.bound.borrow().get(path) {
            return Ok(*v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::invalid("param", format!("no parameter named {path}")))?;
        let value = store.get(path)?.clone();
        let v = self.graph.leaf(value, !self.is_frozen(path));
        self.bound.borrow_mut().insert(path.to_string(), v);
        Ok(v)
    }

    /// Non-trainable state such as stored statistics: always a constant,
    /// whatever the freeze list says.
    pub fn buffer(&self, path: &str) -> Result<Var<'g>> {
        if let Some(v) = self.bound.borrow().get(path) {
            return Ok(*v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::invalid("buffer", format!("no buffer named {path}")))?;
        let v = self.graph.constant(store.get(path)?.clone());
        self.bound.borrow_mut().insert(path.to_string(), v);
        Ok(v)
    }

    /// Gradients of every trainable parameter touched by the pass.
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(k, v)| grads.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// Applies `f` to `x` viewed as `[rows, last]`, restoring the leading axes.
fn on_rows<'g>(x: &Var<'g>, f: impl FnOnce(Var<'g>) -> Result<Var<'g>>) -> Result<Var<'g>> {
    let shape = x.shape();
    if shape.len() == 2 {
        return f(*x);
    }
    let last = *shape.last().ok_or_else(|| Error::invalid("linear", "scalar input"))?;
    let rows = shape[..shape.len() - 1].iter().product();
    let y = f(x.reshape(&[rows, last])?)?;
    let mut out = shape.clone();
    *out.last_mut().unwrap() = y.shape()[1];
    y.reshape(&out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightInit {
    /// Centered uniform with bound `1/√fan_in`.
    Uniform,
    Zero,
}

/// `y = x·W + b` with `W` stored as `[c_in, c_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub path: String,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn new(init: &mut Init, path: &str, c_in: usize, c_out: usize, scheme: WeightInit) -> Self {
        let bound = 1.0 / (c_in as f64).sqrt();
        match scheme {
            WeightInit::Uniform => {
                init.uniform(&format!("{path}.weight"), &[c_in, c_out], bound);
                init.uniform(&format!("{path}.bias"), &[c_out], bound);
            }
            WeightInit::Zero => {
                init.constant(&format!("{path}.weight"), &[c_in, c_out], 0.0);
                init.constant(&format!("{path}.bias"), &[c_out], 0.0);
            }
        }
        Linear {
            path: path.to_string(),
            c_in,
            c_out,
        }
    }

    pub fn weight_path(&self) -> String {
        format!("{}.weight", self.path)
    }

    pub fn bias_path(&self) -> String {
        format!("{}.bias", self.path)
    }

    /// Accepts any input whose last axis is `c_in`.
    pub fn forward<'g>(&self, b: &Binder<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        let w = b.param(&self.weight_path())?;
        let bias = b.param(&self.bias_path())?;
        on_rows(x, |x2| x2.matmul(&w)?.add_row(&bias))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<'g>(self, x: &Var<'g>) -> Var<'g> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Two linear layers with an activation between them.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp2 {
    pub fn new(init: &mut Init, path: &str, c_in: usize, hidden: usize, c_out: usize, last: WeightInit) -> Self {
        Mlp2 {
            fc1: Linear::new(init, &format!("{path}.fc1"), c_in, hidden, WeightInit::Uniform),
            fc2: Linear::new(init, &format!("{path}.fc2"), hidden, c_out, last),
            act: Activation::Relu,
        }
    }

    pub fn forward<'g>(&self, b: &Binder<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        let h = self.act.apply(&self.fc1.forward(b, x)?);
        self.fc2.forward(b, &h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub path: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(init: &mut Init, path: &str, dim: usize) -> Self {
        init.constant(&format!("{path}.weight"), &[dim], 1.0);
        init.constant(&format!("{path}.bias"), &[dim], 0.0);
        LayerNorm {
            path: path.to_string(),
            dim,
        }
    }

    pub fn forward<'g>(&self, b: &Binder<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        let g = b.param(&format!("{}.weight", self.path))?;
        let beta = b.param(&format!("{}.bias", self.path))?;
        x.layer_norm(&g, &beta, LAYER_NORM_EPS)
    }
}

/// Multi-head scaled dot-product attention with separate Q/K/V/output
/// projections. Used both as self-attention and as cross-attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(init: &mut Init, path: &str, dim: usize, heads: usize, out: WeightInit) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{path}: model dim {dim} is not divisible by {heads} heads"
            )));
        }
        let lin = |init: &mut Init, name: &str, scheme| Linear::new(init, &format!("{path}.{name}"), dim, dim, scheme);
        Ok(Attention {
            q_proj: lin(init, "q_proj", WeightInit::Uniform),
            k_proj: lin(init, "k_proj", WeightInit::Uniform),
            v_proj: lin(init, "v_proj", WeightInit::Uniform),
            out_proj: lin(init, "out_proj", out),
            heads,
            dim,
        })
    }

    fn split_heads<'g>(&self, x: &Var<'g>, n: usize, l: usize) -> Result<Var<'g>> {
        let d = self.dim / self.heads;
        x.reshape(&[n, l, self.heads, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n * self.heads, l, d])
    }

    /// `queries: [n, lq, c]`, `context: [n, lk, c]` → `[n, lq, c]`.
    pub fn forward<'g>(&self, b: &Binder<'g>, queries: &Var<'g>, context: &Var<'g>) -> Result<Var<'g>> {
        let (qs, ks) = (queries.shape(), context.shape());
        let (n, lq, lk) = match (&qs[..], &ks[..]) {
            ([n, lq, c], [n2, lk, c2]) if n == n2 && *c == self.dim && *c2 == self.dim => (*n, *lq, *lk),
            _ => return Err(Error::shape("attention", &qs, &ks)),
        };
        if lq == 0 || lk == 0 {
            return Err(Error::invalid("attention", "empty token sequence"));
        }
        let q = self.split_heads(&self.q_proj.forward(b, queries)?, n, lq)?;
        let k = self.split_heads(&self.k_proj.forward(b, context)?, n, lk)?;
        let v = self.split_heads(&self.v_proj.forward(b, context)?, n, lk)?;
        let d = self.dim / self.heads;
        let weights = q.bmm(&k, true)?.scale(1.0 / (d as f64).sqrt()).softmax()?;
        let mixed = weights
            .bmm(&v, false)?
            .reshape(&[n, self.heads, lq, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, lq, self.dim])?;
        self.out_proj.forward(b, &mixed)
    }

    pub fn self_attend<'g>(&self, b: &Binder<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        self.forward(b, x, x)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `h + MLP(LN(h))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp2,
}

pub const MLP_RATIO: usize = 2;

impl TransformerBlock {
    /// With `identity_init` the attention output projection and the second MLP
    /// layer start at zero, which makes the block exactly the identity.
    pub fn new(init: &mut Init, path: &str, dim: usize, heads: usize, identity_init: bool) -> Result<Self> {
        let last = if identity_init { WeightInit::Zero } else { WeightInit::Uniform };
        Ok(TransformerBlock {
            ln1: LayerNorm::new(init, &format!("{path}.ln1"), dim),
            attn: Attention::new(init, &format!("{path}.attn"), dim, heads, last)?,
            ln2: LayerNorm::new(init, &format!("{path}.ln2"), dim),
            mlp: Mlp2::new(init, &format!("{path}.mlp"), dim, dim * MLP_RATIO, dim, last),
        })
    }

    /// `x: [n, l, c]`; attention runs within each of the `n` sequences.
    pub fn forward<'g>(&self, b: &Binder<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        let h = x.add(&self.attn.self_attend(b, &self.ln1.forward(b, x)?)?)?;
        h.add(&self.mlp.forward(b, &self.ln2.forward(b, &h)?)?)
    }
}

/// Broadcasts a learnable `[c]` row to `[n, 1, c]`.
pub fn tile_row<'g>(row: &Var<'g>, n: usize) -> Result<Var<'g>> {
    let c = row.shape()[0];
    row.reshape(&[1, c])?.gather_rows(&vec![0; n])?.reshape(&[n, 1, c])
}

/// Broadcasts a `[r, c]` matrix to `[n, r, c]`.
pub fn tile_matrix<'g>(m: &Var<'g>, n: usize) -> Result<Var<'g>> {
    let s = m.shape();
    let (r, c) = (s[0], s[1]);
    m.reshape(&[1, r * c])?.gather_rows(&vec![0; n])?.reshape(&[n, r, c])
}

/// Adds a `[r, c]` matrix to every `[r, c]` slab of `x: [n, r, c]`.
pub fn add_slab<'g>(x: &Var<'g>, m: &Var<'g>) -> Result<Var<'g>> {
    let s = x.shape();
    if s.len() != 3 || m.shape() != s[1..] {
        return Err(Error::shape("add_slab", &s, &m.shape()));
    }
    let flat = x.reshape(&[s[0], s[1] * s[2]])?;
    flat.add_row(&m.reshape(&[s[1] * s[2]])?)?.reshape(&s)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check_many, CoordSample};
    use rand::Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut r = stream(seed, "nn-test", 0);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    /// Plain-loop multi-head attention over one sequence.
    pub(crate) fn attention_oracle(store: &ParamStore, a: &Attention, q: &[Vec<f64>], kv: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
            let w = store.get(&l.weight_path()).unwrap();
            let b = store.get(&l.bias_path()).unwrap();
            (0..l.c_out)
                .map(|o| b.data()[o] + (0..l.c_in).map(|i| x[i] * w.data()[i * l.c_out + o]).sum::<f64>())
                .collect()
        };
        let qs: Vec<Vec<f64>> = q.iter().map(|x| lin(&a.q_proj, x)).collect();
        let ks: Vec<Vec<f64>> = kv.iter().map(|x| lin(&a.k_proj, x)).collect();
        let vs: Vec<Vec<f64>> = kv.iter().map(|x| lin(&a.v_proj, x)).collect();
        let d = a.dim / a.heads;
        let mut out = Vec::new();
        for qi in &qs {
            let mut mixed = vec![0.0; a.dim];
            for h in 0..a.heads {
                let r = h * d..(h + 1) * d;
                let logits: Vec<f64> = ks
                    .iter()
                    .map(|kj| qi[r.clone()].iter().zip(&kj[r.clone()]).map(|(x, y)| x * y).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for (j, l) in logits.iter().enumerate() {
                    let p = (l - m).exp() / z;
                    for k in r.clone() {
                        mixed[k] += p * vs[j][k];
                    }
                }
            }
            out.push(lin(&a.out_proj, &mixed));
        }
        out
    }

    fn rows(t: &Tensor, n: usize) -> Vec<Vec<f64>> {
        t.data().chunks(t.numel() / n).map(|c| c.to_vec()).collect()
    }

    fn attn_setup(dim: usize, heads: usize, seed: u64) -> (ParamStore, Attention) {
        let mut store = ParamStore::new();
        let a = Attention::new(&mut Init::new(&mut store, seed), "a", dim, heads, WeightInit::Uniform).unwrap();
        (store, a)
    }

    #[test]
    fn self_attention_matches_loop_oracle() {
        for seed in 0..20 {
            for heads in [1, 2] {
                let (store, a) = attn_setup(4, heads, seed);
                let x = rand_t(&[1, 3, 4], seed + 50);
                let g = Graph::new();
                let b = Binder::new(&g, &store);
                let y = a.self_attend(&b, &g.constant(x.clone())).unwrap().tensor();
                let expect = attention_oracle(&store, &a, &rows(&x, 3), &rows(&x, 3));
                let got = rows(&y, 3);
                for (e, r) in expect.iter().zip(&got) {
                    for (u, v) in e.iter().zip(r) {
                        assert!((u - v).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn cross_attention_matches_loop_oracle() {
        let (store, a) = attn_setup(6, 2, 3);
        let q = rand_t(&[1, 2, 6], 1);
        let kv = rand_t(&[1, 3, 6], 2);
        let g = Graph::new();
        let b = Binder::new(&g, &store);
        let y = a.forward(&b, &g.constant(q.clone()), &g.constant(kv.clone())).unwrap().tensor();
        let expect = attention_oracle(&store, &a, &rows(&q, 2), &rows(&kv, 3));
        for (e, r) in expect.iter().zip(rows(&y, 2)) {
            for (u, v) in e.iter().zip(&r) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_gets_full_weight() {
        let (store, a) = attn_setup(4, 2, 7);
        let q = rand_t(&[2, 3, 4], 8);
        let kv = rand_t(&[2, 1, 4], 9);
        let g = Graph::new();
        let b = Binder::new(&g, &store);
        let y = a.forward(&b, &g.constant(q), &g.constant(kv.clone())).unwrap();
        let direct = a.out_proj.forward(&b, &a.v_proj.forward(&b, &g.constant(kv)).unwrap()).unwrap().tensor();
        let y = y.tensor();
        for n in 0..2 {
            for i in 0..3 {
                for k in 0..4 {
                    assert!((y.data()[(n * 3 + i) * 4 + k] - direct.data()[n * 4 + k]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let (store, a) = attn_setup(4, 2, 11);
        let row = rand_t(&[4], 12);
        let x = Tensor::from_fn(&[1, 5, 4], |i| row.data()[i % 4]);
        let g = Graph::new();
        let y = a.self_attend(&Binder::new(&g, &store), &g.constant(x)).unwrap().tensor();
        for i in 1..5 {
            assert_eq!(y.row(0), y.row(i));
        }
    }

    #[test]
    fn constant_values_make_logits_irrelevant() {
        let (store, a) = attn_setup(4, 2, 13);
        let row = rand_t(&[4], 14);
        let kv = Tensor::from_fn(&[1, 3, 4], |i| row.data()[i % 4]);
        let g = Graph::new();
        let b = Binder::new(&g, &store);
        let y1 = a.forward(&b, &g.constant(rand_t(&[1, 2, 4], 15)), &g.constant(kv.clone())).unwrap().tensor();
        let y2 = a.forward(&b, &g.constant(rand_t(&[1, 2, 4], 16)), &g.constant(kv)).unwrap().tensor();
        assert!(y1.max_abs_diff(&y2) < 1e-14);
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let (store, a) = attn_setup(4, 2, 17);
        let x = rand_t(&[1, 4, 4], 18);
        let perm = [2, 0, 3, 1];
        let xp = Tensor::from_fn(&[1, 4, 4], |i| x.data()[perm[i / 4] * 4 + i % 4]);
        let g = Graph::new();
        let b = Binder::new(&g, &store);
        let y = a.self_attend(&b, &g.constant(x)).unwrap().tensor();
        let yp = a.self_attend(&b, &g.constant(xp)).unwrap().tensor();
        for (i, &p) in perm.iter().enumerate() {
            for k in 0..4 {
                assert!((yp.data()[i * 4 + k] - y.data()[p * 4 + k]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut store = ParamStore::new();
        let err = Attention::new(&mut Init::new(&mut store, 0), "a", 6, 4, WeightInit::Uniform).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn mlp_zero_weights_give_zero() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 0);
        let m = Mlp2::new(&mut init, "m", 3, 5, 2, WeightInit::Zero);
        for k in store.clone().iter().map(|(k, _)| k.clone()) {
            store.get_mut(&k).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let g = Graph::new();
        let y = m.forward(&Binder::new(&g, &store), &g.constant(rand_t(&[4, 3], 1))).unwrap().tensor();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_identity_weights_pass_nonnegative_input() {
        let mut store = ParamStore::new();
        let m = Mlp2::new(&mut Init::new(&mut store, 0), "m", 3, 3, 3, WeightInit::Uniform);
        for l in [&m.fc1, &m.fc2] {
            *store.get_mut(&l.weight_path()).unwrap() = Tensor::eye(3);
            *store.get_mut(&l.bias_path()).unwrap() = Tensor::zeros(&[3]);
        }
        let x = rand_t(&[4, 3], 2).map(f64::abs);
        let g = Graph::new();
        let y = m.forward(&Binder::new(&g, &store), &g.constant(x.clone())).unwrap().tensor();
        assert!(y.bitwise_eq(&x));
    }

    #[test]
    fn mlp_matches_matrix_oracle() {
        let mut store = ParamStore::new();
        let m = Mlp2::new(&mut Init::new(&mut store, 4), "m", 3, 5, 2, WeightInit::Uniform);
        let x = rand_t(&[4, 3], 3);
        let g = Graph::new();
        let y = m.forward(&Binder::new(&g, &store), &g.constant(x.clone())).unwrap().tensor();
        let w1 = store.get("m.fc1.weight").unwrap();
        let b1 = store.get("m.fc1.bias").unwrap();
        let w2 = store.get("m.fc2.weight").unwrap();
        let b2 = store.get("m.fc2.bias").unwrap();
        for r in 0..4 {
            let h: Vec<f64> = (0..5)
                .map(|j| (b1.data()[j] + (0..3).map(|i| x.data()[r * 3 + i] * w1.data()[i * 5 + j]).sum::<f64>()).max(0.0))
                .collect();
            for o in 0..2 {
                let e = b2.data()[o] + (0..5).map(|j| h[j] * w2.data()[j * 2 + o]).sum::<f64>();
                assert!((e - y.data()[r * 2 + o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_init_block_is_exact_identity() {
        let mut store = ParamStore::new();
        let blk = TransformerBlock::new(&mut Init::new(&mut store, 5), "blk", 8, 4, true).unwrap();
        let x = rand_t(&[3, 5, 8], 6);
        let g = Graph::new();
        let y = blk.forward(&Binder::new(&g, &store), &g.constant(x.clone())).unwrap().tensor();
        assert!(y.bitwise_eq(&x));
    }

    #[test]
    fn frozen_prefix_gets_no_gradient() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 1);
        let a = Linear::new(&mut init, "enc.a", 3, 3, WeightInit::Uniform);
        let c = Linear::new(&mut init, "enc.ab", 3, 1, WeightInit::Uniform);
        let g = Graph::new();
        let b = Binder::new(&g, &store).freeze("enc.a");
        let x = g.constant(rand_t(&[2, 3], 0));
        let y = c.forward(&b, &a.forward(&b, &x).unwrap()).unwrap().sum();
        let grads = b.grads(&g.backward(y).unwrap());
        assert_eq!(grads.keys().cloned().collect::<Vec<_>>(), vec!["enc.ab.bias", "enc.ab.weight"]);
    }

    #[test]
    fn prefix_matching_respects_boundaries() {
        assert!(has_prefix("sgtm.atd.q_proj.weight", "sgtm.atd"));
        assert!(has_prefix("sgtm", "sgtm"));
        assert!(!has_prefix("sgtmx.a", "sgtm"));
        assert!(has_prefix("anything", ""));
    }

    #[test]
    fn init_depends_only_on_seed_and_path() {
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        Linear::new(&mut Init::new(&mut s1, 9), "x.y", 4, 2, WeightInit::Uniform);
        Linear::new(&mut Init::new(&mut s2, 9), "z", 4, 4, WeightInit::Uniform);
        Linear::new(&mut Init::new(&mut s2, 9), "x.y", 4, 2, WeightInit::Uniform);
        assert_eq!(s1.get("x.y.weight").unwrap(), s2.get("x.y.weight").unwrap());
        let bound = 0.5;
        assert!(s1.get("x.y.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    /// Finite-difference check of a layer through its parameters and input.
    fn layer_gradcheck(store: &ParamStore, x: &Tensor, f: impl for<'g> Fn(&Binder<'g>, &Var<'g>) -> Result<Var<'g>>) -> f64 {
        let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
        let mut inputs: Vec<Tensor> = names.iter().map(|k| store.get(k).unwrap().clone()).collect();
        inputs.push(x.clone());
        let proj = rand_t(&[64], 99);
        finite_diff_check_many(
            |g, vs| {
                let b = Binder::from_vars(g, names.iter().cloned().zip(vs.iter().copied()).collect());
                let y = f(&b, &vs[vs.len() - 1])?;
                let w = g.constant(Tensor::from_fn(&y.shape(), |i| proj.data()[i % 64] + (i / 64) as f64 * 0.01));
                Ok(y.mul(&w)?.sum())
            },
            &inputs,
            1e-5,
            CoordSample::Random { count: 120, seed: 3 },
        )
        .unwrap()
    }

    #[test]
    fn every_layer_passes_gradient_check() {
        for seed in 0..3 {
            let mut store = ParamStore::new();
            let mut init = Init::new(&mut store, seed);
            let lin = Linear::new(&mut init, "lin", 4, 3, WeightInit::Uniform);
            let mlp = Mlp2::new(&mut init, "mlp", 4, 5, 4, WeightInit::Uniform);
            let ln = LayerNorm::new(&mut init, "ln", 4);
            let attn = Attention::new(&mut init, "attn", 4, 2, WeightInit::Uniform).unwrap();
            let blk = TransformerBlock::new(&mut init, "blk", 4, 2, false).unwrap();
            let x = rand_t(&[2, 3, 4], seed + 10);
            let kv = rand_t(&[2, 2, 4], seed + 20);
            let errs = [
                layer_gradcheck(&store, &x, |b, x| lin.forward(b, x)),
                layer_gradcheck(&store, &x, |b, x| mlp.forward(b, &x.tanh())),
                layer_gradcheck(&store, &x, |b, x| ln.forward(b, x)),
                layer_gradcheck(&store, &x, |b, x| attn.self_attend(b, x)),
                layer_gradcheck(&store, &x, |b, x| attn.forward(b, x, &b.graph().constant(kv.clone()))),
                layer_gradcheck(&store, &x, |b, x| blk.forward(b, x)),
            ];
            for (i, e) in errs.iter().enumerate() {
                assert!(*e < 1e-6, "layer {i} seed {seed}: {e}");
            }
        }
    }

    #[test]
    fn tiling_helpers_broadcast() {
        let g = Graph::new();
        let r = g.constant(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        assert_eq!(tile_row(&r, 3).unwrap().tensor().data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let m = g.constant(Tensor::eye(2));
        let x = g.constant(Tensor::zeros(&[2, 2, 2]));
        assert_eq!(add_slab(&x, &m).unwrap().tensor().data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(tile_matrix(&m, 2).unwrap().shape(), vec![2, 2, 2]);
    }
}
