//! Named parameters, per-forward graph binding, and the dense building blocks.

use std::collections::HashMap;

use mathmoe_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    UDecoder,
    GDecoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.params[id.0].value = value;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Gradients of one backward pass, indexed like the store.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0)?.as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Adds `scale · other` into these gradients.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (i, g) in other.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            match &mut self.grads[i] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * b;
                    }
                }
                slot @ None => *slot = Some(g.map(|v| v * scale)),
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }

    /// Whether `id` received any non-zero gradient.
    pub fn touches(&self, id: ParamId) -> bool {
        self.get(id).is_some_and(|g| g.data().iter().any(|v| *v != 0.0))
    }
}

/// A tape plus lazily bound parameter leaves for one forward pass.
///
/// In training mode the graph owns a seeded generator that drives dropout and
/// routing jitter; otherwise both are disabled.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    track: bool,
    rng: Option<ChaCha8Rng>,
    dropout: f64,
}

impl<'s> Graph<'s> {
    /// No gradients, no dropout, no jitter.
    pub fn inference(store: &'s ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            track: false,
            rng: None,
            dropout: 0.0,
        }
    }

    /// Gradients tracked, but deterministic (no dropout, no jitter).
    pub fn with_grad(store: &'s ParamStore) -> Self {
        Graph {
            track: true,
            ..Graph::inference(store)
        }
    }

    /// Gradients tracked; dropout at `dropout` and routing jitter driven by `seed`.
    pub fn training(store: &'s ParamStore, seed: u64, dropout: f64) -> Self {
        Graph {
            track: true,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            dropout,
            ..Graph::inference(store)
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.value(id).clone(), self.track);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.tape.value(x).shape().to_vec();
        let n = self.tape.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        Ok(self.tape.mul_const(x, &Tensor::new(shape, mask)?)?)
    }

    /// Multiplicative factors drawn from `Uniform[1-eta, 1+eta]`, or `None`
    /// when jitter is inactive.
    pub fn jitter(&mut self, rows: usize, cols: usize, eta: f64) -> Option<Tensor> {
        if eta <= 0.0 {
            return None;
        }
        let rng = self.rng.as_mut()?;
        Some(jitter_factors(rng, rows, cols, eta))
    }

    /// Back-propagates a scalar loss and collects parameter gradients.
    pub fn backward(mut self, loss: Var) -> Result<Gradients> {
        if !self.track {
            return Err(CoreError::Config("backward on an inference graph".into()));
        }
        self.tape.backward(loss)?;
        let grads = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v)))
            .collect();
        Ok(Gradients { grads })
    }
}

pub fn jitter_factors(rng: &mut impl Rng, rows: usize, cols: usize, eta: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(1.0 - eta..=1.0 + eta))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// Standard-normal tensor scaled by `std`.
pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        Linear {
            w: store.add(format!("{name}.w"), group, normal(&[d_in, d_out], std, rng)),
            b: store.add(format!("{name}.b"), group, Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.tape.matmul(x, w)?;
        Ok(g.tape.add_bias(y, b)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.g"), group, Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.b"), group, Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        Ok(g.tape.layer_norm(x, gain, bias, LN_EPS)?)
    }
}

/// Two affine maps around a GELU.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), group, d, d_ff, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), group, d_ff, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.gelu(h)?;
        let h = g.dropout(h)?;
        self.fc2.forward(g, h)
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.fc1.w, self.fc1.b, self.fc2.w, self.fc2.b]
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

const MASKED_SCORE: f64 = -1e30;

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Attention {
            q: Linear::new(store, &format!("{name}.q"), group, d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), group, d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), group, d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), group, d, d, rng),
            heads,
        }
    }

    /// Queries from `x`, keys and values from `context`. With `causal`, query
    /// `i` only sees keys `0..=i`.
    pub fn forward(&self, g: &mut Graph, x: Var, context: Var, causal: bool) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let (nq, d) = (g.value(q).rows(), g.value(q).cols());
        let nk = g.value(k).rows();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mask: Option<Vec<bool>> = causal.then(|| {
            (0..nq)
                .flat_map(|i| (0..nk).map(move |j| j > i))
                .collect()
        });
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.tape.slice_cols(q, lo, hi)?,
                    g.tape.slice_cols(k, lo, hi)?,
                    g.tape.slice_cols(v, lo, hi)?,
                )
            };
            let s = g.tape.matmul_nt(qh, kh)?;
            let mut s = g.tape.scale(s, scale)?;
            if let Some(m) = &mask {
                s = g.tape.mask_fill(s, m, MASKED_SCORE)?;
            }
            let p = g.tape.softmax(s, 1)?;
            let p = g.dropout(p)?;
            outs.push(g.tape.matmul(p, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.tape.concat_cols(&outs)?
        };
        self.o.forward(g, merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_attention_ignores_future() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let att = Attention::new(&mut store, "a", ParamGroup::GDecoder, 4, 2, &mut rng);
        let x = normal(&[3, 4], 1.0, &mut rng);
        let mut y = x.clone();
        y.data_mut()[8..].iter_mut().for_each(|v| *v += 5.0);
        let run = |input: &Tensor| {
            let mut g = Graph::inference(&store);
            let v = g.tape.constant(input.clone());
            let out = att.forward(&mut g, v, v, true).unwrap();
            g.value(out).clone()
        };
        let (a, b) = (run(&x), run(&y));
        assert_eq!(&a.data()[..8], &b.data()[..8]);
        assert_ne!(&a.data()[8..], &b.data()[8..]);
    }

    #[test]
    fn gradients_accumulate() {
        let mut store = ParamStore::new();
        let id = store.add("p", ParamGroup::Encoder, Tensor::row(&[1.0, 2.0]));
        let mut g = Graph::with_grad(&store);
        let p = g.param(id);
        let s = g.tape.square(p).unwrap();
        let l = g.tape.sum(s).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), &[2.0, 4.0]);
        let mut acc = Gradients::zeros_like(&store);
        acc.accumulate(&grads, 0.5);
        acc.accumulate(&grads, 0.5);
        assert_eq!(acc.get(id).unwrap().data(), &[2.0, 4.0]);
        assert!((acc.l2_norm() - 20f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn dropout_only_in_training() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let x = g.tape.constant(Tensor::full(&[1, 100], 1.0));
        assert_eq!(g.dropout(x).unwrap(), x);
        let mut g = Graph::training(&store, 3, 0.5);
        let x = g.tape.constant(Tensor::full(&[1, 100], 1.0));
        let y = g.dropout(x).unwrap();
        let zeros = g.value(y).data().iter().filter(|v| **v == 0.0).count();
        assert!(zeros > 20 && zeros < 80);
    }
}
