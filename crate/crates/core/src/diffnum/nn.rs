//! Neural building blocks on top of the tape: linear layers, MLPs,
//! scaled dot-product attention and a post-norm transformer decoder block.

use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;

use super::store::ParamStore;
use super::tape::{Grads, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A tape bound to a read-only parameter store. Parameters become leaves on
/// first use and are shared by every later reference.
pub struct Graph<'a, S> {
    tape: Tape<S>,
    store: &'a ParamStore<S>,
    bound: BTreeMap<String, Var>,
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore<S> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = self.tape.leaf(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.tape.leaf(t)
    }

    /// Gradients for every parameter in the store, zero for parameters the
    /// loss never touched.
    pub fn param_grads(&self, grads: &Grads<S>) -> BTreeMap<String, Tensor<S>> {
        self.store
            .iter()
            .map(|(name, p)| {
                let g = match self.bound.get(name) {
                    Some(&v) => grads
                        .get(v)
                        .reshape(p.shape().to_vec())
                        .expect("leaf keeps the parameter length"),
                    None => Tensor::zeros(p.shape().to_vec()),
                };
                (name.to_string(), g)
            })
            .collect()
    }
}

impl<S> Deref for Graph<'_, S> {
    type Target = Tape<S>;
    fn deref(&self) -> &Tape<S> {
        &self.tape
    }
}

impl<S> DerefMut for Graph<'_, S> {
    fn deref_mut(&mut self) -> &mut Tape<S> {
        &mut self.tape
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// `y = x·W + b`
pub fn linear<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

pub fn linear_named<S: Scalar>(g: &mut Graph<'_, S>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    linear(g, x, w, b)
}

/// Alternating linear/activation layers with no activation after the last.
pub fn mlp<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    layers: &[(Var, Var)],
    activation: Activation,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::config("mlp needs at least one layer"));
    }
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = linear(tape, h, w, b)?;
        if i + 1 < layers.len() && activation == Activation::Relu {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// MLP whose layers are stored as `{prefix}.{i}.w` / `{prefix}.{i}.b`.
pub fn mlp_named<S: Scalar>(
    g: &mut Graph<'_, S>,
    prefix: &str,
    n_layers: usize,
    x: Var,
) -> Result<Var> {
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        layers.push((
            g.param(&format!("{prefix}.{i}.w"))?,
            g.param(&format!("{prefix}.{i}.b"))?,
        ));
    }
    mlp(g, x, &layers, Activation::Relu)
}

pub fn declare_mlp<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    prefix: &str,
    dims: &[usize],
    rng: &mut R,
) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::config(format!("mlp `{prefix}` needs at least two dims")));
    }
    for (i, w) in dims.windows(2).enumerate() {
        store.init_linear(&format!("{prefix}.{i}"), w[0], w[1], rng)?;
    }
    Ok(())
}

/// Softmax along the last axis (`axis = 1`) or down columns (`axis = 0`).
pub fn softmax<S: Scalar>(tape: &mut Tape<S>, x: Var, axis: usize) -> Result<Var> {
    match axis {
        1 => Ok(tape.softmax_rows(x)),
        0 => {
            let t = tape.transpose(x);
            let s = tape.softmax_rows(t);
            Ok(tape.transpose(s))
        }
        _ => Err(Error::shape(format!("softmax axis {axis} on a matrix"))),
    }
}

/// `softmax(q·kᵀ/√d + mask)·v` for a single head.
pub fn attention<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor<S>>,
) -> Result<Var> {
    let (_, d) = tape.shape(q);
    let (nk, _) = tape.shape(k);
    if tape.shape(v).0 != nk {
        return Err(Error::shape(format!(
            "{nk} keys but {} values",
            tape.shape(v).0
        )));
    }
    let scores = tape.matmul_nt(q, k)?;
    let mut scores = tape.scale(scores, S::one() / S::of(d as f64).sqrt());
    if let Some(m) = mask {
        scores = tape.add_const(scores, m)?;
    }
    let w = tape.softmax_rows(scores);
    tape.matmul(w, v)
}

/// Multi-head attention with input projections `{prefix}.{q,k,v}` and
/// output projection `{prefix}.o`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<S: Scalar>(
    g: &mut Graph<'_, S>,
    prefix: &str,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor<S>>,
    heads: usize,
) -> Result<Var> {
    let c = g.shape(q).1;
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::config(format!("{heads} heads do not divide width {c}")));
    }
    let qp = linear_named(g, &format!("{prefix}.q"), q)?;
    let kp = linear_named(g, &format!("{prefix}.k"), k)?;
    let vp = linear_named(g, &format!("{prefix}.v"), v)?;
    let d = c / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(qp, h * d, d)?;
        let kh = g.slice_cols(kp, h * d, d)?;
        let vh = g.slice_cols(vp, h * d, d)?;
        outs.push(attention(g, qh, kh, vh, mask)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs)? };
    linear_named(g, &format!("{prefix}.o"), cat)
}

pub fn declare_attention<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    prefix: &str,
    c: usize,
    rng: &mut R,
) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        store.init_linear(&format!("{prefix}.{p}"), c, c, rng)?;
    }
    Ok(())
}

pub fn layer_norm_named<S: Scalar>(g: &mut Graph<'_, S>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.gamma"))?;
    let beta = g.param(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

pub fn declare_layer_norm<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, c: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::filled(vec![c], S::one()))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros(vec![c]))
}

/// Shape of a decoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderShape {
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
}

pub fn declare_decoder<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    prefix: &str,
    shape: DecoderShape,
    rng: &mut R,
) -> Result<()> {
    let c = shape.width;
    declare_attention(store, &format!("{prefix}.self"), c, rng)?;
    declare_layer_norm(store, &format!("{prefix}.ln1"), c)?;
    declare_attention(store, &format!("{prefix}.cross"), c, rng)?;
    declare_layer_norm(store, &format!("{prefix}.ln2"), c)?;
    declare_mlp(store, &format!("{prefix}.ffn"), &[c, shape.ffn, c], rng)?;
    declare_layer_norm(store, &format!("{prefix}.ln3"), c)
}

/// Post-norm decoder block: self-attention over `q`, masked
/// cross-attention to `(k, v)`, feed-forward; each sublayer followed by a
/// residual add and layer normalization.
pub fn decoder_block<S: Scalar>(
    g: &mut Graph<'_, S>,
    prefix: &str,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor<S>>,
    heads: usize,
) -> Result<Var> {
    let (_, c) = g.shape(q);
    if g.shape(k).1 != c || g.shape(v).1 != c {
        return Err(Error::shape(format!(
            "decoder width {c} with key width {} and value width {}",
            g.shape(k).1,
            g.shape(v).1
        )));
    }
    let sa = multi_head_attention(g, &format!("{prefix}.self"), q, q, q, None, heads)?;
    let x = g.add(q, sa)?;
    let x = layer_norm_named(g, &format!("{prefix}.ln1"), x)?;
    let ca = multi_head_attention(g, &format!("{prefix}.cross"), x, k, v, mask, heads)?;
    let x2 = g.add(x, ca)?;
    let x2 = layer_norm_named(g, &format!("{prefix}.ln2"), x2)?;
    let ff = mlp_named(g, &format!("{prefix}.ffn"), 2, x2)?;
    let x3 = g.add(x2, ff)?;
    layer_norm_named(g, &format!("{prefix}.ln3"), x3)
}
