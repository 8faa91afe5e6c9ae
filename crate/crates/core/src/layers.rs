//! Neural building blocks: linear, layer norm, dropout, variate-token
//! attention, feed-forward and the sigmoid gate.
//!
//! Parameters live in a [`ParamStore`]; layer structs only hold [`ParamId`]s.
//! At the start of every forward pass the store is bound to a fresh
//! [`Graph`] and layers look their leaves up through [`Bound`].

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Register every parameter as a trainable leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }
}

/// Parameter leaves of one forward pass.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Leaves in `ParamStore` order; used when a caller registers the leaves itself.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearParams {
    /// Weight `[in, out]` and bias `[out]`, both from U(-1/sqrt(in), 1/sqrt(in)).
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = Tensor::from_fn(&[in_dim, out_dim], |_| rng.uniform_range(-bound, bound));
        let b = Tensor::from_fn(&[out_dim], |_| rng.uniform_range(-bound, bound));
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        linear_apply(g, p, self, x)
    }
}

/// `x . W + b` over the last axis.
pub fn linear_apply(g: &mut Graph, p: &Bound, lin: &LinearParams, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.last() != Some(&lin.in_dim) {
        return Err(Error::shape("linear", &shape, &[lin.in_dim, lin.out_dim]));
    }
    let (input, flat) = if shape.len() == 1 {
        (g.reshape(x, &[1, lin.in_dim])?, true)
    } else {
        (x, false)
    };
    let y = g.matmul(input, p.var(lin.weight))?;
    let y = g.add_row(y, p.var(lin.bias))?;
    if flat {
        g.reshape(y, &[lin.out_dim])
    } else {
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNormParams {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            dim,
            eps: Self::DEFAULT_EPS,
        }
    }
}

pub fn layer_norm_apply(g: &mut Graph, p: &Bound, ln: &LayerNormParams, x: Var) -> Result<Var> {
    if g.shape(x).last() != Some(&ln.dim) {
        return Err(Error::shape("layer_norm", g.shape(x), &[ln.dim]));
    }
    let normed = g.normalize_last(x, ln.eps);
    let scaled = g.mul_row(normed, p.var(ln.gamma))?;
    g.add_row(scaled, p.var(ln.beta))
}

/// Inverted dropout. With `training == false` or `rate == 0` the input node
/// itself is returned, so evaluation is bitwise the identity.
pub fn dropout_apply(
    g: &mut Graph,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut SeededRng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidRate(rate));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = Tensor::from_fn(g.shape(x), |_| if rng.bernoulli(rate) { 0.0 } else { keep });
    let m = g.constant(mask);
    g.mul(x, m)
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub heads: usize,
    pub head_dim: usize,
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub out: LinearParams,
}

impl AttentionParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        embed_dim: usize,
        heads: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if heads == 0 || embed_dim % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "heads ({heads}) must divide embed_dim ({embed_dim})"
            )));
        }
        Ok(Self {
            heads,
            head_dim: embed_dim / heads,
            query: LinearParams::init(store, &format!("{name}.query"), embed_dim, embed_dim, rng),
            key: LinearParams::init(store, &format!("{name}.key"), embed_dim, embed_dim, rng),
            value: LinearParams::init(store, &format!("{name}.value"), embed_dim, embed_dim, rng),
            out: LinearParams::init(store, &format!("{name}.out"), embed_dim, embed_dim, rng),
        })
    }

    fn embed_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Output of a token mixer: the mixed tokens and, when available, the
/// `[B, heads, D, D]` attention weights.
#[derive(Clone, Copy, Debug)]
pub struct MixOutput {
    pub out: Var,
    pub weights: Option<Var>,
}

/// Scaled dot-product attention across the D variate tokens of `x: [B, D, E]`.
pub fn full_attention(g: &mut Graph, p: &Bound, att: &AttentionParams, x: Var) -> Result<MixOutput> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != att.embed_dim() {
        return Err(Error::shape("attention", &shape, &[att.heads, att.head_dim]));
    }
    let (b, d, e) = (shape[0], shape[1], shape[2]);
    let (h, dk) = (att.heads, att.head_dim);

    let split = |g: &mut Graph, lin: &LinearParams| -> Result<Var> {
        let y = linear_apply(g, p, lin, x)?;
        let y = g.reshape(y, &[b, d, h, dk])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let q = split(g, &att.query)?;
    let k = split(g, &att.key)?;
    let v = split(g, &att.value)?;

    let kt = g.transpose_last(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = g.softmax_last(scores);
    let ctx = g.matmul(weights, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, d, e])?;
    let out = linear_apply(g, p, &att.out, ctx)?;
    Ok(MixOutput {
        out,
        weights: Some(weights),
    })
}

/// Variate-mixing stage of a block. Only full attention is implemented; other
/// attention families plug in as further variants.
#[derive(Clone, Debug)]
pub enum Mixer {
    Full(AttentionParams),
}

impl Mixer {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<MixOutput> {
        match self {
            Mixer::Full(att) => full_attention(g, p, att, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeedForwardParams {
    pub lin1: LinearParams,
    pub lin2: LinearParams,
}

impl FeedForwardParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            lin1: LinearParams::init(store, &format!("{name}.lin1"), dim, hidden, rng),
            lin2: LinearParams::init(store, &format!("{name}.lin2"), hidden, dim, rng),
        }
    }
}

/// `lin2(GELU(lin1(x)))`.
pub fn feed_forward(g: &mut Graph, p: &Bound, ffn: &FeedForwardParams, x: Var) -> Result<Var> {
    let h = linear_apply(g, p, &ffn.lin1, x)?;
    let h = g.gelu(h);
    linear_apply(g, p, &ffn.lin2, h)
}

#[derive(Clone, Debug)]
pub struct GateParams {
    pub gate: LinearParams,
    pub value: LinearParams,
}

impl GateParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            gate: LinearParams::init(store, &format!("{name}.gate"), in_dim, out_dim, rng),
            value: LinearParams::init(store, &format!("{name}.value"), in_dim, out_dim, rng),
        }
    }
}

/// `sigmoid(gate(x)) * value(x)`.
pub fn gate_apply(g: &mut Graph, p: &Bound, gate: &GateParams, x: Var) -> Result<Var> {
    let a = linear_apply(g, p, &gate.gate, x)?;
    let a = g.sigmoid(a);
    let v = linear_apply(g, p, &gate.value, x)?;
    g.mul(a, v)
}
