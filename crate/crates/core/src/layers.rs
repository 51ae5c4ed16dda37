//! Embedding tables, dense layers and the transformer layer.
//!
//! Weight matrices are stored `[in × out]` and applied to row vectors, so a
//! batch of inputs is simply a matrix with one example per row.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::numerics::{ModelParams, ParamId, Real, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const EMBEDDING_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Gelu => tape.gelu(x),
            Activation::Identity => x,
        }
    }
}

pub fn glorot_uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    let data = (0..fan_in * fan_out)
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape")
}

pub fn normal_init<T: Real, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols)
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

/// `activation(x · W + b)`.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ModelParams<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.register(format!("{name}.weight"), glorot_uniform(rng, in_dim, out_dim))?;
        let bias = params.register(format!("{name}.bias"), Tensor::zeros(vec![out_dim]))?;
        Ok(DenseLayer {
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let h = tape.matmul(x, w)?;
        let h = tape.add_row(h, b)?;
        Ok(self.activation.apply(tape, h))
    }
}

/// A sparse side vector: `(position, value)` pairs of its non-zero entries.
pub type SideVector<T> = Vec<(usize, T)>;

/// Row table with an optional linear projection of a side vector that is
/// added to the looked-up row.
///
/// Looking up row `i` and adding `P·s` is the same linear map as embedding
/// the concatenation of a one-hot id vector and the side vector `s`.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub rows: ParamId,
    /// `[T × K]`; row `c` is the contribution of side dimension `c`.
    pub side_projection: Option<ParamId>,
    pub vocab: usize,
    pub dim: usize,
    pub side_dim: usize,
}

impl EmbeddingTable {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ModelParams<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        side_dim: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let rows = params.register(name, normal_init(rng, vocab, dim, EMBEDDING_INIT_STD))?;
        let side_projection = match side_dim {
            Some(t) => Some(params.register(
                format!("{name}.side"),
                normal_init(rng, t, dim, EMBEDDING_INIT_STD),
            )?),
            None => None,
        };
        Ok(EmbeddingTable {
            rows,
            side_projection,
            vocab,
            dim,
            side_dim: side_dim.unwrap_or(0),
        })
    }

    /// Batched lookup: one output row per index, plus the projected side
    /// vector for that row when `side` is given.
    pub fn lookup<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        indices: &[usize],
        side: Option<Vec<SideVector<T>>>,
    ) -> Result<Var> {
        let base = tape.gather(self.rows, indices)?;
        match (side, self.side_projection) {
            (None, _) => Ok(base),
            (Some(bags), Some(proj)) => {
                if bags.len() != indices.len() {
                    return Err(Error::Shape {
                        op: "embed",
                        left: vec![indices.len()],
                        right: vec![bags.len()],
                    });
                }
                let extra = tape.bag(proj, bags)?;
                tape.add(base, extra)
            }
            (Some(_), None) => Err(Error::Config(
                "side vector supplied to a table without a side projection".into(),
            )),
        }
    }
}

/// Single-row lookup with an optional dense side vector of length `T`.
pub fn embed<T: Real>(
    tape: &mut Tape<'_, T>,
    table: &EmbeddingTable,
    index: usize,
    side: Option<&[T]>,
) -> Result<Var> {
    let bags = match side {
        None => None,
        Some(s) => {
            if s.len() != table.side_dim {
                return Err(Error::Shape {
                    op: "embed",
                    left: vec![table.side_dim],
                    right: vec![s.len()],
                });
            }
            Some(vec![s
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != T::zero())
                .map(|(c, &v)| (c, v))
                .collect()])
        }
    };
    table.lookup(tape, &[index], bags)
}

/// One transformer layer: multi-head self-attention and a position-wise
/// feed-forward network, each wrapped in dropout, a residual connection and
/// layer normalization.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub dim: usize,
    pub heads: usize,
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: ParamId,
    pub ffn_in: DenseLayer,
    pub ffn_out: DenseLayer,
    pub ln_attn: (ParamId, ParamId),
    pub ln_ffn: (ParamId, ParamId),
    pub dropout: f64,
}

impl TransformerLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ModelParams<T>,
        name: &str,
        dim: usize,
        heads: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model dimension {dim} is not divisible by {heads} heads"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout rate {dropout} outside [0, 1)")));
        }
        let dh = dim / heads;
        let proj = |kind: &str, params: &mut ModelParams<T>, rng: &mut R| -> Result<Vec<ParamId>> {
            (0..heads)
                .map(|i| params.register(format!("{name}.head{i}.{kind}"), glorot_uniform(rng, dim, dh)))
                .collect()
        };
        let query = proj("query", params, rng)?;
        let key = proj("key", params, rng)?;
        let value = proj("value", params, rng)?;
        let output = params.register(format!("{name}.attn_out"), glorot_uniform(rng, dim, dim))?;
        let ffn_in = DenseLayer::new(params, &format!("{name}.ffn_in"), dim, 4 * dim, Activation::Gelu, rng)?;
        let ffn_out = DenseLayer::new(params, &format!("{name}.ffn_out"), 4 * dim, dim, Activation::Identity, rng)?;
        let ln = |tag: &str, params: &mut ModelParams<T>| -> Result<(ParamId, ParamId)> {
            let gain = Tensor::new(vec![dim], vec![T::one(); dim])?;
            Ok((
                params.register(format!("{name}.{tag}.gain"), gain)?,
                params.register(format!("{name}.{tag}.bias"), Tensor::zeros(vec![dim]))?,
            ))
        };
        let ln_attn = ln("ln_attn", params)?;
        let ln_ffn = ln("ln_ffn", params)?;
        Ok(TransformerLayer {
            dim,
            heads,
            query,
            key,
            value,
            output,
            ffn_in,
            ffn_out,
            ln_attn,
            ln_ffn,
            dropout,
        })
    }

    /// Multi-head self-attention over consecutive blocks of `group` rows.
    /// Returns the output and each head's attention weights
    /// (`[(G·group) × group]`).
    pub fn attention<T: Real>(&self, tape: &mut Tape<'_, T>, h: Var, group: usize) -> Result<(Var, Vec<Var>)> {
        let cols = tape.value(h).cols();
        if cols != self.dim {
            return Err(Error::Shape {
                op: "attention",
                left: tape.value(h).shape().to_vec(),
                right: vec![self.dim],
            });
        }
        let scale = T::one() / T::from_usize(self.dim / self.heads).expect("head size").sqrt();
        let mut out: Option<Var> = None;
        let mut weights = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let wq = tape.param(self.query[i]);
            let wk = tape.param(self.key[i]);
            let wv = tape.param(self.value[i]);
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let scores = tape.grouped_matmul_nt(q, k, group)?;
            let scores = tape.scale(scores, scale);
            let p = tape.softmax_rows(scores);
            weights.push(p);
            let head = tape.grouped_matmul(p, v, group)?;
            out = Some(match out {
                None => head,
                Some(prev) => tape.concat(prev, head, 1)?,
            });
        }
        let wo = tape.param(self.output);
        let mh = tape.matmul(out.expect("at least one head"), wo)?;
        Ok((mh, weights))
    }

    pub fn pffn<T: Real>(&self, tape: &mut Tape<'_, T>, a: Var) -> Result<Var> {
        let hidden = self.ffn_in.forward(tape, a)?;
        self.ffn_out.forward(tape, hidden)
    }

    /// `A = LN(X + Dropout(MH(X)))`, output `LN(A + Dropout(PFFN(A)))`.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        group: usize,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let rate = T::from_f64_lossy(self.dropout);
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);

        let (mh, _) = self.attention(tape, x, group)?;
        let mh = tape.dropout(mh, rate, training, rng);
        let res = tape.add(x, mh)?;
        let (g, b) = (tape.param(self.ln_attn.0), tape.param(self.ln_attn.1));
        let a = tape.layer_norm(res, g, b, eps)?;

        let f = self.pffn(tape, a)?;
        let f = tape.dropout(f, rate, training, rng);
        let res = tape.add(a, f)?;
        let (g, b) = (tape.param(self.ln_ffn.0), tape.param(self.ln_ffn.1));
        tape.layer_norm(res, g, b, eps)
    }
}

/// Self-attention over a single sequence `H` of shape `[t × d]`.
pub fn multi_head_self_attention<T: Real>(tape: &mut Tape<'_, T>, h: Var, layer: &TransformerLayer) -> Result<Var> {
    let t = tape.value(h).rows();
    layer.attention(tape, h, t).map(|(out, _)| out)
}

pub fn pffn<T: Real>(tape: &mut Tape<'_, T>, a: Var, layer: &TransformerLayer) -> Result<Var> {
    layer.pffn(tape, a)
}

/// One transformer layer applied to a single sequence.
pub fn transformer_layer<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    x: Var,
    layer: &TransformerLayer,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let t = tape.value(x).rows();
    layer.forward(tape, x, t, training, rng)
}
