//! Layers built on the tape. Each layer owns only [`ParamId`]s; values live
//! in a [`Parameters`] store and are read through a [`Bound`] per pass.

use rand::Rng as _;

use super::params::{ParamId, Parameters};
use super::tape::{Bound, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Xavier,
    Zeros,
}

fn init_values(rows: usize, cols: usize, init: Init, rng: &mut Rng) -> Vec<f64> {
    match init {
        Init::Zeros => vec![0.0; rows * cols],
        Init::Xavier => {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        params: &mut Parameters,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = Tensor::matrix(in_dim, out_dim, init_values(in_dim, out_dim, init, rng))?;
        let weight = params.insert(format!("{name}.weight"), w)?;
        let bias = params.insert(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]))?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let h = tape.matmul(x, bound.var(self.weight));
        tape.add_row(h, bound.var(self.bias))
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width from input to output. The final layer uses
    /// `last_init`; the rest use Xavier.
    pub fn new(
        params: &mut Parameters,
        name: &str,
        dims: &[usize],
        last_init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n { last_init } else { Init::Xavier };
                Linear::new(params, &format!("{name}.{i}"), dims[i], dims[i + 1], init, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        params: &mut Parameters,
        name: &str,
        count: usize,
        dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let values = (0..count * dim).map(|_| crate::rng::normal(rng) * 0.5).collect();
        let table = params.insert(format!("{name}.table"), Tensor::matrix(count, dim, values)?)?;
        Ok(Self { table, count, dim })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, indices: &[usize]) -> Result<Var> {
        tape.gather_rows(bound.var(self.table), indices)
    }
}

/// Scaled dot-product attention with `heads` parallel heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        params: &mut Parameters,
        name: &str,
        query_dim: usize,
        kv_dim: usize,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::error::Error::Config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(params, &format!("{name}.q"), query_dim, dim, Init::Xavier, rng)?,
            key: Linear::new(params, &format!("{name}.k"), kv_dim, dim, Init::Xavier, rng)?,
            value: Linear::new(params, &format!("{name}.v"), kv_dim, dim, Init::Xavier, rng)?,
            output: Linear::new(params, &format!("{name}.o"), dim, dim, Init::Xavier, rng)?,
            heads,
            dim,
        })
    }

    /// `queries` is n×query_dim, `context` is m×kv_dim; returns n×dim.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, queries: Var, context: Var) -> Var {
        let q = self.query.forward(tape, bound, queries);
        let k = self.key.forward(tape, bound, context);
        let v = self.value.forward(tape, bound, context);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(k, h * head_dim, head_dim);
            let vh = tape.slice_cols(v, h * head_dim, head_dim);
            let scores = tape.matmul_bt(qh, kh);
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores);
            outs.push(tape.matmul(weights, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        self.output.forward(tape, bound, joined)
    }
}
