//! Parameterized building blocks. Each layer holds [`ParamId`]s into a shared
//! [`ParamSet`] and emits graph nodes in `forward`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{normal, uniform, xavier, Graph, Matrix, ParamId, ParamSet, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let w = ps.add(format!("{name}.weight"), xavier(input, output, rng));
        let b = ps.add(format!("{name}.bias"), Matrix::zeros(1, output));
        Linear { w, b, input, output }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EmbeddingInit {
    Uniform(f64),
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        vocab: usize,
        dim: usize,
        init: EmbeddingInit,
        rng: &mut impl Rng,
    ) -> Self {
        let m = match init {
            EmbeddingInit::Uniform(b) => uniform(vocab, dim, b, rng),
            EmbeddingInit::Normal(s) => normal(vocab, dim, s, rng),
        };
        let table = ps.add(format!("{name}.table"), m);
        Embedding { table, vocab, dim }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let t = g.param(self.table);
        g.gather(t, ids)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-12;

    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gain = ps.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0));
        let bias = ps.add(format!("{name}.bias"), Matrix::zeros(1, dim));
        LayerNorm { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, Self::EPS)
    }
}

/// Single-layer LSTM, gate order input, forget, cell, output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(ps: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w_ih = ps.add(format!("{name}.w_ih"), xavier(input, 4 * hidden, rng));
        let w_hh = ps.add(format!("{name}.w_hh"), xavier(hidden, 4 * hidden, rng));
        let mut bias = Matrix::zeros(1, 4 * hidden);
        bias.data[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        let b = ps.add(format!("{name}.bias"), bias);
        Lstm {
            w_ih,
            w_hh,
            b,
            input,
            hidden,
        }
    }

    /// Runs over the rows of `x` (T×input) and returns the T×hidden outputs in
    /// input order. With `reverse` the recurrence runs from the last row.
    pub fn forward(&self, g: &mut Graph, x: Var, reverse: bool) -> Var {
        let steps = g.value(x).rows;
        let h = self.hidden;
        let w_ih = g.param(self.w_ih);
        let w_hh = g.param(self.w_hh);
        let b = g.param(self.b);
        let xw = g.matmul(x, w_ih);
        let xw = g.add_row(xw, b);
        let mut hidden = g.constant(Matrix::zeros(1, h));
        let mut cell = g.constant(Matrix::zeros(1, h));
        let mut outputs = vec![hidden; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let xt = g.slice_rows(xw, t, 1);
            let hw = g.matmul(hidden, w_hh);
            let gates = g.add(xt, hw);
            let i_pre = g.slice_cols(gates, 0, h);
            let f_pre = g.slice_cols(gates, h, h);
            let c_pre = g.slice_cols(gates, 2 * h, h);
            let o_pre = g.slice_cols(gates, 3 * h, h);
            let i = g.sigmoid(i_pre);
            let f = g.sigmoid(f_pre);
            let c_hat = g.tanh(c_pre);
            let o = g.sigmoid(o_pre);
            let keep = g.mul(f, cell);
            let write = g.mul(i, c_hat);
            cell = g.add(keep, write);
            let c_act = g.tanh(cell);
            hidden = g.mul(o, c_act);
            outputs[t] = hidden;
        }
        g.concat_rows(&outputs)
    }
}

/// Additive self-attention pooling: score_t = v · tanh(W h_t + b), softmax
/// over positions, weighted sum of the rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditiveAttention {
    pub proj: Linear,
    pub v: ParamId,
}

impl AdditiveAttention {
    pub fn new(ps: &mut ParamSet, name: &str, input: usize, attn_dim: usize, rng: &mut impl Rng) -> Self {
        let proj = Linear::new(ps, &format!("{name}.proj"), input, attn_dim, rng);
        let v = ps.add(format!("{name}.v"), xavier(attn_dim, 1, rng));
        AdditiveAttention { proj, v }
    }

    /// Returns the pooled 1×input row and the 1×T attention weights.
    pub fn forward(&self, g: &mut Graph, h: Var) -> (Var, Var) {
        let p = self.proj.forward(g, h);
        let p = g.tanh(p);
        let v = g.param(self.v);
        let scores = g.matmul(p, v);
        let scores = g.transpose(scores);
        let weights = g.softmax_rows(scores, None);
        let pooled = g.matmul(weights, h);
        (pooled, weights)
    }
}

/// Inverted dropout. Without an RNG (evaluation) or with `p == 0` this is the identity.
pub fn dropout(g: &mut Graph, x: Var, p: f64, rng: Option<&mut rand_chacha::ChaCha8Rng>) -> Var {
    let Some(rng) = rng else { return x };
    if p <= 0.0 {
        return x;
    }
    let (rows, cols) = g.value(x).shape();
    let keep = 1.0 / (1.0 - p);
    let mask = Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| if rng.gen_bool(p) { 0.0 } else { keep })
            .collect(),
    );
    let m = g.constant(mask);
    g.mul(x, m)
}
