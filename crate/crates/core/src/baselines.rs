//! Classical baselines: L2-regularized logistic regression over sparse
//! features and a BiLSTM with additive self-attention.

use std::collections::VecDeque;
use std::io::BufRead;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, WordVocab};
use crate::nn::layers::{dropout, AdditiveAttention, Embedding, EmbeddingInit, Linear, Lstm};
use crate::nn::{sigmoid, Graph, Matrix, ParamSet, Var};
use crate::trainer::Trainable;

pub const DEFAULT_ALPHA: f64 = 1e-4;
pub const ALPHA_GRID: [f64; 5] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];
pub const HIDDEN_GRID: [usize; 3] = [50, 100, 150];
pub const DROPOUT_GRID: [f64; 2] = [0.2, 0.5];

/// Solver settings for [`train_logreg_with`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub history: usize,
    pub max_iter: usize,
    /// Stop once the L2 norm of the gradient falls below this.
    pub grad_tol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            history: 10,
            max_iter: 1000,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub reg_strength: f64,
    /// Objective value at every accepted iterate, starting from zero weights.
    pub loss_history: Vec<f64>,
    pub converged: bool,
}

impl LinearModel {
    pub fn decision(&self, row: &[(usize, f64)]) -> f64 {
        self.bias + row.iter().map(|&(c, v)| self.weights[c] * v).sum::<f64>()
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean logistic loss plus (alpha/2)·|w|², with its gradient. The last entry
/// of `theta` is the unregularized bias.
fn objective(x: &FeatureMatrix, y: &[f64], alpha: f64, theta: &[f64], grad: &mut [f64]) -> f64 {
    let p = theta.len() - 1;
    let n = y.len() as f64;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    for (row, &yi) in x.rows.iter().zip(y) {
        let z = theta[p] + row.iter().map(|&(c, v)| theta[c] * v).sum::<f64>();
        loss += softplus(z) - yi * z;
        let r = (sigmoid(z) - yi) / n;
        for &(c, v) in row {
            grad[c] += r * v;
        }
        grad[p] += r;
    }
    let mut reg = 0.0;
    for c in 0..p {
        reg += theta[c] * theta[c];
        grad[c] += alpha * theta[c];
    }
    loss / n + 0.5 * alpha * reg
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn train_logreg(x: &FeatureMatrix, y: &[Label], alpha: f64) -> Result<LinearModel> {
    train_logreg_with(x, y, alpha, &LbfgsConfig::default())
}

/// Fits logistic regression by L-BFGS with Armijo backtracking. The objective
/// never increases between recorded iterates.
pub fn train_logreg_with(x: &FeatureMatrix, y: &[Label], alpha: f64, cfg: &LbfgsConfig) -> Result<LinearModel> {
    if x.n_rows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.n_rows(),
            actual: y.len(),
        });
    }
    if y.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!(
            "alpha must be a finite non-negative number, got {alpha}"
        )));
    }
    for label in Label::ALL {
        if !y.contains(&label) {
            return Err(Error::invalid(format!("training labels contain no {label} users")));
        }
    }
    let targets: Vec<f64> = y.iter().map(|l| l.target()).collect();
    let dim = x.n_cols() + 1;
    let mut theta = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    let mut f = objective(x, &targets, alpha, &theta, &mut grad);
    let mut history = vec![f];
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut trial = vec![0.0; dim];
    let mut trial_grad = vec![0.0; dim];

    for _ in 0..cfg.max_iter {
        let gnorm = dot(&grad, &grad).sqrt();
        if gnorm <= cfg.grad_tol {
            converged = true;
            break;
        }
        // Two-loop recursion.
        let mut d: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut coeffs = Vec::with_capacity(memory.len());
        for (s, yv, rho) in memory.iter().rev() {
            let a = rho * dot(s, &d);
            d.iter_mut().zip(yv).for_each(|(di, yi)| *di -= a * yi);
            coeffs.push(a);
        }
        if let Some((s, yv, _)) = memory.back() {
            let gamma = dot(s, yv) / dot(yv, yv);
            d.iter_mut().for_each(|di| *di *= gamma);
        }
        for ((s, yv, rho), a) in memory.iter().zip(coeffs.into_iter().rev()) {
            let b = rho * dot(yv, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
        }
        let mut slope = dot(&grad, &d);
        if slope >= 0.0 {
            d = grad.iter().map(|g| -g).collect();
            slope = -gnorm * gnorm;
            memory.clear();
        }
        let mut t = if memory.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            trial
                .iter_mut()
                .zip(&theta)
                .zip(&d)
                .for_each(|((ti, th), di)| *ti = th + t * di);
            let ft = objective(x, &targets, alpha, &trial, &mut trial_grad);
            if ft <= f + 1e-4 * t * slope {
                accepted = Some(ft);
                break;
            }
            t *= 0.5;
        }
        let Some(ft) = accepted else { break };
        let s: Vec<f64> = trial.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 {
            if memory.len() == cfg.history {
                memory.pop_front();
            }
            memory.push_back((s, yv, 1.0 / sy));
        }
        std::mem::swap(&mut theta, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        let improvement = f - ft;
        f = ft;
        history.push(f);
        if improvement <= f64::EPSILON * f.abs().max(1.0) {
            // Flat objective at machine precision; further steps cannot help.
            converged = dot(&grad, &grad).sqrt() <= cfg.grad_tol.max(1e-8);
            break;
        }
    }
    let bias = theta.pop().unwrap_or(0.0);
    Ok(LinearModel {
        weights: theta,
        bias,
        reg_strength: alpha,
        loss_history: history,
        converged,
    })
}

/// sigmoid(Xw + b) per row.
pub fn predict_proba(model: &LinearModel, x: &FeatureMatrix) -> Result<Vec<f64>> {
    if x.n_cols() != model.weights.len() {
        return Err(Error::DimensionMismatch {
            expected: model.weights.len(),
            actual: x.n_cols(),
        });
    }
    Ok(x.rows.iter().map(|row| sigmoid(model.decision(row))).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiLstmAttConfig {
    pub embed_dim: usize,
    pub hidden_units: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_tokens: usize,
}

impl BiLstmAttConfig {
    pub fn new(vocab_size: usize) -> Self {
        BiLstmAttConfig {
            embed_dim: 200,
            hidden_units: 150,
            dropout: 0.5,
            vocab_size,
            max_tokens: 10_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_units == 0 || self.embed_dim == 0 {
            return Err(Error::invalid("hidden_units and embed_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.vocab_size <= WordVocab::SEP || self.max_tokens == 0 {
            return Err(Error::invalid(
                "vocab_size must exceed the special ids and max_tokens must be positive",
            ));
        }
        Ok(())
    }
}

/// Embeddings, a bidirectional LSTM, additive attention pooling and a linear
/// output. `[PAD]` positions are dropped before the recurrence, which is the
/// same as masking them out of both the LSTM and the attention softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiLstmAtt {
    pub cfg: BiLstmAttConfig,
    pub params: ParamSet,
    embedding: Embedding,
    forward_lstm: Lstm,
    backward_lstm: Lstm,
    attention: AdditiveAttention,
    output: Linear,
}

/// Intermediate values of one forward pass.
pub struct BiLstmTrace {
    pub logit: Var,
    pub context: Var,
    pub weights: Var,
    pub user_embedding: Var,
}

impl BiLstmAtt {
    pub fn new(cfg: BiLstmAttConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (e, h) = (cfg.embed_dim, cfg.hidden_units);
        let embedding = Embedding::new(
            &mut params,
            "embedding",
            cfg.vocab_size,
            e,
            EmbeddingInit::Uniform(0.05),
            &mut rng,
        );
        let forward_lstm = Lstm::new(&mut params, "lstm_fwd", e, h, &mut rng);
        let backward_lstm = Lstm::new(&mut params, "lstm_bwd", e, h, &mut rng);
        let attention = AdditiveAttention::new(&mut params, "attention", 2 * h, 2 * h, &mut rng);
        let output = Linear::new(&mut params, "output", 2 * h, 1, &mut rng);
        Ok(BiLstmAtt {
            cfg,
            params,
            embedding,
            forward_lstm,
            backward_lstm,
            attention,
            output,
        })
    }

    /// Overwrites embedding rows with vectors from a whitespace-separated text
    /// file (`token v1 v2 ...`). Returns the number of rows replaced.
    pub fn load_pretrained_vectors(&mut self, path: &Path, vocab: &WordVocab) -> Result<usize> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let dim = self.cfg.embed_dim;
        let table = self.params.get_mut(self.embedding.table);
        let mut replaced = 0;
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: n + 1,
                    message: format!("bad vector component: {e}"),
                })?;
            if values.len() != dim {
                // word2vec text files start with a "count dim" header line.
                if n == 0 && values.len() == 1 {
                    continue;
                }
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: values.len(),
                });
            }
            let id = vocab.id(word);
            if id > WordVocab::SEP && id < table.rows {
                table.row_mut(id).copy_from_slice(&values);
                replaced += 1;
            }
        }
        Ok(replaced)
    }

    /// Validates ids, truncates to `max_tokens` and removes padding.
    pub fn prepare(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        let ids: Vec<usize> = tokens
            .iter()
            .take(self.cfg.max_tokens)
            .copied()
            .filter(|&t| t != WordVocab::PAD)
            .collect();
        if ids.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        Ok(ids)
    }

    /// Forward pass from an embedding matrix (T×embed_dim).
    pub fn trace_from_embeddings(&self, g: &mut Graph, x: Var, mut rng: Option<&mut ChaCha8Rng>) -> BiLstmTrace {
        let x = dropout(g, x, self.cfg.dropout, rng.as_deref_mut());
        let fwd = self.forward_lstm.forward(g, x, false);
        let bwd = self.backward_lstm.forward(g, x, true);
        let context = g.concat_cols(&[fwd, bwd]);
        let (pooled, weights) = self.attention.forward(g, context);
        let dropped = dropout(g, pooled, self.cfg.dropout, rng);
        let logit = self.output.forward(g, dropped);
        BiLstmTrace {
            logit,
            context,
            weights,
            user_embedding: pooled,
        }
    }

    pub fn trace(&self, g: &mut Graph, tokens: &[usize], rng: Option<&mut ChaCha8Rng>) -> Result<BiLstmTrace> {
        let ids = self.prepare(tokens)?;
        let x = self.embedding.forward(g, &ids);
        Ok(self.trace_from_embeddings(g, x, rng))
    }

    pub fn embed(&self, tokens: &[usize]) -> Result<Matrix> {
        let ids = self.prepare(tokens)?;
        let table = self.params.get(self.embedding.table);
        let mut out = Matrix::zeros(ids.len(), self.cfg.embed_dim);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(table.row(id));
        }
        Ok(out)
    }

    /// Attention weights over the non-pad positions.
    pub fn attention_weights(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let t = self.trace(&mut g, tokens, None)?;
        Ok(g.value(t.weights).data.clone())
    }

    /// Context embeddings (T×2h) and the attention-weighted user embedding.
    pub fn embeddings(&self, tokens: &[usize]) -> Result<(Matrix, Vec<f64>)> {
        let mut g = Graph::new(&self.params);
        let t = self.trace(&mut g, tokens, None)?;
        Ok((g.value(t.context).clone(), g.value(t.user_embedding).data.clone()))
    }
}

impl Trainable for BiLstmAtt {
    type Input = Vec<usize>;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn logit(&self, g: &mut Graph, input: &Vec<usize>, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        Ok(self.trace(g, input, rng)?.logit)
    }
}

/// Probability of the poster class in evaluation mode.
pub fn bilstm_att_forward(tokens: &[usize], model: &BiLstmAtt) -> Result<f64> {
    let mut g = Graph::new(&model.params);
    let t = model.trace(&mut g, tokens, None)?;
    Ok(sigmoid(g.scalar(t.logit)))
}
