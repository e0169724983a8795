//! Input-times-gradient token attribution with L2 aggregation over the
//! embedding dimensions.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::baselines::BiLstmAtt;
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::features::WordVocab;
use crate::hiernet::{ChunkEncoder, HierModel, TruncatedModel};
use crate::nn::{sigmoid, Graph, Matrix, ParamSet, Var};

/// A model whose prediction is differentiable with respect to its input
/// embedding matrix.
pub trait Attributable {
    fn params(&self) -> &ParamSet;

    /// The token ids that receive attributions (after any truncation or
    /// padding removal) and their input embeddings, one row per id.
    fn input_embeddings(&self, tokens: &[usize]) -> Result<(Vec<usize>, Matrix)>;

    /// Poster-class logit computed from the embedding variable `x`.
    fn logit_from_embeddings(&self, g: &mut Graph, x: Var, ids: &[usize]) -> Result<Var>;
}

impl Attributable for BiLstmAtt {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn input_embeddings(&self, tokens: &[usize]) -> Result<(Vec<usize>, Matrix)> {
        Ok((self.prepare(tokens)?, self.embed(tokens)?))
    }

    fn logit_from_embeddings(&self, g: &mut Graph, x: Var, _ids: &[usize]) -> Result<Var> {
        Ok(self.trace_from_embeddings(g, x, None).logit)
    }
}

fn token_rows(params: &ParamSet, encoder: &dyn ChunkEncoder, ids: &[usize]) -> Matrix {
    let mut g = Graph::new(params);
    let x = encoder.embed_tokens(&mut g, ids);
    g.value(x).clone()
}

/// `[CLS]` state of one chunk whose content embeddings are rows
/// `start..start+len` of `x`.
fn chunk_cls(g: &mut Graph, encoder: &dyn ChunkEncoder, x: Var, start: usize, len: usize) -> Result<Var> {
    let cls = encoder.embed_tokens(g, &[WordVocab::CLS]);
    let sep = encoder.embed_tokens(g, &[WordVocab::SEP]);
    let content = g.slice_rows(x, start, len);
    let input = g.concat_rows(&[cls, content, sep]);
    let h = encoder.encode_embeddings(g, input, None)?;
    Ok(g.slice_rows(h, 0, 1))
}

impl Attributable for HierModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn input_embeddings(&self, tokens: &[usize]) -> Result<(Vec<usize>, Matrix)> {
        let ids = self.chunk(tokens)?.content_tokens();
        let x = token_rows(&self.params, &self.encoder, &ids);
        Ok((ids, x))
    }

    fn logit_from_embeddings(&self, g: &mut Graph, x: Var, ids: &[usize]) -> Result<Var> {
        let cs = self.chunk(ids)?;
        let mut start = 0;
        let mut rows = Vec::with_capacity(cs.n_chunks);
        for i in 0..cs.n_chunks {
            let len = cs.content(i).len();
            rows.push(chunk_cls(g, &self.encoder, x, start, len)?);
            start += len;
        }
        let stacked = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) };
        self.logit_from_cls(g, stacked)
    }
}

impl Attributable for TruncatedModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn input_embeddings(&self, tokens: &[usize]) -> Result<(Vec<usize>, Matrix)> {
        let ids = self.input_ids(tokens)?;
        let content = ids[1..ids.len() - 1].to_vec();
        let x = token_rows(&self.params, &self.encoder, &content);
        Ok((content, x))
    }

    fn logit_from_embeddings(&self, g: &mut Graph, x: Var, ids: &[usize]) -> Result<Var> {
        let cls = chunk_cls(g, &self.encoder, x, 0, ids.len())?;
        Ok(self.head.forward(g, cls))
    }
}

/// Scores `Σ w_i x_i` with one scalar embedding per token id. Used as an
/// analytic reference for the attribution code.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearScorer {
    pub position_weights: Vec<f64>,
    pub embeddings: Vec<f64>,
    params: ParamSet,
}

impl LinearScorer {
    pub fn new(position_weights: Vec<f64>, embeddings: Vec<f64>) -> Self {
        LinearScorer {
            position_weights,
            embeddings,
            params: ParamSet::new(),
        }
    }
}

impl Attributable for LinearScorer {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn input_embeddings(&self, tokens: &[usize]) -> Result<(Vec<usize>, Matrix)> {
        if tokens.len() != self.position_weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.position_weights.len(),
                actual: tokens.len(),
            });
        }
        let x = tokens
            .iter()
            .map(|&t| {
                self.embeddings
                    .get(t)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("token id {t} has no embedding")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((tokens.to_vec(), Matrix::from_vec(tokens.len(), 1, x)))
    }

    fn logit_from_embeddings(&self, g: &mut Graph, x: Var, _ids: &[usize]) -> Result<Var> {
        let n = self.position_weights.len();
        let w = g.constant(Matrix::from_vec(n, 1, self.position_weights.clone()));
        let wx = g.mul(x, w);
        Ok(g.sum(wx))
    }
}

/// Which scalar the gradient is taken of.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributionTarget {
    /// Logit of the predicted class: z for posters, -z otherwise.
    #[default]
    PredictedClass,
    /// The poster-class logit z regardless of the prediction.
    PositiveClass,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawAttribution {
    pub ids: Vec<usize>,
    /// x[i,d] · ∂score/∂x[i,d].
    pub values: Matrix,
    pub logit: f64,
    pub predicted: Label,
}

/// Gradient of the target score with respect to the input embeddings, along
/// with the embeddings and the poster-class logit.
pub fn input_gradient<M: Attributable + ?Sized>(
    model: &M,
    tokens: &[usize],
    target: AttributionTarget,
) -> Result<(Vec<usize>, Matrix, Matrix, f64)> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    let (ids, emb) = model.input_embeddings(tokens)?;
    let mut g = Graph::new(model.params());
    let x = g.variable(emb.clone());
    let z = model.logit_from_embeddings(&mut g, x, &ids)?;
    let logit = g.scalar(z);
    let score = match (target, Label::from_probability(sigmoid(logit))) {
        (AttributionTarget::PredictedClass, Label::ActiveCitizen) => g.scale(z, -1.0),
        _ => z,
    };
    let grads = g.backward(score);
    let grad = grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(emb.rows, emb.cols));
    Ok((ids, emb, grad, logit))
}

pub fn input_x_grad<M: Attributable + ?Sized>(
    model: &M,
    tokens: &[usize],
    target: AttributionTarget,
) -> Result<RawAttribution> {
    let (ids, x, grad, logit) = input_gradient(model, tokens, target)?;
    let values = Matrix::from_vec(
        x.rows,
        x.cols,
        x.data.iter().zip(&grad.data).map(|(a, b)| a * b).collect(),
    );
    Ok(RawAttribution {
        ids,
        values,
        logit,
        predicted: Label::from_probability(sigmoid(logit)),
    })
}

/// Per-position L2 norm over the embedding dimensions.
pub fn l2_aggregate(raw: &Matrix) -> Vec<f64> {
    (0..raw.rows)
        .map(|r| raw.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeRule {
    #[default]
    Sum,
    Max,
    Mean,
}

pub const CONTINUATION_PREFIX: &str = "##";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergedTokens {
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    /// Indices (into `tokens`) of continuation pieces with nothing to attach to.
    pub malformed: Vec<usize>,
}

/// Joins `##`-prefixed continuation pieces onto the preceding token.
/// Word-level input passes through unchanged.
pub fn merge_subwords(tokens: &[String], scores: &[f64], rule: MergeRule) -> Result<MergedTokens> {
    if tokens.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            expected: tokens.len(),
            actual: scores.len(),
        });
    }
    let mut out = MergedTokens {
        tokens: Vec::new(),
        scores: Vec::new(),
        malformed: Vec::new(),
    };
    let mut groups: Vec<Vec<f64>> = Vec::new();
    for (t, &s) in tokens.iter().zip(scores) {
        match t.strip_prefix(CONTINUATION_PREFIX) {
            Some(rest) if !out.tokens.is_empty() && !rest.is_empty() => {
                out.tokens.last_mut().expect("non-empty").push_str(rest);
                groups.last_mut().expect("non-empty").push(s);
            }
            Some(_) if out.tokens.is_empty() => {
                out.malformed.push(0);
                out.tokens.push(t.clone());
                groups.push(vec![s]);
            }
            _ => {
                out.tokens.push(t.clone());
                groups.push(vec![s]);
            }
        }
    }
    out.scores = groups
        .iter()
        .map(|g| match rule {
            MergeRule::Sum => g.iter().sum(),
            MergeRule::Max => g.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            MergeRule::Mean => g.iter().sum::<f64>() / g.len() as f64,
        })
        .collect();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub user_id: String,
    pub predicted_class: Label,
    pub model_ref: String,
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub malformed: Vec<usize>,
}

/// The `k` highest-scoring tokens; ties keep the earlier position first.
pub fn rank_tokens(attr: &Attribution, k: usize) -> Vec<(String, f64)> {
    let mut order: Vec<usize> = (0..attr.tokens.len()).collect();
    order.sort_by(|&a, &b| attr.scores[b].total_cmp(&attr.scores[a]));
    order
        .into_iter()
        .take(k)
        .map(|i| (attr.tokens[i].clone(), attr.scores[i]))
        .collect()
}

/// Full attribution for one user: InputXGrad on the predicted class, L2
/// aggregation, then subword merging over the vocabulary's surface forms.
pub fn explain_user<M: Attributable + ?Sized>(
    model: &M,
    user_id: &str,
    tokens: &[usize],
    vocab: &WordVocab,
    rule: MergeRule,
    model_ref: &str,
) -> Result<Attribution> {
    let raw = input_x_grad(model, tokens, AttributionTarget::PredictedClass)?;
    let scores = l2_aggregate(&raw.values);
    let surface: Vec<String> = raw.ids.iter().map(|&id| vocab.token(id).to_string()).collect();
    let merged = merge_subwords(&surface, &scores, rule)?;
    Ok(Attribution {
        user_id: user_id.to_string(),
        predicted_class: raw.predicted,
        model_ref: model_ref.to_string(),
        tokens: merged.tokens,
        scores: merged.scores,
        malformed: merged.malformed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub class: Label,
    pub token: String,
    pub mean_score: f64,
    pub support: usize,
}

/// Pools each user's top-`k` tokens by predicted class. Every occurrence
/// counts once toward the mean, so frequent tokens weigh more.
pub fn summarize_importance(attrs: &[Attribution], k: usize) -> Vec<ImportanceRow> {
    let mut acc: BTreeMap<(Label, String), (f64, usize)> = BTreeMap::new();
    for a in attrs {
        for (tok, score) in rank_tokens(a, k) {
            let e = acc.entry((a.predicted_class, tok)).or_insert((0.0, 0));
            e.0 += score;
            e.1 += 1;
        }
    }
    let mut rows: Vec<ImportanceRow> = acc
        .into_iter()
        .map(|((class, token), (sum, n))| ImportanceRow {
            class,
            token,
            mean_score: sum / n as f64,
            support: n,
        })
        .collect();
    rows.sort_by(|a, b| {
        let ci = |l: Label| Label::ALL.iter().position(|&x| x == l);
        ci(a.class)
            .cmp(&ci(b.class))
            .then(b.mean_score.total_cmp(&a.mean_score))
            .then_with(|| a.token.cmp(&b.token))
    });
    rows
}

pub fn write_importance_csv<W: Write>(rows: &[ImportanceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class", "token", "mean_score", "support"])?;
    for r in rows {
        w.write_record([
            r.class.as_str(),
            &r.token,
            &r.mean_score.to_string(),
            &r.support.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("importance.csv", e))?;
    Ok(())
}

/// One JSON object per line.
pub fn write_attributions_jsonl<W: Write>(attrs: &[Attribution], mut out: W) -> Result<()> {
    for a in attrs {
        serde_json::to_writer(&mut out, a)?;
        out.write_all(b"\n").map_err(|e| Error::io("attributions.jsonl", e))?;
    }
    Ok(())
}
