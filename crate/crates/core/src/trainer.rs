//! Training protocol: mini-batch optimization with early stopping on the
//! validation loss, macro-averaged metrics, multi-seed aggregation and the
//! Welch t-test.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::nn::optim::{clip_grad_norm, AdamW, WarmupLinear};
use crate::nn::{sum_grads, Graph, Matrix, ParamSet, Var};

pub const TRANSFORMER_LR_GRID: [f64; 3] = [5e-5, 3e-5, 2e-5];
/// Learning rate for encoders trained from random initialization. The grid
/// above is meant for fine-tuning pretrained weights.
pub const SCRATCH_ENCODER_LR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LrBow,
    LrLexicon,
    BilstmAtt,
    TruncTransformer,
    HierTransformer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::LrBow,
        ModelKind::LrLexicon,
        ModelKind::BilstmAtt,
        ModelKind::TruncTransformer,
        ModelKind::HierTransformer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::LrBow => "lr-bow",
            ModelKind::LrLexicon => "lr-lexicon",
            ModelKind::BilstmAtt => "bilstm-att",
            ModelKind::TruncTransformer => "trunc-transformer",
            ModelKind::HierTransformer => "hier-transformer",
        }
    }

    pub fn is_transformer(self) -> bool {
        matches!(self, ModelKind::TruncTransformer | ModelKind::HierTransformer)
    }

    pub fn is_linear(self) -> bool {
        matches!(self, ModelKind::LrBow | ModelKind::LrLexicon)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub weight_decay: f64,
    /// Fraction of all optimizer steps spent in linear warmup.
    pub warmup_frac: f64,
    pub clip_norm: Option<f64>,
    /// L2 strength for the logistic-regression kinds.
    pub alpha: f64,
}

impl TrainConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        let transformer = kind.is_transformer();
        TrainConfig {
            kind,
            learning_rate: if transformer { 2e-5 } else { 1e-3 },
            batch_size: 16,
            max_epochs: 10,
            patience: 3,
            seeds: vec![1, 2, 3],
            weight_decay: if transformer { 0.01 } else { 0.0 },
            warmup_frac: if transformer { 0.1 } else { 0.0 },
            clip_norm: Some(1.0),
            alpha: crate::baselines::DEFAULT_ALPHA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::invalid(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::invalid("warmup_frac must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// A model trained by gradient descent on binary cross-entropy.
pub trait Trainable: Sync {
    type Input: Sync;

    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Per-parameter mask of tensors excluded from training.
    fn frozen(&self) -> Option<&[bool]> {
        None
    }

    /// Builds the pre-sigmoid logit for one example. A `Some` RNG means
    /// training mode (dropout active).
    fn logit(&self, g: &mut Graph, input: &Self::Input, rng: Option<&mut ChaCha8Rng>) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct Examples<I> {
    pub inputs: Vec<I>,
    pub labels: Vec<Label>,
}

impl<I> Examples<I> {
    pub fn new(inputs: Vec<I>, labels: Vec<Label>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                actual: labels.len(),
            });
        }
        Ok(Examples { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Outcome of feeding one validation loss to an [`EarlyStopper`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation loss. Training stops once `patience`
/// consecutive epochs fail to strictly improve on it (at least one).
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epochs: usize,
    bad: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epochs: 0,
            bad: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        self.epochs += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.epochs;
            self.bad = 0;
            return StopDecision::Improved;
        }
        self.bad += 1;
        if self.bad >= self.patience.max(1) {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    /// 1-based epoch of the best loss so far (0 before any observation).
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochCurve {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub curves: Vec<EpochCurve>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub optimizer_steps: u64,
}

impl TrainOutcome {
    pub fn write_curves_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "valid_loss"])?;
        for c in &self.curves {
            w.write_record([c.epoch.to_string(), c.train_loss.to_string(), c.valid_loss.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("curves.csv", e))?;
        Ok(())
    }
}

fn graph_for<M: Trainable>(model: &M) -> Graph<'_> {
    match model.frozen() {
        Some(mask) => Graph::with_frozen(model.params(), mask),
        None => Graph::new(model.params()),
    }
}

/// Dropout stream for one example: a function of the seed, epoch and example
/// index only, so results do not depend on thread scheduling.
fn example_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Trains `model` in place and leaves it at the epoch with the lowest
/// validation loss. Batches are shuffled per epoch from `seed`; per-example
/// gradients are computed in parallel and summed in batch order.
pub fn train_with_early_stopping<M: Trainable>(
    model: &mut M,
    train: &Examples<M::Input>,
    valid: &Examples<M::Input>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = WarmupLinear::new((batches_per_epoch * cfg.max_epochs) as u64, cfg.warmup_frac);
    let mut opt = AdamW::new(model.params(), cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_params = model.params().clone();
    let mut curves = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let m: &M = model;
            let results: Vec<Result<(f64, Vec<Option<Matrix>>)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = graph_for(m);
                    let mut rng = example_rng(seed, epoch, i);
                    let z = m.logit(&mut g, &train.inputs[i], Some(&mut rng))?;
                    let loss = g.bce_with_logits(z, train.labels[i].target());
                    Ok((g.scalar(loss), g.backward(loss).into_param_grads()))
                })
                .collect();
            let mut batch_loss = 0.0;
            let mut parts = Vec::with_capacity(batch.len());
            for r in results {
                let (l, grads) = r?;
                batch_loss += l;
                parts.push(grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: batch_loss,
                    epoch,
                    batch: b + 1,
                });
            }
            epoch_loss += batch_loss;
            let mut grads = sum_grads(parts);
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| g.scale(inv));
            if let Some(max) = cfg.clip_norm {
                clip_grad_norm(&mut grads, max);
            }
            let factor = schedule.factor(opt.steps() + 1);
            opt.step(model.params_mut(), &grads, factor);
        }
        let valid_loss = mean_loss(model, valid)?;
        if !valid_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                loss: valid_loss,
                epoch,
                batch: 0,
            });
        }
        curves.push(EpochCurve {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            valid_loss,
        });
        match stopper.observe(valid_loss) {
            StopDecision::Improved => best_params = model.params().clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    *model.params_mut() = best_params;
    Ok(TrainOutcome {
        curves,
        best_epoch: stopper.best_epoch(),
        best_valid_loss: stopper.best_loss(),
        optimizer_steps: opt.steps(),
    })
}

/// Evaluation-mode logits, computed in parallel.
pub fn predict_logits<M: Trainable>(model: &M, inputs: &[M::Input]) -> Result<Vec<f64>> {
    inputs
        .par_iter()
        .map(|x| {
            let mut g = Graph::new(model.params());
            let z = model.logit(&mut g, x, None)?;
            Ok(g.scalar(z))
        })
        .collect()
}

pub fn predict_labels<M: Trainable>(model: &M, inputs: &[M::Input]) -> Result<Vec<Label>> {
    Ok(predict_logits(model, inputs)?
        .into_iter()
        .map(|z| Label::from_probability(crate::nn::sigmoid(z)))
        .collect())
}

/// Mean binary cross-entropy in evaluation mode.
pub fn mean_loss<M: Trainable>(model: &M, data: &Examples<M::Input>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let logits = predict_logits(model, &data.inputs)?;
    let total: f64 = logits.iter().zip(&data.labels).map(|(&z, y)| bce(z, y.target())).sum();
    Ok(total / data.len() as f64)
}

fn bce(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Per-class scores in [`Label::ALL`] order.
    pub per_class: Vec<ClassScores>,
    /// `confusion[gold][predicted]`, both indexed in [`Label::ALL`] order.
    pub confusion: [[usize; 2]; 2],
}

fn label_index(l: Label) -> usize {
    Label::ALL.iter().position(|&x| x == l).expect("label in ALL")
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Macro precision, recall and F1: unweighted means over the two classes.
/// Metrics with a zero denominator are 0.
pub fn evaluate_macro(predictions: &[Label], gold: &[Label]) -> Result<MacroScores> {
    if predictions.len() != gold.len() {
        return Err(Error::DimensionMismatch {
            expected: gold.len(),
            actual: predictions.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut confusion = [[0usize; 2]; 2];
    for (&p, &g) in predictions.iter().zip(gold) {
        confusion[label_index(g)][label_index(p)] += 1;
    }
    let per_class: Vec<ClassScores> = (0..2)
        .map(|c| {
            let tp = confusion[c][c];
            let predicted = confusion[0][c] + confusion[1][c];
            let actual = confusion[c][0] + confusion[c][1];
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScores {
                precision,
                recall,
                f1,
                support: actual,
            }
        })
        .collect();
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / 2.0;
    Ok(MacroScores {
        precision: mean(|c| c.precision),
        recall: mean(|c| c.recall),
        f1: mean(|c| c.f1),
        per_class,
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub config_hash: String,
    pub wall_time_secs: f64,
    pub scores: MacroScores,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        // Shifted by the first value so that identical inputs give an exact
        // mean and a zero deviation.
        let shift = values.first().copied().unwrap_or(0.0);
        let mean = shift + values.iter().map(|v| v - shift).sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }

    /// Percent display with one decimal, as in `80.2 ± 0.1`.
    pub fn percent(&self) -> String {
        format!("{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub config_hash: String,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub runs: Vec<SeedReport>,
}

impl EvalReport {
    pub fn f1_scores(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.scores.f1).collect()
    }
}

pub fn aggregate_runs(model: &str, runs: Vec<SeedReport>) -> Result<EvalReport> {
    if runs.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 runs to aggregate, got {}",
            runs.len()
        )));
    }
    let hash = runs[0].config_hash.clone();
    if let Some(bad) = runs.iter().find(|r| r.config_hash != hash) {
        return Err(Error::invalid(format!(
            "runs come from different configs ({} vs {})",
            hash, bad.config_hash
        )));
    }
    let collect = |f: fn(&MacroScores) -> f64| runs.iter().map(|r| f(&r.scores)).collect::<Vec<_>>();
    Ok(EvalReport {
        model: model.to_string(),
        config_hash: hash,
        precision: MeanStd::of(&collect(|s| s.precision)),
        recall: MeanStd::of(&collect(|s| s.recall)),
        f1: MeanStd::of(&collect(|s| s.f1)),
        runs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
    /// Set when either side has fewer than five values, where the test has
    /// little power and p is fragile.
    pub small_sample: bool,
}

/// Two-sided Welch t-test with Welch-Satterthwaite degrees of freedom.
pub fn significance_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("each sample needs at least 2 values"));
    }
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (n, mean, var / n)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let small_sample = a.len() < 5 || b.len() < 5;
    let se2 = va + vb;
    if se2 == 0.0 {
        let (t, p) = if ma == mb {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(ma - mb), 0.0)
        };
        return Ok(TTest {
            t,
            p,
            df: na + nb - 2.0,
            small_sample,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(format!("t distribution: {e}")))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, df, small_sample })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{ActiveCitizen as A, Poster as P};

    fn run(stopper_losses: &[f64], patience: usize) -> (usize, usize) {
        let mut s = EarlyStopper::new(patience);
        let mut seen = 0;
        for &l in stopper_losses {
            seen += 1;
            if s.observe(l) == StopDecision::Stop {
                break;
            }
        }
        (seen, s.best_epoch())
    }

    #[test]
    fn early_stopping_rules() {
        assert_eq!(run(&[0.7, 0.6, 0.65, 0.66], 2), (4, 2));
        assert_eq!(run(&[0.9, 0.8, 0.7, 0.6, 0.5], 3), (5, 5));
        assert_eq!(run(&[0.7, 0.6, 0.65, 0.5], 0), (3, 2));
    }

    #[test]
    fn macro_scores_worked_example() {
        let s = evaluate_macro(&[P, A, A, A], &[P, P, A, A]).unwrap();
        assert!((s.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.per_class[1].f1 - 0.8).abs() < 1e-12);
        assert!((s.f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-9);
        let perfect = evaluate_macro(&[P, A], &[P, A]).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
        let one_class = evaluate_macro(&[P, P, P], &[P, A, A]).unwrap();
        assert_eq!(one_class.per_class[0].recall, 1.0);
        assert_eq!(one_class.per_class[1].f1, 0.0);
        assert!(evaluate_macro(&[], &[]).is_err());
    }

    #[test]
    fn aggregation() {
        let report = |seed, f1: f64| SeedReport {
            seed,
            config_hash: "h".into(),
            wall_time_secs: 0.0,
            scores: MacroScores {
                precision: f1,
                recall: f1,
                f1,
                per_class: vec![],
                confusion: [[0; 2]; 2],
            },
            best_epoch: None,
        };
        let r = aggregate_runs("m", vec![report(1, 0.7), report(2, 0.9)]).unwrap();
        assert!((r.f1.mean - 0.8).abs() < 1e-12);
        assert!((r.f1.std - 0.1).abs() < 1e-12);
        let r = aggregate_runs("m", vec![report(1, 0.8), report(2, 0.8), report(3, 0.8)]).unwrap();
        assert_eq!(r.f1.std, 0.0);
        assert!(aggregate_runs("m", vec![report(1, 0.8)]).is_err());
        let mut other = report(2, 0.8);
        other.config_hash = "g".into();
        assert!(aggregate_runs("m", vec![report(1, 0.8), other]).is_err());
    }

    #[test]
    fn welch_matches_reference_values() {
        // Reference values from an independent statistics package.
        let r = significance_test(&[0.70, 0.71, 0.72], &[0.90, 0.91, 0.92]).unwrap();
        assert!((r.t + 24.494897427831766).abs() < 1e-9);
        assert!((r.df - 4.0).abs() < 1e-9);
        assert!((r.p - 1.6483088987181296e-05).abs() < 1e-12);
        let r = significance_test(&[0.81, 0.80, 0.83], &[0.79, 0.84, 0.78]).unwrap();
        assert!((r.t - 0.48666426339228874).abs() < 1e-9);
        assert!((r.df - 2.8594059405940557).abs() < 1e-9);
        assert!((r.p - 0.6613456123442758).abs() < 1e-9);
        assert!(r.small_sample);
    }

    #[test]
    fn welch_degenerate_cases() {
        let r = significance_test(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let x = [0.1, 0.4, 0.3];
        let r = significance_test(&x, &x).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let r = significance_test(&[0.5, 0.5], &[0.6, 0.6]).unwrap();
        assert_eq!(r.p, 0.0);
        assert!(significance_test(&[0.5], &[0.6, 0.7]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::for_kind(ModelKind::HierTransformer);
        assert!(TRANSFORMER_LR_GRID.contains(&c.learning_rate));
        assert_eq!(c.batch_size, 16);
        c.validate().unwrap();
        c.patience = c.max_epochs;
        assert!(c.validate().is_err());
        c.patience = 1;
        c.seeds.clear();
        assert!(c.validate().is_err());
        assert_eq!("bilstm-att".parse::<ModelKind>().unwrap(), ModelKind::BilstmAtt);
    }
}
