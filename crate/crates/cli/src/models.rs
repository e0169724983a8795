//! Model stages: train, evaluate and explain.

use std::path::{Path, PathBuf};
use std::time::Instant;

use civic_lens::baselines::{predict_proba, train_logreg, BiLstmAtt, BiLstmAttConfig};
use civic_lens::checkpoint::{AnyModel, Checkpoint, TrainingMeta};
use civic_lens::explain::{explain_user, summarize_importance, write_importance_csv};
use civic_lens::features::{lexicon_vectorize, tfidf_vectorize, FeatureMatrix};
use civic_lens::hiernet::{
    train_hierarchical, train_truncated, ChunkEncoderConfig, ChunkingConfig, HierConfig, HierInput,
};
use civic_lens::trainer::{
    aggregate_runs, evaluate_macro, predict_labels, train_with_early_stopping, EvalReport, Examples, MeanStd,
    ModelKind, SeedReport, TrainConfig, TrainOutcome, SCRATCH_ENCODER_LR,
};
use civic_lens::Label;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{hash_of, EncoderSize};
use crate::error::{CliError, Result};
use crate::pipeline::{lexicon_fingerprint, Ctx, Features, Histories, StageOutcome, Status, Subset, FEATURIZE};
use crate::store::{self, Manifest};

pub const TRAIN: &str = "train";
pub const EVALUATE: &str = "evaluate";
pub const EXPLAIN: &str = "explain";

/// Per-seed training record stored next to the checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub seed: u64,
    pub wall_time_secs: f64,
    pub best_epoch: Option<usize>,
    pub best_valid_loss: Option<f64>,
    pub optimizer_steps: Option<u64>,
    pub encoder_stage: Option<TrainOutcome>,
}

impl Ctx {
    /// The trainer settings after per-kind defaults are filled in.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.cfg.trainer;
        let kind = self.cfg.model.kind;
        let base = TrainConfig::for_kind(kind);
        TrainConfig {
            // Both transformer kinds train their encoder from random weights,
            // where the fine-tuning rates are far too small.
            learning_rate: t.learning_rate.unwrap_or(if kind.is_transformer() {
                SCRATCH_ENCODER_LR
            } else {
                base.learning_rate
            }),
            batch_size: t.batch_size.unwrap_or(match self.cfg.model.encoder {
                EncoderSize::Long if kind.is_transformer() => 4,
                _ => 16,
            }),
            max_epochs: t.max_epochs,
            patience: t.patience,
            seeds: self.seeds(),
            weight_decay: t.weight_decay.unwrap_or(base.weight_decay),
            warmup_frac: t.warmup_frac.unwrap_or(base.warmup_frac),
            clip_norm: t.clip_norm,
            alpha: t.alpha,
            ..base
        }
    }

    pub fn train_hash(&self, featurize: &str) -> Result<String> {
        let kind = self.cfg.model.kind;
        let trainer = if kind.is_linear() {
            json!({ "alpha": self.cfg.trainer.alpha })
        } else {
            let mut tc = self.train_config();
            tc.seeds.clear();
            serde_json::to_value(tc)?
        };
        let pretrained = match (&self.cfg.paths.pretrained_vectors, kind) {
            (Some(p), ModelKind::BilstmAtt) => Some(store::sha256_file(p)?),
            _ => None,
        };
        Ok(hash_of(&json!({
            "stage": TRAIN,
            "featurize": featurize,
            "model": self.cfg.model.effective(),
            "trainer": trainer,
            "pretrained_vectors": pretrained,
        })))
    }

    pub fn model_dir(&self, train_hash: &str) -> PathBuf {
        self.ws.dir(train_hash)
    }

    fn encoder_config(&self, vocab_size: usize) -> ChunkEncoderConfig {
        match self.cfg.model.encoder {
            EncoderSize::Tiny => ChunkEncoderConfig::tiny_reference(vocab_size),
            EncoderSize::Long => ChunkEncoderConfig::long_window(vocab_size),
        }
    }

    fn hier_config(&self, vocab_size: usize) -> HierConfig {
        let m = &self.cfg.model;
        let mut cfg = HierConfig::tiny(vocab_size, m.fusion);
        if m.encoder == EncoderSize::Long {
            let encoder = self.encoder_config(vocab_size);
            cfg.chunking = ChunkingConfig::new(encoder.max_positions - 2);
            cfg.fusion_hidden = encoder.embed_dim;
            cfg.head_hidden = encoder.embed_dim / 2;
            cfg.encoder = encoder;
        }
        cfg.mode = m.mode;
        cfg.encoder_stage = m.encoder_stage;
        cfg
    }
}

/// Fingerprint of whatever the model kind reads its input through.
fn vocab_hash(kind: ModelKind, f: &Features) -> String {
    match kind {
        ModelKind::LrBow => f.vocab.fingerprint(),
        ModelKind::LrLexicon => lexicon_fingerprint(&f.lexicon),
        _ => f.word_vocab.fingerprint(),
    }
}

fn linear_features(kind: ModelKind, f: &Features, s: &Subset) -> FeatureMatrix {
    match kind {
        ModelKind::LrLexicon => lexicon_vectorize(&s.histories, &f.lexicon),
        _ => tfidf_vectorize(&s.histories, &f.vocab),
    }
}

fn token_ids(f: &Features, s: &Subset) -> Result<Examples<Vec<usize>>> {
    let inputs = s.histories.iter().map(|h| f.word_vocab.encode(&h.tokens)).collect();
    Ok(Examples::new(inputs, s.labels.clone())?)
}

fn log_loss(probs: &[f64], labels: &[Label]) -> f64 {
    let eps = 1e-12;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, y)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(y.target() * p.ln() + (1.0 - y.target()) * (1.0 - p).ln())
        })
        .sum();
    total / probs.len() as f64
}

struct Trained {
    model: AnyModel,
    meta: TrainingMeta,
    record: TrainingRecord,
    curves: Option<TrainOutcome>,
    linear_objective: Vec<f64>,
}

fn train_one(ctx: &Ctx, f: &Features, h: &Histories, seed: u64, hash: &str) -> Result<Trained> {
    let kind = ctx.cfg.model.kind;
    let tc = ctx.train_config();
    let start = Instant::now();
    let mut meta = TrainingMeta {
        seed,
        config_hash: hash.to_string(),
        optimizer: "adamw".into(),
        learning_rate: tc.learning_rate,
        weight_decay: tc.weight_decay,
        ..Default::default()
    };
    let mut encoder_stage = None;
    let (model, outcome, linear_objective) = match kind {
        ModelKind::LrBow | ModelKind::LrLexicon => {
            let x = linear_features(kind, f, &h.train);
            let m = train_logreg(&x, &h.train.labels, tc.alpha)?;
            let valid = predict_proba(&m, &linear_features(kind, f, &h.valid))?;
            meta.optimizer = "l-bfgs".into();
            meta.learning_rate = 0.0;
            meta.weight_decay = tc.alpha;
            meta.best_valid_loss = Some(log_loss(&valid, &h.valid.labels));
            let objective = m.loss_history.clone();
            (AnyModel::Linear(m), None, objective)
        }
        ModelKind::BilstmAtt => {
            let mc = &ctx.cfg.model;
            let mut cfg = BiLstmAttConfig::new(f.word_vocab.len());
            cfg.embed_dim = mc.embed_dim;
            cfg.hidden_units = mc.hidden_units;
            cfg.dropout = mc.dropout;
            cfg.max_tokens = mc.max_tokens;
            let mut m = BiLstmAtt::new(cfg, seed)?;
            if let Some(p) = &ctx.cfg.paths.pretrained_vectors {
                let n = m.load_pretrained_vectors(p, &f.word_vocab)?;
                eprintln!("train: initialized {n} embeddings from {}", p.display());
            }
            let out = train_with_early_stopping(&mut m, &token_ids(f, &h.train)?, &token_ids(f, &h.valid)?, &tc, seed)?;
            (AnyModel::BilstmAtt(m), Some(out), Vec::new())
        }
        ModelKind::TruncTransformer => {
            let enc = ctx.encoder_config(f.word_vocab.len());
            let head_hidden = enc.embed_dim / 2;
            let (m, out) = train_truncated(
                &enc,
                head_hidden,
                &token_ids(f, &h.train)?,
                &token_ids(f, &h.valid)?,
                &tc,
                seed,
            )?;
            (AnyModel::Truncated(m), Some(out), Vec::new())
        }
        ModelKind::HierTransformer => {
            let cfg = ctx.hier_config(f.word_vocab.len());
            let (m, report) = train_hierarchical(&cfg, &token_ids(f, &h.train)?, &token_ids(f, &h.valid)?, &tc, seed)?;
            encoder_stage = report.encoder_stage;
            (AnyModel::Hier(m), Some(report.fusion_stage), Vec::new())
        }
    };
    if let Some(o) = &outcome {
        meta.best_epoch = Some(o.best_epoch);
        meta.best_valid_loss = Some(o.best_valid_loss);
    }
    let record = TrainingRecord {
        seed,
        wall_time_secs: start.elapsed().as_secs_f64(),
        best_epoch: meta.best_epoch,
        best_valid_loss: meta.best_valid_loss,
        optimizer_steps: outcome.as_ref().map(|o| o.optimizer_steps),
        encoder_stage,
    };
    Ok(Trained {
        model,
        meta,
        record,
        curves: outcome,
        linear_objective,
    })
}

fn seed_dir(model_dir: &Path, seed: u64) -> PathBuf {
    model_dir.join(seed.to_string())
}

const SEED_OUTPUTS: [&str; 3] = ["checkpoint.json", "curves.csv", "training.json"];

fn seed_is_current(dir: &Path, hash: &str) -> bool {
    SEED_OUTPUTS.iter().all(|o| dir.join(o).exists())
        && matches!(store::read_json::<TrainingRecord>(&dir.join("training.json")), Ok((h, _)) if h == hash)
}

pub fn run_train(ctx: &mut Ctx) -> Result<StageOutcome> {
    let f = ctx.ensure_features()?;
    let hash = ctx.train_hash(&f.hash)?;
    let dir = ctx.model_dir(&hash);
    let seeds = ctx.seeds();
    let kind = ctx.cfg.model.kind;
    let mut trained_any = false;
    let mut histories = None;
    for &seed in &seeds {
        let sd = seed_dir(&dir, seed);
        if !ctx.force && seed_is_current(&sd, &hash) {
            eprintln!("train: seed {seed} up to date");
            continue;
        }
        let h = match &histories {
            Some(h) => h,
            None => histories.insert(ctx.load_histories()?),
        };
        eprintln!("train: {} seed {seed}", ctx.cfg.model.display_name());
        let t = train_one(ctx, &f, h, seed, &hash)?;
        std::fs::create_dir_all(&sd).map_err(|e| CliError::io(&sd, e))?;
        Checkpoint::new(kind, vocab_hash(kind, &f), t.meta, t.model).save(&sd.join("checkpoint.json"))?;
        match &t.curves {
            Some(o) => store::write_csv(&sd.join("curves.csv"), &hash, |b| o.write_curves_csv(b))?,
            None => store::write_csv(&sd.join("curves.csv"), &hash, |b| {
                b.extend_from_slice(b"iteration,objective\n");
                for (i, v) in t.linear_objective.iter().enumerate() {
                    b.extend_from_slice(format!("{},{v}\n", i + 1).as_bytes());
                }
                Ok(())
            })?,
        }
        if let Some(enc) = &t.record.encoder_stage {
            store::write_csv(&sd.join("curves_encoder.csv"), &hash, |b| enc.write_curves_csv(b))?;
        }
        store::write_json(&sd.join("training.json"), &hash, &t.record)?;
        eprintln!(
            "train: seed {seed} done in {:.1}s, best epoch {:?}, valid loss {:.4}",
            t.record.wall_time_secs,
            t.record.best_epoch,
            t.record.best_valid_loss.unwrap_or(f64::NAN)
        );
        trained_any = true;
    }

    // The manifest lists every seed trained under this hash so far.
    let mut all_seeds: Vec<u64> = match Manifest::read(&dir, TRAIN)? {
        Some(m) if m.config_hash == hash => serde_json::from_value(m.details["seeds"].clone()).unwrap_or_default(),
        _ => Vec::new(),
    };
    all_seeds.extend(&seeds);
    all_seeds.sort_unstable();
    all_seeds.dedup();
    let mut m = Manifest::new(TRAIN, &hash);
    m.upstream.insert(FEATURIZE.into(), f.hash.clone());
    if let Some(p) = &ctx.cfg.paths.pretrained_vectors {
        if kind == ModelKind::BilstmAtt {
            m.inputs.insert(p.display().to_string(), store::sha256_file(p)?);
        }
    }
    m.outputs = all_seeds
        .iter()
        .flat_map(|s| SEED_OUTPUTS.iter().map(move |o| format!("{s}/{o}")))
        .collect();
    m.details = json!({
        "model": ctx.cfg.model.display_name(),
        "kind": kind,
        "seeds": all_seeds,
        "model_config": ctx.cfg.model.effective(),
        "train_config": ctx.train_config(),
    });
    m.write(&dir)?;
    let status = if trained_any { Status::Built } else { Status::UpToDate };
    Ok(StageOutcome {
        stage: TRAIN.into(),
        status,
        config_hash: hash,
        dir,
    })
}

/// Locates the trained model for the current config, without training.
fn trained_model(ctx: &mut Ctx) -> Result<(Features, String, PathBuf)> {
    let f = ctx.ensure_features()?;
    let hash = ctx.train_hash(&f.hash)?;
    let dir = ctx.model_dir(&hash);
    if Manifest::read(&dir, TRAIN)?.is_none() {
        return Err(CliError::missing(
            TRAIN,
            format!(
                "no {} model for this config; run `civic-lens train` first",
                ctx.cfg.model.display_name()
            ),
        ));
    }
    Ok((f, hash, dir))
}

fn load_checkpoint(dir: &Path, seed: u64, hash: &str, expected_vocab: &str) -> Result<Checkpoint> {
    let sd = seed_dir(dir, seed);
    if !seed_is_current(&sd, hash) {
        return Err(CliError::missing(
            TRAIN,
            format!("seed {seed} has not been trained for this config; run `civic-lens train --seed {seed}`"),
        ));
    }
    Ok(Checkpoint::load(&sd.join("checkpoint.json"), expected_vocab)?)
}

fn predict(model: &AnyModel, kind: ModelKind, f: &Features, s: &Subset) -> Result<Vec<Label>> {
    Ok(match model {
        AnyModel::Linear(m) => predict_proba(m, &linear_features(kind, f, s))?
            .into_iter()
            .map(Label::from_probability)
            .collect(),
        AnyModel::BilstmAtt(m) => predict_labels(m, &token_ids(f, s)?.inputs)?,
        AnyModel::Truncated(m) => predict_labels(m, &token_ids(f, s)?.inputs)?,
        AnyModel::Hier(m) => {
            let inputs = token_ids(f, s)?
                .inputs
                .iter()
                .map(|t| Ok(HierInput::Chunks(m.chunk(t)?)))
                .collect::<Result<Vec<_>>>()?;
            predict_labels(m, &inputs)?
        }
    })
}

pub fn run_evaluate(ctx: &mut Ctx) -> Result<StageOutcome> {
    let (f, train_hash, dir) = trained_model(ctx)?;
    let seeds = ctx.seeds();
    let hash = hash_of(&json!({ "stage": EVALUATE, "train": train_hash, "seeds": seeds }));
    if ctx.is_current(&dir, EVALUATE, &hash)? {
        return Ok(StageOutcome {
            stage: EVALUATE.into(),
            status: Status::UpToDate,
            config_hash: hash,
            dir,
        });
    }
    let kind = ctx.cfg.model.kind;
    let h = ctx.load_histories()?;
    let name = ctx.cfg.model.display_name();
    let mut runs = Vec::new();
    let mut outputs = Vec::new();
    for &seed in &seeds {
        let ckpt = load_checkpoint(&dir, seed, &train_hash, &vocab_hash(kind, &f))?;
        let (_, record): (_, TrainingRecord) = store::read_json(&seed_dir(&dir, seed).join("training.json"))?;
        let pred = predict(&ckpt.model, kind, &f, &h.test)?;
        let scores = evaluate_macro(&pred, &h.test.labels)?;
        eprintln!(
            "evaluate: {name} seed {seed}: precision {:.3} recall {:.3} F1 {:.3}",
            scores.precision, scores.recall, scores.f1
        );
        let report = SeedReport {
            seed,
            config_hash: train_hash.clone(),
            wall_time_secs: record.wall_time_secs,
            scores,
            best_epoch: record.best_epoch,
        };
        let rel = format!("{seed}/report.json");
        store::write_atomic(&dir.join(&rel), serde_json::to_string_pretty(&report)?.as_bytes())?;
        outputs.push(rel);
        runs.push(report);
    }
    let report = if runs.len() >= 2 {
        aggregate_runs(&name, runs)?
    } else {
        let s = &runs[0].scores;
        EvalReport {
            model: name.clone(),
            config_hash: train_hash.clone(),
            precision: MeanStd::of(&[s.precision]),
            recall: MeanStd::of(&[s.recall]),
            f1: MeanStd::of(&[s.f1]),
            runs,
        }
    };
    store::write_atomic(
        &dir.join("report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    outputs.push("report.json".into());
    eprintln!(
        "evaluate: {name} over {} seed(s): P {}  R {}  F1 {}",
        report.runs.len(),
        report.precision.percent(),
        report.recall.percent(),
        report.f1.percent()
    );
    let mut m = Manifest::new(EVALUATE, &hash);
    m.upstream.insert(TRAIN.into(), train_hash);
    m.upstream.insert(FEATURIZE.into(), f.hash);
    m.outputs = outputs;
    m.details = json!({ "model": name, "seeds": seeds });
    m.write(&dir)?;
    Ok(StageOutcome {
        stage: EVALUATE.into(),
        status: Status::Built,
        config_hash: hash,
        dir,
    })
}

pub fn run_explain(ctx: &mut Ctx) -> Result<StageOutcome> {
    let (f, train_hash, dir) = trained_model(ctx)?;
    let kind = ctx.cfg.model.kind;
    if kind.is_linear() {
        return Err(civic_lens::Error::NotDifferentiable(format!(
            "{kind} scores aggregate feature vectors, not token embeddings"
        ))
        .into());
    }
    let seed = ctx.seeds()[0];
    let e = &ctx.cfg.explain;
    let hash = hash_of(&json!({ "stage": EXPLAIN, "train": train_hash, "seed": seed, "explain": e }));
    let out = seed_dir(&dir, seed).join("explain");
    if ctx.is_current(&out, EXPLAIN, &hash)? {
        return Ok(StageOutcome {
            stage: EXPLAIN.into(),
            status: Status::UpToDate,
            config_hash: hash,
            dir: out,
        });
    }
    let ckpt = load_checkpoint(&dir, seed, &train_hash, &vocab_hash(kind, &f))?;
    let model = ckpt.model.attributable()?;
    let h = ctx.load_histories()?;
    let model_ref = format!("{}@{train_hash}/{seed}", ctx.cfg.model.display_name());
    let attrs = h
        .test
        .histories
        .iter()
        .map(|u| {
            let ids = f.word_vocab.encode(&u.tokens);
            explain_user(model, &u.user_id, &ids, &f.word_vocab, e.merge, &model_ref)
        })
        .collect::<civic_lens::Result<Vec<_>>>()?;
    let rows = summarize_importance(&attrs, e.top_k);
    store::write_jsonl(&out.join("attributions.jsonl"), &hash, &attrs)?;
    store::write_csv(&out.join("importance.csv"), &hash, |b| write_importance_csv(&rows, b))?;
    for class in Label::ALL {
        let top: Vec<String> = rows
            .iter()
            .filter(|r| r.class == class)
            .take(e.top_k)
            .map(|r| format!("{} ({:.3})", r.token, r.mean_score))
            .collect();
        eprintln!("explain: {class}: {}", top.join(", "));
    }
    let mut m = Manifest::new(EXPLAIN, &hash);
    m.upstream.insert(TRAIN.into(), train_hash);
    m.outputs = vec!["attributions.jsonl".into(), "importance.csv".into()];
    m.details = json!({ "seed": seed, "users": attrs.len() });
    m.write(&out)?;
    Ok(StageOutcome {
        stage: EXPLAIN.into(),
        status: Status::Built,
        config_hash: hash,
        dir: out,
    })
}
