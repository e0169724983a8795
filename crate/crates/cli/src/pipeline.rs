//! Stage bookkeeping and the data-side stages: ingest, synth, summarize,
//! preprocess and featurize.
//!
//! Every stage has a config hash chained from its upstream hashes. A stage
//! invoked directly is a no-op when its manifest matches. A stage needed by
//! a downstream command is built automatically if absent (preprocess and
//! featurize only), and is an error if present under a different hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use civic_lens::corpus::{
    filter_users, generate_synthetic, load_id_list, load_jsonl, split_dataset, summarize, write_summary_csv,
    FilterConfig, SplitIds, SplitSpec,
};
use civic_lens::features::{
    build_vocabulary, lexicon_vectorize, tfidf_vectorize, FeatureMatrix, Lexicon, Vocabulary, WordVocab,
};
use civic_lens::preprocess::{concatenate_history, normalizer_for, NormalizedHistory};
use civic_lens::{Label, LabeledDataset};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{hash_of, PipelineConfig};
use crate::error::{CliError, Result};
use crate::store::{self, Manifest, Workspace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Built,
    UpToDate,
}

/// What a command prints to stdout on success.
#[derive(Debug, Serialize)]
pub struct StageOutcome {
    pub stage: String,
    pub status: Status,
    pub config_hash: String,
    pub dir: PathBuf,
}

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub ws: Workspace,
    pub force: bool,
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Train,
    Valid,
    Test,
}

#[derive(Serialize, Deserialize)]
struct HistoryLine {
    split: Part,
    label: Label,
    #[serde(flatten)]
    history: NormalizedHistory,
}

#[derive(Clone, Debug, Default)]
pub struct Subset {
    pub histories: Vec<NormalizedHistory>,
    pub labels: Vec<Label>,
}

#[derive(Clone, Debug, Default)]
pub struct Histories {
    pub train: Subset,
    pub valid: Subset,
    pub test: Subset,
}

impl Histories {
    pub fn all(&self) -> Subset {
        let mut out = Subset::default();
        for s in [&self.train, &self.valid, &self.test] {
            out.histories.extend(s.histories.iter().cloned());
            out.labels.extend(&s.labels);
        }
        out
    }
}

/// Featurize outputs as used by training and evaluation.
pub struct Features {
    pub hash: String,
    pub vocab: Vocabulary,
    pub word_vocab: WordVocab,
    pub lexicon: Lexicon,
}

pub const DATA: &str = "data";
pub const SUMMARIZE: &str = "summarize";
pub const PREPROCESS: &str = "preprocess";
pub const FEATURIZE: &str = "featurize";

/// SHA-256 of the lexicon's parsed content, so whitespace or comment edits
/// in the TSV do not invalidate anything.
pub fn lexicon_fingerprint(lex: &Lexicon) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(lex).expect("lexicon serializes")))
}

impl Ctx {
    pub fn dir(&self, stage: &str) -> PathBuf {
        self.ws.dir(stage)
    }

    pub fn seeds(&self) -> Vec<u64> {
        match self.seed {
            Some(s) => vec![s],
            None => self.cfg.trainer.seeds.clone(),
        }
    }

    fn outcome(&self, stage: &str, status: Status, hash: &str, dir: &Path) -> StageOutcome {
        if status == Status::UpToDate {
            eprintln!("{stage}: up to date ({hash})");
        }
        StageOutcome {
            stage: stage.to_string(),
            status,
            config_hash: hash.to_string(),
            dir: dir.to_path_buf(),
        }
    }

    /// True when `stage` in `dir` was built for `hash` and its outputs exist.
    pub fn is_current(&self, dir: &Path, stage: &str, hash: &str) -> Result<bool> {
        Ok(!self.force
            && matches!(Manifest::read(dir, stage)?, Some(m) if m.config_hash == hash && m.outputs_exist(dir)))
    }

    /// Errors unless `stage` in `dir` is current for `hash`.
    pub fn require(&self, dir: &Path, stage: &str, hash: &str, hint: &str) -> Result<Manifest> {
        match Manifest::read(dir, stage)? {
            None => Err(CliError::missing(stage, hint)),
            Some(m) if m.config_hash != hash => Err(CliError::StaleArtifact {
                stage: stage.to_string(),
                found: m.config_hash,
                expected: hash.to_string(),
            }),
            Some(m) if !m.outputs_exist(dir) => Err(CliError::missing(stage, format!("outputs were removed; {hint}"))),
            Some(m) => Ok(m),
        }
    }

    /// Builds `stage` if it was never built; errors if it is stale.
    fn ensure(&mut self, stage: &str, hash: &str, build: fn(&mut Ctx) -> Result<StageOutcome>) -> Result<()> {
        let dir = self.dir(stage);
        match Manifest::read(&dir, stage)? {
            Some(m) if m.config_hash != hash => Err(CliError::StaleArtifact {
                stage: stage.to_string(),
                found: m.config_hash,
                expected: hash.to_string(),
            }),
            Some(m) if m.outputs_exist(&dir) => Ok(()),
            _ => {
                eprintln!("{stage}: not built yet, running it first");
                let force = std::mem::replace(&mut self.force, false);
                let r = build(self);
                self.force = force;
                r.map(|_| ())
            }
        }
    }

    // ---- hashes ----

    fn synth_hash(&self) -> String {
        hash_of(&json!({ "stage": "synth", "synth": self.cfg.synth }))
    }

    fn ingest_inputs(&self) -> Result<BTreeMap<String, String>> {
        let data = self
            .cfg
            .paths
            .data
            .as_ref()
            .ok_or_else(|| CliError::Config("paths.data is not set".into()))?;
        let mut inputs = BTreeMap::new();
        inputs.insert(data.display().to_string(), store::sha256_file(data)?);
        if let Some(ids) = &self.cfg.paths.dual_role_ids {
            inputs.insert(ids.display().to_string(), store::sha256_file(ids)?);
        }
        Ok(inputs)
    }

    fn ingest_hash(&self, inputs: &BTreeMap<String, String>) -> String {
        let c = &self.cfg.corpus;
        hash_of(&json!({
            "stage": "ingest",
            "platform": c.platform,
            "min_posts": c.min_posts,
            "max_posts": c.max_posts,
            "drop_dual_role": c.drop_dual_role,
            "inputs": inputs.values().collect::<Vec<_>>(),
        }))
    }

    /// Hash of the current dataset, checked against what the config implies.
    pub fn data_hash(&self) -> Result<String> {
        let dir = self.dir(DATA);
        let hint = "run `civic-lens ingest` or `civic-lens synth` first";
        let m = Manifest::read(&dir, DATA)?.ok_or_else(|| CliError::missing(DATA, hint))?;
        let source = m.details["source"].as_str().unwrap_or("ingest").to_string();
        let expected = match source.as_str() {
            "synth" => self.synth_hash(),
            _ => self.ingest_hash(&self.ingest_inputs()?),
        };
        if m.config_hash != expected {
            return Err(CliError::StaleArtifact {
                stage: source,
                found: m.config_hash,
                expected,
            });
        }
        if !m.outputs_exist(&dir) {
            return Err(CliError::missing(DATA, hint));
        }
        Ok(expected)
    }

    pub fn preprocess_hash(&self) -> Result<String> {
        let c = &self.cfg.corpus;
        Ok(hash_of(&json!({
            "stage": PREPROCESS,
            "data": self.data_hash()?,
            "split": [c.train_frac, c.valid_frac, c.test_frac, c.split_seed],
        })))
    }

    pub fn load_lexicon(&self) -> Result<Lexicon> {
        Ok(match &self.cfg.paths.lexicon {
            Some(p) => Lexicon::from_path(p)?,
            None => Lexicon::bundled(),
        })
    }

    pub fn featurize_hash(&self, preprocess: &str) -> Result<String> {
        Ok(hash_of(&json!({
            "stage": FEATURIZE,
            "preprocess": preprocess,
            "features": self.cfg.features,
            "lexicon": lexicon_fingerprint(&self.load_lexicon()?),
        })))
    }

    // ---- loaders ----

    pub fn load_dataset(&self) -> Result<LabeledDataset> {
        let (_, ds) = store::read_json(&self.dir(DATA).join("dataset.json"))?;
        Ok(ds)
    }

    /// Ensures preprocess is current and returns its hash.
    pub fn ensure_preprocess(&mut self) -> Result<String> {
        let h = self.preprocess_hash()?;
        self.ensure(PREPROCESS, &h, run_preprocess)?;
        Ok(h)
    }

    pub fn load_histories(&self) -> Result<Histories> {
        let lines: Vec<HistoryLine> = store::read_jsonl(&self.dir(PREPROCESS).join("histories.jsonl"))?;
        let mut h = Histories::default();
        for l in lines {
            let part = match l.split {
                Part::Train => &mut h.train,
                Part::Valid => &mut h.valid,
                Part::Test => &mut h.test,
            };
            part.histories.push(l.history);
            part.labels.push(l.label);
        }
        Ok(h)
    }

    /// Ensures preprocess and featurize are current and loads the features.
    pub fn ensure_features(&mut self) -> Result<Features> {
        let ph = self.ensure_preprocess()?;
        let fh = self.featurize_hash(&ph)?;
        self.ensure(FEATURIZE, &fh, run_featurize)?;
        let dir = self.dir(FEATURIZE);
        Ok(Features {
            hash: fh,
            vocab: store::read_json(&dir.join("vocab.json"))?.1,
            word_vocab: store::read_json(&dir.join("word_vocab.json"))?.1,
            lexicon: store::read_json(&dir.join("lexicon.json"))?.1,
        })
    }
}

// ---- stages ----

fn write_dataset(
    ctx: &Ctx,
    ds: &LabeledDataset,
    hash: &str,
    source: &str,
    inputs: BTreeMap<String, String>,
) -> Result<()> {
    let dir = ctx.dir(DATA);
    store::write_json(&dir.join("dataset.json"), hash, ds)?;
    let mut m = Manifest::new(DATA, hash);
    m.inputs = inputs;
    m.outputs = vec!["dataset.json".into()];
    m.details = json!({
        "source": source,
        "users": ds.len(),
        "posters": ds.count(Label::Poster),
        "active_citizens": ds.count(Label::ActiveCitizen),
        "provenance": ds.provenance,
    });
    m.write(&dir)?;
    eprintln!(
        "{source}: {} users ({} posters, {} active citizens)",
        ds.len(),
        ds.count(Label::Poster),
        ds.count(Label::ActiveCitizen)
    );
    Ok(())
}

fn data_current(ctx: &Ctx, source: &str, hash: &str) -> Result<bool> {
    let dir = ctx.dir(DATA);
    Ok(ctx.is_current(&dir, DATA, hash)?
        && Manifest::read(&dir, DATA)?.is_some_and(|m| m.details["source"].as_str() == Some(source)))
}

pub fn run_ingest(ctx: &mut Ctx) -> Result<StageOutcome> {
    let inputs = ctx.ingest_inputs()?;
    let hash = ctx.ingest_hash(&inputs);
    let dir = ctx.dir(DATA);
    if data_current(ctx, "ingest", &hash)? {
        return Ok(ctx.outcome("ingest", Status::UpToDate, &hash, &dir));
    }
    let c = &ctx.cfg.corpus;
    let path = ctx.cfg.paths.data.as_ref().expect("checked by ingest_inputs");
    let raw = load_jsonl(path, c.platform)?;
    let filter = FilterConfig {
        min_posts: c.min_posts,
        max_posts: c.max_posts,
        drop_dual_role: c.drop_dual_role,
        dual_role_ids: match &ctx.cfg.paths.dual_role_ids {
            Some(p) => load_id_list(p)?,
            None => Default::default(),
        },
    };
    let ds = filter_users(&raw, &filter)?;
    eprintln!("ingest: kept {} of {} users after filtering", ds.len(), raw.len());
    if ds.is_empty() {
        return Err(civic_lens::Error::EmptyDataset.into());
    }
    write_dataset(ctx, &ds, &hash, "ingest", inputs)?;
    Ok(ctx.outcome("ingest", Status::Built, &hash, &dir))
}

pub fn run_synth(ctx: &mut Ctx) -> Result<StageOutcome> {
    let hash = ctx.synth_hash();
    let dir = ctx.dir(DATA);
    if data_current(ctx, "synth", &hash)? {
        return Ok(ctx.outcome("synth", Status::UpToDate, &hash, &dir));
    }
    let ds = generate_synthetic(&ctx.cfg.synth.to_core())?;
    write_dataset(ctx, &ds, &hash, "synth", BTreeMap::new())?;
    Ok(ctx.outcome("synth", Status::Built, &hash, &dir))
}

pub fn run_summarize(ctx: &mut Ctx) -> Result<StageOutcome> {
    let dh = ctx.data_hash()?;
    let hash = hash_of(&json!({ "stage": SUMMARIZE, "data": dh }));
    let dir = ctx.dir(SUMMARIZE);
    if ctx.is_current(&dir, SUMMARIZE, &hash)? {
        return Ok(ctx.outcome(SUMMARIZE, Status::UpToDate, &hash, &dir));
    }
    let rows = summarize(&ctx.load_dataset()?)?;
    store::write_csv(&dir.join("summary.csv"), &hash, |b| write_summary_csv(&rows, b))?;
    for r in &rows {
        eprintln!(
            "{:<15} users {:>5}  posts/user {:>8.1}  tokens/user mean {:>9.1} median {:>9.1}",
            r.label, r.n_users, r.posts_mean, r.tokens_mean, r.tokens_median
        );
    }
    let mut m = Manifest::new(SUMMARIZE, &hash);
    m.upstream.insert(DATA.into(), dh);
    m.outputs = vec!["summary.csv".into()];
    m.write(&dir)?;
    Ok(ctx.outcome(SUMMARIZE, Status::Built, &hash, &dir))
}

pub fn run_preprocess(ctx: &mut Ctx) -> Result<StageOutcome> {
    let hash = ctx.preprocess_hash()?;
    let dir = ctx.dir(PREPROCESS);
    if ctx.is_current(&dir, PREPROCESS, &hash)? {
        return Ok(ctx.outcome(PREPROCESS, Status::UpToDate, &hash, &dir));
    }
    let ds = ctx.load_dataset()?;
    let c = &ctx.cfg.corpus;
    let spec = SplitSpec {
        train_frac: c.train_frac,
        valid_frac: c.valid_frac,
        test_frac: c.test_frac,
        seed: c.split_seed,
    };
    let split = split_dataset(&ds, &spec)?;
    let norm = normalizer_for(ds.platform);
    let mut lines = Vec::with_capacity(ds.len());
    for (part, d) in [
        (Part::Train, &split.train),
        (Part::Valid, &split.valid),
        (Part::Test, &split.test),
    ] {
        for u in &d.users {
            lines.push(HistoryLine {
                split: part,
                label: u.label,
                history: concatenate_history(u, norm.as_ref())?,
            });
        }
    }
    let ids: SplitIds = split.ids();
    store::write_json(&dir.join("split.json"), &hash, &ids)?;
    store::write_jsonl(&dir.join("histories.jsonl"), &hash, &lines)?;
    let mut m = Manifest::new(PREPROCESS, &hash);
    m.upstream.insert(DATA.into(), ctx.data_hash()?);
    m.outputs = vec!["split.json".into(), "histories.jsonl".into()];
    m.details = json!({ "train": ids.train.len(), "valid": ids.valid.len(), "test": ids.test.len() });
    m.write(&dir)?;
    eprintln!(
        "preprocess: {} / {} / {} users in train / valid / test",
        ids.train.len(),
        ids.valid.len(),
        ids.test.len()
    );
    Ok(ctx.outcome(PREPROCESS, Status::Built, &hash, &dir))
}

fn export_matrix(dir: &Path, hash: &str, stem: &str, x: &FeatureMatrix, outputs: &mut Vec<String>) -> Result<()> {
    let name = format!("{stem}.csv");
    store::write_csv(&dir.join(&name), hash, |b| x.write_triplets(b))?;
    outputs.push(name);
    Ok(())
}

pub fn run_featurize(ctx: &mut Ctx) -> Result<StageOutcome> {
    let ph = ctx.ensure_preprocess()?;
    let hash = ctx.featurize_hash(&ph)?;
    let dir = ctx.dir(FEATURIZE);
    if ctx.is_current(&dir, FEATURIZE, &hash)? {
        return Ok(ctx.outcome(FEATURIZE, Status::UpToDate, &hash, &dir));
    }
    let h = ctx.load_histories()?;
    let f = &ctx.cfg.features;
    let vocab = build_vocabulary(&h.train.histories, &f.vocab())?;
    let word_vocab = WordVocab::build(&h.train.histories, f.word_min_count, f.word_max_size)?;
    let lexicon = ctx.load_lexicon()?;
    store::write_json(&dir.join("vocab.json"), &hash, &vocab)?;
    store::write_json(&dir.join("word_vocab.json"), &hash, &word_vocab)?;
    store::write_json(&dir.join("lexicon.json"), &hash, &lexicon)?;
    let mut outputs: Vec<String> = ["vocab.json", "word_vocab.json", "lexicon.json"]
        .map(String::from)
        .into();

    let train_bow = tfidf_vectorize(&h.train.histories, &vocab);
    store::write_csv(&dir.join("bow_index.csv"), &hash, |b| train_bow.write_feature_index(b))?;
    outputs.push("bow_index.csv".into());
    let train_lex = lexicon_vectorize(&h.train.histories, &lexicon);
    store::write_csv(&dir.join("lexicon_index.csv"), &hash, |b| {
        train_lex.write_feature_index(b)
    })?;
    outputs.push("lexicon_index.csv".into());
    for (name, sub) in [("train", &h.train), ("valid", &h.valid), ("test", &h.test)] {
        let bow = tfidf_vectorize(&sub.histories, &vocab);
        export_matrix(&dir, &hash, &format!("bow_{name}"), &bow, &mut outputs)?;
        let lex = lexicon_vectorize(&sub.histories, &lexicon);
        export_matrix(&dir, &hash, &format!("lexicon_{name}"), &lex, &mut outputs)?;
    }

    let mut m = Manifest::new(FEATURIZE, &hash);
    m.upstream.insert(PREPROCESS.into(), ph);
    if let Some(p) = &ctx.cfg.paths.lexicon {
        m.inputs.insert(p.display().to_string(), store::sha256_file(p)?);
    }
    m.outputs = outputs;
    m.details = json!({
        "bow_terms": vocab.len(),
        "word_vocab": word_vocab.len(),
        "lexicon_categories": lexicon.categories.len(),
        "bow_fingerprint": vocab.fingerprint(),
        "word_vocab_fingerprint": word_vocab.fingerprint(),
        "lexicon_fingerprint": lexicon_fingerprint(&lexicon),
    });
    m.write(&dir)?;
    eprintln!(
        "featurize: {} n-gram terms, {} word ids, {} lexicon categories",
        vocab.len(),
        word_vocab.len(),
        lexicon.categories.len()
    );
    Ok(ctx.outcome(FEATURIZE, Status::Built, &hash, &dir))
}
