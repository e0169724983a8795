//! JSON model container: model kind, vocabulary hash, training metadata and
//! parameters. Loading checks the vocabulary hash against the tokenizer in use.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{BiLstmAtt, LinearModel};
use crate::error::{Error, Result};
use crate::explain::Attributable;
use crate::hiernet::{HierModel, TruncatedModel};
use crate::trainer::ModelKind;

pub const FORMAT: &str = "civic-lens-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "state", rename_all = "kebab-case")]
pub enum AnyModel {
    Linear(LinearModel),
    BilstmAtt(BiLstmAtt),
    Truncated(TruncatedModel),
    Hier(HierModel),
}

impl AnyModel {
    /// Token-level view for attribution. Bag-of-features models have no
    /// input embeddings to differentiate.
    pub fn attributable(&self) -> Result<&dyn Attributable> {
        match self {
            AnyModel::Linear(_) => Err(Error::NotDifferentiable(
                "logistic regression scores aggregate feature vectors, not token embeddings".into(),
            )),
            AnyModel::BilstmAtt(m) => Ok(m),
            AnyModel::Truncated(m) => Ok(m),
            AnyModel::Hier(m) => Ok(m),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub config_hash: String,
    pub optimizer: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub best_epoch: Option<usize>,
    pub best_valid_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub kind: ModelKind,
    pub vocab_hash: String,
    pub meta: TrainingMeta,
    pub model: AnyModel,
}

impl Checkpoint {
    pub fn new(kind: ModelKind, vocab_hash: impl Into<String>, meta: TrainingMeta, model: AnyModel) -> Self {
        Checkpoint {
            format: FORMAT.to_string(),
            kind,
            vocab_hash: vocab_hash.into(),
            meta,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint without checking its vocabulary.
    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(f))?;
        if ck.format != FORMAT {
            return Err(Error::Unsupported(format!("checkpoint format {:?}", ck.format)));
        }
        Ok(ck)
    }

    pub fn verify_vocab(&self, vocab_hash: &str) -> Result<()> {
        if self.vocab_hash != vocab_hash {
            return Err(Error::VocabularyMismatch {
                expected: self.vocab_hash.clone(),
                actual: vocab_hash.to_string(),
            });
        }
        Ok(())
    }

    pub fn load(path: &Path, vocab_hash: &str) -> Result<Self> {
        let ck = Self::read(path)?;
        ck.verify_vocab(vocab_hash)?;
        Ok(ck)
    }
}
