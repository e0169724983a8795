//! Pipeline configuration: one TOML file with `${VAR}` interpolation.

use std::path::{Path, PathBuf};

use civic_lens::corpus::{PlantRegion, SyntheticConfig};
use civic_lens::explain::MergeRule;
use civic_lens::features::{CountBasis, VocabConfig};
use civic_lens::hiernet::{EncoderStageData, FusionKind, TrainingMode};
use civic_lens::trainer::ModelKind;
use civic_lens::Platform;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub synth: SynthConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub explain: ExplainConfig,
    pub analysis: AnalysisConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Labeled user histories (JSONL) read by `ingest`.
    pub data: Option<PathBuf>,
    /// Users listed here are dropped as dual-role when filtering.
    pub dual_role_ids: Option<PathBuf>,
    /// Lexicon TSV; the bundled stand-in lexicon when unset.
    pub lexicon: Option<PathBuf>,
    /// Whitespace-separated word vectors for the BiLSTM embedding table.
    pub pretrained_vectors: Option<PathBuf>,
    pub runs: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: None,
            dual_role_ids: None,
            lexicon: None,
            pretrained_vectors: None,
            runs: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub platform: Platform,
    pub min_posts: usize,
    pub max_posts: Option<usize>,
    pub drop_dual_role: bool,
    pub split_seed: u64,
    pub train_frac: f64,
    pub valid_frac: f64,
    pub test_frac: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            platform: Platform::Twitter,
            min_posts: 30,
            max_posts: None,
            drop_dual_role: true,
            split_seed: 0,
            train_frac: 0.7,
            valid_frac: 0.1,
            test_frac: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantPlacement {
    Anywhere,
    Tail,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub posts_per_user: usize,
    pub p_plant: f64,
    pub noise_vocab_size: usize,
    pub placement: PlantPlacement,
    pub tail_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        SynthConfig {
            n_users: d.n_users,
            posts_per_user: d.posts_per_user,
            p_plant: d.p_plant,
            noise_vocab_size: d.noise_vocab_size,
            placement: PlantPlacement::Anywhere,
            tail_fraction: 0.2,
            seed: d.seed,
        }
    }
}

impl SynthConfig {
    pub fn to_core(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_users: self.n_users,
            posts_per_user: self.posts_per_user,
            p_plant: self.p_plant,
            noise_vocab_size: self.noise_vocab_size,
            plant_region: match self.placement {
                PlantPlacement::Anywhere => PlantRegion::Anywhere,
                PlantPlacement::Tail => PlantRegion::Tail {
                    fraction: self.tail_fraction,
                },
            },
            seed: self.seed,
            ..SyntheticConfig::default()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub ngram_max: usize,
    pub min_count: usize,
    pub min_count_basis: CountBasis,
    pub max_df_ratio: f64,
    pub max_size: usize,
    /// Word-level vocabulary for the neural models.
    pub word_min_count: usize,
    pub word_max_size: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        let v = VocabConfig::default();
        FeatureConfig {
            ngram_max: v.ngram_max,
            min_count: v.min_count,
            min_count_basis: v.min_count_basis,
            max_df_ratio: v.max_df_ratio,
            max_size: v.max_size,
            word_min_count: 2,
            word_max_size: 10_000,
        }
    }
}

impl FeatureConfig {
    pub fn vocab(&self) -> VocabConfig {
        VocabConfig {
            ngram_max: self.ngram_max,
            min_count: self.min_count,
            min_count_basis: self.min_count_basis,
            max_df_ratio: self.max_df_ratio,
            max_size: self.max_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderSize {
    /// 64-token chunks, full attention.
    Tiny,
    /// 4,094-token chunks with a 512-wide attention window.
    Long,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub fusion: FusionKind,
    pub mode: TrainingMode,
    pub encoder: EncoderSize,
    pub encoder_stage: EncoderStageData,
    pub embed_dim: usize,
    pub hidden_units: usize,
    pub dropout: f64,
    pub max_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::HierTransformer,
            fusion: FusionKind::LstmAttention,
            mode: TrainingMode::TwoStage,
            encoder: EncoderSize::Tiny,
            encoder_stage: EncoderStageData::AllChunks,
            embed_dim: 200,
            hidden_units: 150,
            dropout: 0.5,
            max_tokens: 10_000,
        }
    }
}

impl ModelConfig {
    /// Name used in reports, with the fusion for hierarchical models.
    pub fn display_name(&self) -> String {
        match self.kind {
            ModelKind::HierTransformer => format!("{}-{}", self.kind, self.fusion),
            k => k.to_string(),
        }
    }

    /// Only the fields that affect the chosen kind, so that e.g. changing
    /// the fusion does not invalidate a logistic-regression run.
    pub fn effective(&self) -> serde_json::Value {
        use serde_json::json;
        match self.kind {
            ModelKind::LrBow | ModelKind::LrLexicon => json!({ "kind": self.kind }),
            ModelKind::BilstmAtt => json!({
                "kind": self.kind,
                "embed_dim": self.embed_dim,
                "hidden_units": self.hidden_units,
                "dropout": self.dropout,
                "max_tokens": self.max_tokens,
            }),
            ModelKind::TruncTransformer => json!({ "kind": self.kind, "encoder": self.encoder }),
            ModelKind::HierTransformer => json!({
                "kind": self.kind,
                "encoder": self.encoder,
                "fusion": self.fusion,
                "mode": self.mode,
                "encoder_stage": self.encoder_stage,
            }),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub seeds: Vec<u64>,
    /// Defaults per kind when unset.
    pub learning_rate: Option<f64>,
    /// 16, or 4 for the long-window encoder, when unset.
    pub batch_size: Option<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: Option<f64>,
    pub warmup_frac: Option<f64>,
    pub clip_norm: Option<f64>,
    pub alpha: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            seeds: vec![1, 2, 3],
            learning_rate: None,
            batch_size: None,
            max_epochs: 10,
            patience: 3,
            weight_decay: None,
            warmup_frac: None,
            clip_norm: Some(1.0),
            alpha: civic_lens::baselines::DEFAULT_ALPHA,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub top_k: usize,
    pub merge: MergeRule,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            top_k: 10,
            merge: MergeRule::Sum,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub alpha: f64,
    pub top_k: usize,
    pub wordcloud_k: usize,
    pub ngram_max: usize,
    pub min_count: usize,
    /// Unlike the classifier vocabulary, strongly class-bound terms are
    /// exactly what the analysis looks for, so no document-frequency cap.
    pub max_df_ratio: f64,
    pub max_size: usize,
    pub permutations: Option<usize>,
    pub permutation_seed: u64,
    pub bonferroni: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            alpha: civic_lens::analysis::DEFAULT_ALPHA,
            top_k: civic_lens::analysis::TABLE_ROWS,
            wordcloud_k: civic_lens::analysis::WORDCLOUD_SIZE,
            ngram_max: 2,
            min_count: 5,
            max_df_ratio: 1.0,
            max_size: 10_000,
            permutations: None,
            permutation_seed: 0,
            bonferroni: false,
        }
    }
}

/// Replaces `${NAME}` with the environment variable `NAME`.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| CliError::Config("unterminated ${ in config".into()))?;
        let name = &after[..end];
        let value = lookup(name).ok_or_else(|| CliError::Config(format!("environment variable {name} is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl PipelineConfig {
    /// Parses a config file. Relative paths are resolved against the file's
    /// directory; without a file, against the working directory.
    pub fn load(path: Option<&Path>) -> Result<PipelineConfig> {
        let Some(path) = path else {
            return Ok(PipelineConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let text = interpolate(&text, |k| std::env::var(k).ok())?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.paths.runs);
        for p in [
            &mut cfg.paths.data,
            &mut cfg.paths.dual_role_ids,
            &mut cfg.paths.lexicon,
            &mut cfg.paths.pretrained_vectors,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.paths;
        for (key, path) in [
            ("paths.data", &p.data),
            ("paths.dual_role_ids", &p.dual_role_ids),
            ("paths.lexicon", &p.lexicon),
            ("paths.pretrained_vectors", &p.pretrained_vectors),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(CliError::Config(format!("{key} {} does not exist", path.display())));
                }
            }
        }
        if self.trainer.seeds.is_empty() {
            return Err(CliError::Config("trainer.seeds is empty".into()));
        }
        if self.trainer.patience >= self.trainer.max_epochs {
            return Err(CliError::Config(
                "trainer.patience must be below trainer.max_epochs".into(),
            ));
        }
        Ok(())
    }
}

/// Short SHA-256 of the canonical JSON form (object keys sorted).
pub fn hash_of<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value)
        .expect("config values serialize")
        .to_string();
    hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation() {
        let env = |k: &str| (k == "HOME_DIR").then(|| "/data".to_string());
        assert_eq!(interpolate("a = \"${HOME_DIR}/x\"", env).unwrap(), "a = \"/data/x\"");
        assert!(interpolate("${MISSING}", env).is_err());
        assert!(interpolate("${HOME_DIR", env).is_err());
        assert_eq!(interpolate("plain $x", env).unwrap(), "plain $x");
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(hash_of(&cfg), hash_of(&back));
        let partial: PipelineConfig = toml::from_str("[model]\nkind = \"lr-bow\"\n").unwrap();
        assert_eq!(partial.model.kind, ModelKind::LrBow);
        assert_eq!(partial.trainer.seeds, [1, 2, 3]);
        assert!(toml::from_str::<PipelineConfig>("[model]\nknd = 1\n").is_err());
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = serde_json::json!({"a": 1, "b": [1.5, 2]});
        let b: serde_json::Value = serde_json::from_str(r#"{"b": [1.5, 2], "a": 1}"#).unwrap();
        assert_eq!(hash_of(&a), hash_of(&b));
    }
}
