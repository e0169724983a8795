//! Chunked hierarchical classification: split a user's token stream into
//! fixed-capacity chunks, encode each chunk with a small transformer, fuse
//! the per-chunk `[CLS]` vectors and classify with a two-layer head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::WordVocab;
use crate::nn::layers::{dropout, AdditiveAttention, Embedding, EmbeddingInit, LayerNorm, Linear, Lstm};
use crate::nn::{sigmoid, Graph, Matrix, ParamSet, Var};
use crate::trainer::{train_with_early_stopping, Examples, TrainConfig, TrainOutcome, Trainable};

/// Content tokens per chunk for 512-position encoders.
pub const STANDARD_CAPACITY: usize = 510;
/// Content tokens per chunk for 4,096-position sliding-window encoders.
pub const LONG_CAPACITY: usize = 4094;
/// Content tokens per chunk for the tiny reference encoder.
pub const TINY_CAPACITY: usize = 64;

const ENCODER_PREFIX: &str = "encoder.";

/// A token stream cut into chunks of `content_capacity + 2` ids:
/// `[CLS] content [SEP] [PAD]...`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSequence {
    pub chunks: Vec<Vec<usize>>,
    pub attention_masks: Vec<Vec<u8>>,
    pub n_chunks: usize,
    pub content_capacity: usize,
}

impl ChunkSequence {
    /// Number of unmasked positions in chunk `i` (content plus the two specials).
    pub fn real_len(&self, i: usize) -> usize {
        self.attention_masks[i].iter().filter(|&&m| m == 1).count()
    }

    pub fn content(&self, i: usize) -> &[usize] {
        &self.chunks[i][1..self.real_len(i) - 1]
    }

    /// Unmasked prefix of chunk `i`, specials included.
    pub fn real_ids(&self, i: usize) -> &[usize] {
        &self.chunks[i][..self.real_len(i)]
    }

    /// Concatenated content of all chunks.
    pub fn content_tokens(&self) -> Vec<usize> {
        (0..self.n_chunks)
            .flat_map(|i| self.content(i).iter().copied())
            .collect()
    }

    pub fn chunk_len(&self) -> usize {
        self.content_capacity + 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub content_capacity: usize,
    /// Tokens shared by consecutive chunks.
    pub overlap: usize,
    /// Keep at most this many chunks from the start of the stream.
    pub max_chunks: Option<usize>,
}

impl ChunkingConfig {
    pub fn new(content_capacity: usize) -> Self {
        ChunkingConfig {
            content_capacity,
            overlap: 0,
            max_chunks: Some(64),
        }
    }
}

/// Splits `tokens` into ceil(L / capacity) chunks with no overlap and no cap.
pub fn chunk_tokens(tokens: &[usize], content_capacity: usize) -> Result<ChunkSequence> {
    chunk_tokens_with(
        tokens,
        &ChunkingConfig {
            content_capacity,
            overlap: 0,
            max_chunks: None,
        },
    )
}

pub fn chunk_tokens_with(tokens: &[usize], cfg: &ChunkingConfig) -> Result<ChunkSequence> {
    if tokens.is_empty() {
        return Err(Error::invalid("cannot chunk an empty token sequence"));
    }
    let cap = cfg.content_capacity;
    if cap == 0 {
        return Err(Error::invalid("content_capacity must be at least 1"));
    }
    if cfg.overlap >= cap {
        return Err(Error::invalid(format!(
            "overlap {} must be below capacity {cap}",
            cfg.overlap
        )));
    }
    if cfg.max_chunks == Some(0) {
        return Err(Error::invalid("max_chunks must be at least 1"));
    }
    let stride = cap - cfg.overlap;
    let mut chunks = Vec::new();
    let mut masks = Vec::new();
    let mut start = 0;
    loop {
        if cfg.max_chunks.is_some_and(|m| chunks.len() == m) {
            break;
        }
        let end = (start + cap).min(tokens.len());
        let mut chunk = Vec::with_capacity(cap + 2);
        chunk.push(WordVocab::CLS);
        chunk.extend_from_slice(&tokens[start..end]);
        chunk.push(WordVocab::SEP);
        let real = chunk.len();
        chunk.resize(cap + 2, WordVocab::PAD);
        let mut mask = vec![1u8; real];
        mask.resize(cap + 2, 0);
        chunks.push(chunk);
        masks.push(mask);
        if end == tokens.len() {
            break;
        }
        start += stride;
    }
    Ok(ChunkSequence {
        n_chunks: chunks.len(),
        chunks,
        attention_masks: masks,
        content_capacity: cap,
    })
}

/// The first min(L, capacity) tokens.
pub fn truncate_head(tokens: &[usize], capacity: usize) -> Vec<usize> {
    tokens[..tokens.len().min(capacity)].to_vec()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    TinyReference,
    /// Interface slot for externally supplied pretrained encoders. No weights
    /// ship with this crate.
    PretrainedPlugin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkEncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    /// Sliding-window width; positions attend to neighbours within half of it.
    /// `[CLS]` attends and is attended globally.
    pub window: Option<usize>,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl ChunkEncoderConfig {
    pub fn tiny_reference(vocab_size: usize) -> Self {
        ChunkEncoderConfig {
            kind: EncoderKind::TinyReference,
            layers: 2,
            heads: 2,
            embed_dim: 32,
            ffn_dim: 128,
            max_positions: TINY_CAPACITY + 2,
            window: None,
            vocab_size,
            dropout: 0.1,
        }
    }

    /// Same architecture with 4,096 positions and a 512-wide attention window.
    pub fn long_window(vocab_size: usize) -> Self {
        ChunkEncoderConfig {
            max_positions: LONG_CAPACITY + 2,
            window: Some(512),
            ..Self::tiny_reference(vocab_size)
        }
    }

    pub fn validate(&self, chunk_len: usize) -> Result<()> {
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.max_positions < chunk_len {
            return Err(Error::invalid(format!(
                "max_positions {} is below the chunk length {chunk_len}",
                self.max_positions
            )));
        }
        if self.layers == 0 || self.ffn_dim == 0 || self.vocab_size <= WordVocab::SEP {
            return Err(Error::invalid(
                "encoder needs layers, ffn_dim and a vocabulary beyond the specials",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// An encoder that maps one chunk to per-position hidden states. Parameters
/// live in the caller's [`ParamSet`], so implementations only hold handles.
pub trait ChunkEncoder: Send + Sync {
    fn config(&self) -> &ChunkEncoderConfig;

    /// Input embeddings for `ids` (n×embed_dim), before position information.
    fn embed_tokens(&self, g: &mut Graph, ids: &[usize]) -> Var;

    /// Hidden states (n×embed_dim) for input embeddings of the unmasked
    /// positions of one chunk. Row 0 is `[CLS]`.
    fn encode_embeddings(&self, g: &mut Graph, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var>;

    /// `[CLS]` hidden state (1×embed_dim) of a chunk given its unmasked ids.
    fn cls(&self, g: &mut Graph, ids: &[usize], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let x = self.embed_tokens(g, ids);
        let h = self.encode_embeddings(g, x, rng)?;
        Ok(g.slice_rows(h, 0, 1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EncoderLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    attn_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: LayerNorm,
}

/// Post-norm transformer encoder with learned positions and GELU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyEncoder {
    pub cfg: ChunkEncoderConfig,
    tokens: Embedding,
    positions: Embedding,
    embed_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
}

impl TinyEncoder {
    pub fn new(cfg: ChunkEncoderConfig, ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.kind == EncoderKind::PretrainedPlugin {
            return Err(Error::Unsupported(
                "pretrained encoder weights are not bundled; supply a ChunkEncoder implementation".into(),
            ));
        }
        cfg.validate(cfg.max_positions)?;
        let d = cfg.embed_dim;
        let p = ENCODER_PREFIX;
        let tokens = Embedding::new(
            ps,
            &format!("{p}tokens"),
            cfg.vocab_size,
            d,
            EmbeddingInit::Normal(0.02),
            rng,
        );
        let positions = Embedding::new(
            ps,
            &format!("{p}positions"),
            cfg.max_positions,
            d,
            EmbeddingInit::Normal(0.02),
            rng,
        );
        let embed_norm = LayerNorm::new(ps, &format!("{p}embed_norm"), d);
        let layers = (0..cfg.layers)
            .map(|l| {
                let n = format!("{p}layer{l}");
                EncoderLayer {
                    query: Linear::new(ps, &format!("{n}.query"), d, d, rng),
                    key: Linear::new(ps, &format!("{n}.key"), d, d, rng),
                    value: Linear::new(ps, &format!("{n}.value"), d, d, rng),
                    attn_out: Linear::new(ps, &format!("{n}.attn_out"), d, d, rng),
                    attn_norm: LayerNorm::new(ps, &format!("{n}.attn_norm"), d),
                    ffn_in: Linear::new(ps, &format!("{n}.ffn_in"), d, cfg.ffn_dim, rng),
                    ffn_out: Linear::new(ps, &format!("{n}.ffn_out"), cfg.ffn_dim, d, rng),
                    ffn_norm: LayerNorm::new(ps, &format!("{n}.ffn_norm"), d),
                }
            })
            .collect();
        Ok(TinyEncoder {
            cfg,
            tokens,
            positions,
            embed_norm,
            layers,
        })
    }

    /// Sliding-window mask, or `None` when every pair may attend.
    fn window_mask(&self, n: usize) -> Option<Vec<bool>> {
        let half = self.cfg.window? / 2;
        if n <= half + 1 {
            return None;
        }
        Some(
            (0..n * n)
                .map(|k| {
                    let (i, j) = (k / n, k % n);
                    i == 0 || j == 0 || i.abs_diff(j) <= half
                })
                .collect(),
        )
    }
}

impl ChunkEncoder for TinyEncoder {
    fn config(&self) -> &ChunkEncoderConfig {
        &self.cfg
    }

    fn embed_tokens(&self, g: &mut Graph, ids: &[usize]) -> Var {
        self.tokens.forward(g, ids)
    }

    fn encode_embeddings(&self, g: &mut Graph, x: Var, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let n = g.value(x).rows;
        if n > self.cfg.max_positions {
            return Err(Error::invalid(format!(
                "chunk of {n} positions exceeds max_positions {}",
                self.cfg.max_positions
            )));
        }
        let d = self.cfg.embed_dim;
        let dh = d / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = self.cfg.dropout;
        let mask = self.window_mask(n);
        let pos_ids: Vec<usize> = (0..n).collect();
        let pos = self.positions.forward(g, &pos_ids);
        let h = g.add(x, pos);
        let h = self.embed_norm.forward(g, h);
        let mut h = dropout(g, h, p, rng.as_deref_mut());
        for layer in &self.layers {
            let q = layer.query.forward(g, h);
            let k = layer.key.forward(g, h);
            let v = layer.value.forward(g, h);
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for head in 0..self.cfg.heads {
                let qh = g.slice_cols(q, head * dh, dh);
                let kh = g.slice_cols(k, head * dh, dh);
                let vh = g.slice_cols(v, head * dh, dh);
                let scores = g.matmul_t(qh, kh);
                let scores = g.scale(scores, scale);
                let weights = g.softmax_rows(scores, mask.clone());
                let weights = dropout(g, weights, p, rng.as_deref_mut());
                heads.push(g.matmul(weights, vh));
            }
            let ctx = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)
            };
            let attn = layer.attn_out.forward(g, ctx);
            let attn = dropout(g, attn, p, rng.as_deref_mut());
            let res = g.add(h, attn);
            h = layer.attn_norm.forward(g, res);
            let f = layer.ffn_in.forward(g, h);
            let f = g.gelu(f);
            let f = layer.ffn_out.forward(g, f);
            let f = dropout(g, f, p, rng.as_deref_mut());
            let res = g.add(h, f);
            h = layer.ffn_norm.forward(g, res);
        }
        Ok(h)
    }
}

/// `[CLS]` embeddings of every chunk (N×embed_dim) in evaluation mode. Only
/// unmasked positions enter the encoder, so pad ids never influence the result.
pub fn encode_chunks(cs: &ChunkSequence, encoder: &dyn ChunkEncoder, params: &ParamSet) -> Result<Matrix> {
    let cfg = encoder.config();
    if cs.chunk_len() > cfg.max_positions {
        return Err(Error::invalid(format!(
            "chunk length {} exceeds max_positions {}",
            cs.chunk_len(),
            cfg.max_positions
        )));
    }
    let rows: Vec<Vec<f64>> = (0..cs.n_chunks)
        .into_par_iter()
        .map(|i| {
            let mut g = Graph::new(params);
            let cls = encoder.cls(&mut g, cs.real_ids(i), None)?;
            Ok(g.value(cls).data.clone())
        })
        .collect::<Result<_>>()?;
    Ok(Matrix::from_rows(&rows))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionKind {
    #[serde(rename = "max")]
    MaxPool,
    #[serde(rename = "mean")]
    MeanPool,
    #[serde(rename = "lstm")]
    LstmAttention,
}

impl FusionKind {
    pub const ALL: [FusionKind; 3] = [FusionKind::MaxPool, FusionKind::MeanPool, FusionKind::LstmAttention];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::MaxPool => "max",
            FusionKind::MeanPool => "mean",
            FusionKind::LstmAttention => "lstm",
        }
    }
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown fusion {s:?} (expected max, mean or lstm)")))
    }
}

/// Reduction of the N chunk embeddings to one user vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fusion {
    pub kind: FusionKind,
    lstm: Option<(Lstm, AdditiveAttention)>,
    pub output_dim: usize,
}

impl Fusion {
    pub fn new(ps: &mut ParamSet, kind: FusionKind, input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            FusionKind::MaxPool | FusionKind::MeanPool => Fusion {
                kind,
                lstm: None,
                output_dim: input_dim,
            },
            FusionKind::LstmAttention => {
                let lstm = Lstm::new(ps, "fusion.lstm", input_dim, hidden, rng);
                let attn = AdditiveAttention::new(ps, "fusion.attention", hidden, hidden, rng);
                Fusion {
                    kind,
                    lstm: Some((lstm, attn)),
                    output_dim: hidden,
                }
            }
        }
    }

    /// Returns the fused 1×output_dim row and, for LSTM attention, the 1×N
    /// attention weights.
    pub fn forward(&self, g: &mut Graph, rows: Var) -> Result<(Var, Option<Var>)> {
        if g.value(rows).rows == 0 {
            return Err(Error::invalid("cannot fuse zero chunk embeddings"));
        }
        Ok(match (&self.kind, &self.lstm) {
            (FusionKind::MaxPool, _) => (g.max_rows(rows), None),
            (FusionKind::MeanPool, _) => (g.mean_rows(rows), None),
            (FusionKind::LstmAttention, Some((lstm, attn))) => {
                let h = lstm.forward(g, rows, false);
                let (pooled, weights) = attn.forward(g, h);
                (pooled, Some(weights))
            }
            (FusionKind::LstmAttention, None) => unreachable!("LSTM fusion is always built with its layers"),
        })
    }
}

/// Evaluates a fusion on a fixed embedding matrix.
pub fn fuse(embeddings: &Matrix, fusion: &Fusion, params: &ParamSet) -> Result<Vec<f64>> {
    let mut g = Graph::new(params);
    let rows = g.constant(embeddings.clone());
    let (out, _) = fusion.forward(&mut g, rows)?;
    Ok(g.value(out).data.clone())
}

/// Two fully connected layers, ReLU then a single logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub hidden: Linear,
    pub output: Linear,
}

impl Head {
    pub fn new(ps: &mut ParamSet, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Head {
            hidden: Linear::new(ps, "head.hidden", input, hidden, rng),
            output: Linear::new(ps, "head.output", hidden, 1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.relu(h);
        self.output.forward(g, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMode {
    /// Fine-tune the encoder on truncated inputs, then freeze it and train
    /// fusion and head on cached `[CLS]` embeddings.
    TwoStage,
    /// Train encoder, fusion and head together on full chunk sequences.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierConfig {
    pub encoder: ChunkEncoderConfig,
    pub chunking: ChunkingConfig,
    pub fusion: FusionKind,
    pub fusion_hidden: usize,
    pub head_hidden: usize,
    pub mode: TrainingMode,
    /// Learning rate for the second stage of two-stage training, where fusion
    /// and head start from random weights.
    pub fusion_learning_rate: f64,
    /// Inputs for the encoder stage of two-stage training.
    pub encoder_stage: EncoderStageData,
}

/// Single-chunk examples used to fine-tune the encoder before freezing it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderStageData {
    /// Only the head chunk of each user, exactly as the truncated model sees it.
    HeadChunk,
    /// Every chunk of each user as its own example, carrying the user's label.
    AllChunks,
}

impl HierConfig {
    pub fn tiny(vocab_size: usize, fusion: FusionKind) -> Self {
        let encoder = ChunkEncoderConfig::tiny_reference(vocab_size);
        HierConfig {
            fusion_hidden: encoder.embed_dim,
            head_hidden: encoder.embed_dim / 2,
            chunking: ChunkingConfig::new(encoder.max_positions - 2),
            encoder,
            fusion,
            mode: TrainingMode::TwoStage,
            fusion_learning_rate: 1e-3,
            encoder_stage: EncoderStageData::AllChunks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate(self.chunking.content_capacity + 2)?;
        if self.fusion_hidden == 0 || self.head_hidden == 0 {
            return Err(Error::invalid("fusion_hidden and head_hidden must be positive"));
        }
        Ok(())
    }
}

/// Input to [`HierModel`] during training: full chunk sequences, or `[CLS]`
/// embeddings precomputed by a frozen encoder.
#[derive(Clone, Debug)]
pub enum HierInput {
    Chunks(ChunkSequence),
    Cached(Matrix),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierModel {
    pub cfg: HierConfig,
    pub params: ParamSet,
    pub encoder: TinyEncoder,
    pub fusion: Fusion,
    pub head: Head,
    frozen: Option<Vec<bool>>,
}

impl HierModel {
    pub fn new(cfg: HierConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = TinyEncoder::new(cfg.encoder.clone(), &mut params, &mut rng)?;
        let fusion = Fusion::new(
            &mut params,
            cfg.fusion,
            cfg.encoder.embed_dim,
            cfg.fusion_hidden,
            &mut rng,
        );
        let head = Head::new(&mut params, fusion.output_dim, cfg.head_hidden, &mut rng);
        Ok(HierModel {
            cfg,
            params,
            encoder,
            fusion,
            head,
            frozen: None,
        })
    }

    pub fn chunk(&self, tokens: &[usize]) -> Result<ChunkSequence> {
        chunk_tokens_with(tokens, &self.cfg.chunking)
    }

    pub fn is_encoder_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    pub fn freeze_encoder(&mut self) {
        let mask = self
            .params
            .ids()
            .map(|id| self.params.name(id).starts_with(ENCODER_PREFIX))
            .collect();
        self.frozen = Some(mask);
    }

    pub fn unfreeze_encoder(&mut self) {
        self.frozen = None;
    }

    /// Copies encoder weights from a fine-tuned truncated model.
    pub fn load_encoder(&mut self, source: &TruncatedModel) -> Result<usize> {
        self.params.copy_matching(&source.params, ENCODER_PREFIX)
    }

    pub fn cls_embeddings(&self, cs: &ChunkSequence) -> Result<Matrix> {
        encode_chunks(cs, &self.encoder, &self.params)
    }

    /// Fusion and head on top of stacked `[CLS]` rows.
    pub fn logit_from_cls(&self, g: &mut Graph, rows: Var) -> Result<Var> {
        let (fused, _) = self.fusion.forward(g, rows)?;
        Ok(self.head.forward(g, fused))
    }

    pub fn chunk_rows(&self, g: &mut Graph, cs: &ChunkSequence, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let rows = (0..cs.n_chunks)
            .map(|i| self.encoder.cls(g, cs.real_ids(i), rng.as_deref_mut()))
            .collect::<Result<Vec<_>>>()?;
        Ok(if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) })
    }

    /// Attention weights over chunks for LSTM fusion.
    pub fn fusion_weights(&self, tokens: &[usize]) -> Result<Option<Vec<f64>>> {
        let cs = self.chunk(tokens)?;
        let rows = self.cls_embeddings(&cs)?;
        let mut g = Graph::new(&self.params);
        let r = g.constant(rows);
        let (_, w) = self.fusion.forward(&mut g, r)?;
        Ok(w.map(|w| g.value(w).data.clone()))
    }
}

impl Trainable for HierModel {
    type Input = HierInput;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn frozen(&self) -> Option<&[bool]> {
        self.frozen.as_deref()
    }

    fn logit(&self, g: &mut Graph, input: &HierInput, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let rows = match input {
            HierInput::Chunks(cs) => self.chunk_rows(g, cs, rng)?,
            HierInput::Cached(m) => g.constant(m.clone()),
        };
        self.logit_from_cls(g, rows)
    }
}

/// Probability of the poster class: chunk, encode, fuse, classify.
pub fn classify_user(tokens: &[usize], model: &HierModel) -> Result<f64> {
    let cs = model.chunk(tokens)?;
    let rows = model.cls_embeddings(&cs)?;
    let mut g = Graph::new(&model.params);
    let r = g.constant(rows);
    let z = model.logit_from_cls(&mut g, r)?;
    Ok(sigmoid(g.scalar(z)))
}

/// Encoder plus head on the first `capacity` tokens only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncatedModel {
    pub encoder_cfg: ChunkEncoderConfig,
    pub capacity: usize,
    pub params: ParamSet,
    pub encoder: TinyEncoder,
    pub head: Head,
}

impl TruncatedModel {
    pub fn new(encoder_cfg: ChunkEncoderConfig, head_hidden: usize, seed: u64) -> Result<Self> {
        let capacity = encoder_cfg.max_positions - 2;
        encoder_cfg.validate(capacity + 2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = TinyEncoder::new(encoder_cfg.clone(), &mut params, &mut rng)?;
        let head = Head::new(&mut params, encoder_cfg.embed_dim, head_hidden, &mut rng);
        Ok(TruncatedModel {
            encoder_cfg,
            capacity,
            params,
            encoder,
            head,
        })
    }

    /// `[CLS]`, the head of the stream, `[SEP]`.
    pub fn input_ids(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        let mut ids = Vec::with_capacity(self.capacity + 2);
        ids.push(WordVocab::CLS);
        ids.extend(truncate_head(tokens, self.capacity));
        ids.push(WordVocab::SEP);
        Ok(ids)
    }

    pub fn predict_proba(&self, tokens: &[usize]) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let z = self.logit(&mut g, &tokens.to_vec(), None)?;
        Ok(sigmoid(g.scalar(z)))
    }
}

impl Trainable for TruncatedModel {
    type Input = Vec<usize>;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn logit(&self, g: &mut Graph, input: &Vec<usize>, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let ids = self.input_ids(input)?;
        let cls = self.encoder.cls(g, &ids, rng)?;
        Ok(self.head.forward(g, cls))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierTrainReport {
    /// Fine-tuning of the encoder on truncated inputs (two-stage mode only).
    pub encoder_stage: Option<TrainOutcome>,
    pub fusion_stage: TrainOutcome,
}

fn chunk_all(model: &HierModel, data: &Examples<Vec<usize>>) -> Result<Vec<ChunkSequence>> {
    data.inputs.par_iter().map(|t| model.chunk(t)).collect()
}

/// Trains a hierarchical model on token-id streams according to `cfg.mode`.
pub fn train_hierarchical(
    cfg: &HierConfig,
    train: &Examples<Vec<usize>>,
    valid: &Examples<Vec<usize>>,
    tc: &TrainConfig,
    seed: u64,
) -> Result<(HierModel, HierTrainReport)> {
    let mut model = HierModel::new(cfg.clone(), seed)?;
    match cfg.mode {
        TrainingMode::Joint => {
            let wrap = |d: &Examples<Vec<usize>>| -> Result<Examples<HierInput>> {
                let cs = chunk_all(&model, d)?;
                Examples::new(cs.into_iter().map(HierInput::Chunks).collect(), d.labels.clone())
            };
            let (tr, va) = (wrap(train)?, wrap(valid)?);
            let outcome = train_with_early_stopping(&mut model, &tr, &va, tc, seed)?;
            Ok((
                model,
                HierTrainReport {
                    encoder_stage: None,
                    fusion_stage: outcome,
                },
            ))
        }
        TrainingMode::TwoStage => {
            let (trunc, stage1) = match cfg.encoder_stage {
                EncoderStageData::HeadChunk => train_truncated(&cfg.encoder, cfg.head_hidden, train, valid, tc, seed)?,
                EncoderStageData::AllChunks => {
                    let explode = |d: &Examples<Vec<usize>>| -> Result<Examples<Vec<usize>>> {
                        let mut inputs = Vec::new();
                        let mut labels = Vec::new();
                        for (cs, &label) in chunk_all(&model, d)?.iter().zip(&d.labels) {
                            for i in 0..cs.n_chunks {
                                inputs.push(cs.content(i).to_vec());
                                labels.push(label);
                            }
                        }
                        Examples::new(inputs, labels)
                    };
                    train_truncated(
                        &cfg.encoder,
                        cfg.head_hidden,
                        &explode(train)?,
                        &explode(valid)?,
                        tc,
                        seed,
                    )?
                }
            };
            model.load_encoder(&trunc)?;
            model.freeze_encoder();
            let cache = |d: &Examples<Vec<usize>>| -> Result<Examples<HierInput>> {
                let rows = chunk_all(&model, d)?
                    .iter()
                    .map(|cs| Ok(HierInput::Cached(model.cls_embeddings(cs)?)))
                    .collect::<Result<Vec<_>>>()?;
                Examples::new(rows, d.labels.clone())
            };
            let (tr, va) = (cache(train)?, cache(valid)?);
            let stage2_cfg = TrainConfig {
                learning_rate: cfg.fusion_learning_rate,
                ..tc.clone()
            };
            let outcome = train_with_early_stopping(&mut model, &tr, &va, &stage2_cfg, seed)?;
            Ok((
                model,
                HierTrainReport {
                    encoder_stage: Some(stage1),
                    fusion_stage: outcome,
                },
            ))
        }
    }
}

pub fn train_truncated(
    encoder: &ChunkEncoderConfig,
    head_hidden: usize,
    train: &Examples<Vec<usize>>,
    valid: &Examples<Vec<usize>>,
    tc: &TrainConfig,
    seed: u64,
) -> Result<(TruncatedModel, TrainOutcome)> {
    let mut model = TruncatedModel::new(encoder.clone(), head_hidden, seed)?;
    let cut = |d: &Examples<Vec<usize>>| {
        Examples::new(
            d.inputs.iter().map(|t| truncate_head(t, model.capacity)).collect(),
            d.labels.clone(),
        )
    };
    let (tr, va) = (cut(train)?, cut(valid)?);
    let outcome = train_with_early_stopping(&mut model, &tr, &va, tc, seed)?;
    Ok((model, outcome))
}
