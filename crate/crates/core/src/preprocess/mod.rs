//! Platform-specific text normalization and per-user token streams.

mod chinese;
mod emoji;
mod tweet;

pub use chinese::{normalize_weibo_post, DictSegmenter, Segmenter, TradToSimplified, WeiboNormalizer};
pub use emoji::EmojiTable;
pub use tweet::{is_mention_like, is_url_like, normalize_tweet, TweetNormalizer, HTTPURL, USER};

use serde::{Deserialize, Serialize};

use crate::corpus::{Platform, UserRecord};
use crate::error::{Error, Result};

/// Turns one post into tokens.
pub trait Normalizer: Send + Sync {
    fn normalize(&self, text: &str) -> Vec<String>;
}

/// A user's posts normalized and concatenated in stored order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedHistory {
    pub user_id: String,
    pub tokens: Vec<String>,
    /// Index of the first token of each surviving post.
    pub post_boundaries: Vec<usize>,
}

impl NormalizedHistory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// The bundled normalizer for a platform.
pub fn normalizer_for(platform: Platform) -> Box<dyn Normalizer> {
    match platform {
        Platform::Twitter => Box::new(TweetNormalizer::default()),
        Platform::Weibo => Box::new(WeiboNormalizer::default()),
    }
}

/// Posts that normalize to nothing are skipped and get no boundary.
pub fn concatenate_history(user: &UserRecord, normalizer: &dyn Normalizer) -> Result<NormalizedHistory> {
    let mut tokens = Vec::new();
    let mut post_boundaries = Vec::new();
    for post in &user.posts {
        let toks = normalizer.normalize(&post.text);
        if toks.is_empty() {
            continue;
        }
        post_boundaries.push(tokens.len());
        tokens.extend(toks);
    }
    if tokens.is_empty() {
        return Err(Error::invalid(format!(
            "user {:?} has no tokens after normalization",
            user.user_id
        )));
    }
    Ok(NormalizedHistory {
        user_id: user.user_id.clone(),
        tokens,
        post_boundaries,
    })
}
