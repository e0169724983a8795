use std::sync::OnceLock;

use regex::Regex;

use super::emoji::EmojiTable;
use super::Normalizer;

pub const HTTPURL: &str = "HTTPURL";
pub const USER: &str = "@USER";

const URL_PATTERN: &str = r"(?i:https?://\S+|www\.\S+|\b[a-z0-9][a-z0-9\-]*(?:\.[a-z0-9\-]+)*\.(?:com|org|net|gov|edu|co|io|ly|me|info|news|tv|us|uk|de|cn|gl|be|fr|ru|ca|au)(?:/\S*)?\b)";

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let pattern = format!(
            r"(?P<url>{URL_PATTERN})|(?P<special>HTTPURL)|(?P<emojiname>:[a-z0-9_]+:)|(?P<mention>@\w+)|(?P<hashtag>#\w+)|(?P<emoticon>[:;=][\-o\*']?[\)\]\(\[dDpP/\\\}}\{{\|])|(?P<word>\w+(?:['’\-]\w+)*)|(?P<ellipsis>\.{{2,}})|(?P<other>\S)"
        );
        Regex::new(&pattern).expect("tweet token regex compiles")
    })
}

fn url_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(URL_PATTERN).expect("url regex compiles"))
}

fn mention_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"@\w+").expect("mention regex compiles"))
}

/// True when the token still contains something that looks like a URL.
pub fn is_url_like(token: &str) -> bool {
    url_regex().is_match(token)
}

/// True for raw @-mentions; the placeholder `@USER` itself is not one.
pub fn is_mention_like(token: &str) -> bool {
    token != USER && mention_regex().is_match(token)
}

/// Tweet tokenizer with URL, mention and emoji replacement.
#[derive(Clone, Debug)]
pub struct TweetNormalizer {
    emoji: &'static EmojiTable,
}

impl Default for TweetNormalizer {
    fn default() -> Self {
        TweetNormalizer {
            emoji: EmojiTable::bundled(),
        }
    }
}

impl TweetNormalizer {
    /// Uses a caller-supplied emoji table (leaked for the process lifetime).
    pub fn with_emoji_table(table: EmojiTable) -> Self {
        TweetNormalizer {
            emoji: Box::leak(Box::new(table)),
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let text: String = text.chars().filter(|&c| !EmojiTable::is_modifier(c)).collect();
        let mut out = Vec::new();
        for caps in token_regex().captures_iter(&text) {
            if caps.name("url").is_some() || caps.name("special").is_some() {
                out.push(HTTPURL.to_string());
            } else if caps.name("mention").is_some() {
                out.push(USER.to_string());
            } else if let Some(m) = caps.name("other") {
                let c = m.as_str().chars().next().expect("non-empty match");
                match self.emoji.name(c) {
                    Some(name) => out.push(name.to_string()),
                    None => out.push(m.as_str().to_lowercase()),
                }
            } else {
                out.push(caps[0].to_lowercase());
            }
        }
        out
    }
}

impl Normalizer for TweetNormalizer {
    fn normalize(&self, text: &str) -> Vec<String> {
        self.tokenize(text)
    }
}

/// Normalizes a tweet with the bundled emoji table.
pub fn normalize_tweet(text: &str) -> Vec<String> {
    TweetNormalizer::default().tokenize(text)
}
