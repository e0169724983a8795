use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};

const BUNDLED: &str = include_str!("../../resources/emoji_names.tsv");

/// Emoji codepoint to colon-delimited lowercase name, e.g. `😀` to `:grinning_face:`.
#[derive(Clone, Debug)]
pub struct EmojiTable {
    names: HashMap<char, String>,
}

impl EmojiTable {
    pub fn bundled() -> &'static EmojiTable {
        static TABLE: OnceLock<EmojiTable> = OnceLock::new();
        TABLE.get_or_init(|| EmojiTable::parse(BUNDLED).expect("bundled emoji table is valid"))
    }

    pub fn from_path(path: &Path) -> Result<EmojiTable> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        EmojiTable::parse(&text)
    }

    pub fn parse(text: &str) -> Result<EmojiTable> {
        let mut names = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |message: &str| Error::Parse {
                line: i + 1,
                message: message.to_string(),
            };
            let (key, name) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected two tab-separated columns"))?;
            let mut chars = key.chars();
            let c = chars.next().ok_or_else(|| bad("empty emoji column"))?;
            if chars.next().is_some() {
                return Err(bad("emoji column must be a single codepoint"));
            }
            if !(name.len() > 2 && name.starts_with(':') && name.ends_with(':')) || name.contains(char::is_whitespace) {
                return Err(bad("emoji name must be a colon-delimited single word"));
            }
            names.insert(c, name.to_string());
        }
        Ok(EmojiTable { names })
    }

    pub fn name(&self, c: char) -> Option<&str> {
        self.names.get(&c).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Variation selectors, skin-tone modifiers and the zero-width joiner carry no token of their own.
    pub fn is_modifier(c: char) -> bool {
        matches!(
            c,
            '\u{FE0E}' | '\u{FE0F}' | '\u{200D}' | '\u{20E3}' | '\u{1F3FB}'..='\u{1F3FF}'
        )
    }
}
