use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use regex::Regex;

use super::emoji::EmojiTable;
use super::Normalizer;
use crate::error::{Error, Result};

const BUNDLED_T2S: &str = include_str!("../../resources/t2s.tsv");
const BUNDLED_WORDS: &str = include_str!("../../resources/zh_words.txt");

/// Single-codepoint traditional to simplified Chinese mapping.
///
/// Parsing rejects anything that is not a function on codepoints, and any
/// entry whose target is itself a key, so applying the mapping twice equals
/// applying it once.
#[derive(Clone, Debug)]
pub struct TradToSimplified {
    map: HashMap<char, char>,
}

impl TradToSimplified {
    pub fn bundled() -> &'static TradToSimplified {
        static TABLE: OnceLock<TradToSimplified> = OnceLock::new();
        TABLE.get_or_init(|| TradToSimplified::parse(BUNDLED_T2S).expect("bundled t2s table is valid"))
    }

    pub fn from_path(path: &Path) -> Result<TradToSimplified> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TradToSimplified::parse(&text)
    }

    pub fn parse(text: &str) -> Result<TradToSimplified> {
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse { line: i + 1, message };
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected two tab-separated columns".into()))?;
            let single = |s: &str| {
                let mut it = s.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Some(c),
                    _ => None,
                }
            };
            let (k, v) = match (single(k), single(v)) {
                (Some(k), Some(v)) => (k, v),
                _ => return Err(bad(format!("{line:?} is not a single-codepoint pair"))),
            };
            if let Some(prev) = map.insert(k, v) {
                if prev != v {
                    return Err(bad(format!("{k} maps to both {prev} and {v}")));
                }
            }
        }
        let targets: HashSet<char> = map.values().copied().collect();
        if let Some(k) = map.keys().find(|k| targets.contains(k)) {
            return Err(Error::invalid(format!(
                "{k} is both a source and a target of the mapping"
            )));
        }
        Ok(TradToSimplified { map })
    }

    pub fn map_char(&self, c: char) -> char {
        self.map.get(&c).copied().unwrap_or(c)
    }

    pub fn convert(&self, text: &str) -> String {
        text.chars().map(|c| self.map_char(c)).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = (char, char)> + '_ {
        self.map.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Word segmentation injection point. Implementations must be safe for
/// concurrent read-only use.
pub trait Segmenter: Send + Sync {
    fn segment(&self, text: &str) -> Vec<String>;
}

fn is_han(c: char) -> bool {
    matches!(c,
        '\u{3400}'..='\u{4DBF}'
        | '\u{4E00}'..='\u{9FFF}'
        | '\u{F900}'..='\u{FAFF}'
        | '\u{20000}'..='\u{2FA1F}')
}

fn run_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?P<han>[\p{Han}]+)|(?P<word>[^\p{Han}\s\p{P}\p{S}]+(?:['’\-][^\p{Han}\s\p{P}\p{S}]+)*)|(?P<other>[^\s])",
        )
        .expect("segment regex compiles")
    })
}

/// Greedy forward longest-match over a word list; characters not covered
/// by any dictionary word become single-character words. Non-Chinese runs are
/// split on whitespace and punctuation and kept as they are.
#[derive(Clone, Debug)]
pub struct DictSegmenter {
    words: HashSet<String>,
    max_len: usize,
}

impl DictSegmenter {
    pub fn bundled() -> Arc<DictSegmenter> {
        static SEG: OnceLock<Arc<DictSegmenter>> = OnceLock::new();
        SEG.get_or_init(|| Arc::new(DictSegmenter::from_words(BUNDLED_WORDS.lines())))
            .clone()
    }

    pub fn from_words<I, S>(words: I) -> DictSegmenter
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let words: HashSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().trim().to_string())
            .filter(|w| !w.is_empty())
            .collect();
        let max_len = words.iter().map(|w| w.chars().count()).max().unwrap_or(1);
        DictSegmenter { words, max_len }
    }

    fn segment_han(&self, run: &str, out: &mut Vec<String>) {
        let chars: Vec<char> = run.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let longest = (2..=self.max_len.min(chars.len() - i))
                .rev()
                .find(|&len| self.words.contains(&chars[i..i + len].iter().collect::<String>()))
                .unwrap_or(1);
            out.push(chars[i..i + longest].iter().collect());
            i += longest;
        }
    }
}

impl Segmenter for DictSegmenter {
    fn segment(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for caps in run_regex().captures_iter(text) {
            if let Some(han) = caps.name("han") {
                // \p{Han} also covers radicals outside the ranges `is_han` treats as words.
                if han.as_str().chars().all(is_han) {
                    self.segment_han(han.as_str(), &mut out);
                } else {
                    out.extend(han.as_str().chars().map(String::from));
                }
            } else {
                out.push(caps[0].to_string());
            }
        }
        out
    }
}

/// Weibo post normalization: traditional to simplified, segmentation, emoji
/// names, and lowercasing of embedded Latin script.
#[derive(Clone)]
pub struct WeiboNormalizer {
    pub t2s: &'static TradToSimplified,
    pub segmenter: Arc<dyn Segmenter>,
    pub emoji: &'static EmojiTable,
}

impl Default for WeiboNormalizer {
    fn default() -> Self {
        WeiboNormalizer {
            t2s: TradToSimplified::bundled(),
            segmenter: DictSegmenter::bundled(),
            emoji: EmojiTable::bundled(),
        }
    }
}

impl WeiboNormalizer {
    pub fn with_segmenter(segmenter: Arc<dyn Segmenter>) -> Self {
        WeiboNormalizer {
            segmenter,
            ..Default::default()
        }
    }
}

impl Normalizer for WeiboNormalizer {
    fn normalize(&self, text: &str) -> Vec<String> {
        let stripped: String = text.chars().filter(|&c| !EmojiTable::is_modifier(c)).collect();
        let simplified = self.t2s.convert(&stripped);
        let mut out = Vec::new();
        for tok in self.segmenter.segment(&simplified) {
            let mut chars = tok.chars();
            if let (Some(c), None) = (chars.next(), chars.next()) {
                if let Some(name) = self.emoji.name(c) {
                    out.push(name.to_string());
                    continue;
                }
            }
            out.push(tok.to_lowercase());
        }
        out
    }
}

/// Normalizes a Weibo post with the bundled tables and the given segmenter.
pub fn normalize_weibo_post(text: &str, segmenter: Arc<dyn Segmenter>) -> Vec<String> {
    WeiboNormalizer::with_segmenter(segmenter).normalize(text)
}
