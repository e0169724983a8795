//! Bag-of-words vocabularies, TF-IDF and count matrices, and lexicon-category features.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::preprocess::NormalizedHistory;

/// What `min_count` is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountBasis {
    /// Total occurrences across all users.
    Corpus,
    /// Number of users using the term.
    Document,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub ngram_max: usize,
    /// A term must occur strictly more often than this.
    pub min_count: usize,
    pub min_count_basis: CountBasis,
    pub max_df_ratio: f64,
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            ngram_max: 1,
            min_count: 5,
            min_count_basis: CountBasis::Corpus,
            max_df_ratio: 0.40,
            max_size: 10_000,
        }
    }
}

/// N-gram vocabulary ordered by corpus frequency (descending, ties lexicographic).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub terms: Vec<String>,
    pub doc_freq: Vec<usize>,
    pub term_freq: Vec<usize>,
    /// Number of users the vocabulary was built from.
    pub n_docs: usize,
    pub ngram_max: usize,
    #[serde(skip)]
    index: OnceLock<HashMap<String, usize>>,
}

impl Vocabulary {
    pub fn new(
        terms: Vec<String>,
        doc_freq: Vec<usize>,
        term_freq: Vec<usize>,
        n_docs: usize,
        ngram_max: usize,
    ) -> Result<Self> {
        if terms.len() != doc_freq.len() || terms.len() != term_freq.len() {
            return Err(Error::invalid("vocabulary columns differ in length"));
        }
        if terms.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        Ok(Vocabulary {
            terms,
            doc_freq,
            term_freq,
            n_docs,
            ngram_max,
            index: OnceLock::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn get(&self, term: &str) -> Option<usize> {
        self.index
            .get_or_init(|| self.terms.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect())
            .get(term)
            .copied()
    }

    /// Smoothed inverse document frequency, ln((1+N)/(1+df)) + 1.
    pub fn idf(&self, col: usize) -> f64 {
        ((1.0 + self.n_docs as f64) / (1.0 + self.doc_freq[col] as f64)).ln() + 1.0
    }

    /// Hex SHA-256 over the ordered terms and their document frequencies.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("ngram_max={}\nn_docs={}\n", self.ngram_max, self.n_docs));
        for (t, df) in self.terms.iter().zip(&self.doc_freq) {
            h.update(format!("{t}\t{df}\n"));
        }
        hex::encode(h.finalize())
    }
}

/// Word-level token ids for the neural models. Ids 0..4 are reserved for the
/// special tokens, the rest follow corpus frequency (descending, ties
/// lexicographic).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordVocab {
    pub tokens: Vec<String>,
    #[serde(skip)]
    index: OnceLock<HashMap<String, usize>>,
}

impl WordVocab {
    pub const UNK: usize = 0;
    pub const PAD: usize = 1;
    pub const CLS: usize = 2;
    pub const SEP: usize = 3;
    pub const SPECIALS: [&'static str; 4] = ["[UNK]", "[PAD]", "[CLS]", "[SEP]"];

    /// Keeps tokens seen at least `min_count` times, up to `max_size` ids in total.
    pub fn build(histories: &[NormalizedHistory], min_count: usize, max_size: usize) -> Result<WordVocab> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for h in histories {
            for t in &h.tokens {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, n)| n >= min_count && !Self::SPECIALS.contains(&t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let room = max_size.saturating_sub(Self::SPECIALS.len());
        let tokens = Self::SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(room).map(|(t, _)| t.to_string()))
            .collect::<Vec<_>>();
        if tokens.len() == Self::SPECIALS.len() {
            return Err(Error::EmptyVocabulary);
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn from_tokens(tokens: Vec<String>) -> WordVocab {
        WordVocab {
            tokens,
            index: OnceLock::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index
            .get_or_init(|| self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect())
            .get(token)
            .copied()
            .unwrap_or(Self::UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(Self::SPECIALS[Self::UNK], String::as_str)
    }

    /// Hex SHA-256 over the id-ordered token list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Counts the n-grams (orders 1..=`ngram_max`) of one history. N-grams do not
/// span post boundaries.
pub fn ngram_counts(history: &NormalizedHistory, ngram_max: usize) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    let n_tok = history.tokens.len();
    let mut bounds = history.post_boundaries.clone();
    if bounds.first() != Some(&0) {
        bounds.insert(0, 0);
    }
    bounds.push(n_tok);
    for w in bounds.windows(2) {
        let post = &history.tokens[w[0]..w[1]];
        for n in 1..=ngram_max.max(1) {
            for gram in post.windows(n) {
                *counts.entry(gram.join(" ")).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Builds the vocabulary: frequency above `min_count`, user share at most
/// `max_df_ratio`, then the `max_size` most frequent terms.
pub fn build_vocabulary(histories: &[NormalizedHistory], cfg: &VocabConfig) -> Result<Vocabulary> {
    if histories.len() < 2 {
        return Err(Error::invalid("need at least two histories to build a vocabulary"));
    }
    if cfg.ngram_max == 0 || cfg.ngram_max > 3 {
        return Err(Error::invalid("ngram_max must be 1, 2 or 3"));
    }
    let per_user: Vec<HashMap<String, usize>> = histories.par_iter().map(|h| ngram_counts(h, cfg.ngram_max)).collect();
    let mut totals: HashMap<&str, (usize, usize)> = HashMap::new();
    for counts in &per_user {
        for (term, &c) in counts {
            let e = totals.entry(term.as_str()).or_insert((0, 0));
            e.0 += c;
            e.1 += 1;
        }
    }
    let n = histories.len() as f64;
    let mut kept: Vec<(&str, usize, usize)> = totals
        .into_iter()
        .filter(|&(_, (tf, df))| {
            let basis = match cfg.min_count_basis {
                CountBasis::Corpus => tf,
                CountBasis::Document => df,
            };
            basis > cfg.min_count && df as f64 / n <= cfg.max_df_ratio
        })
        .map(|(t, (tf, df))| (t, tf, df))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    kept.truncate(cfg.max_size);
    if kept.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    Vocabulary::new(
        kept.iter().map(|k| k.0.to_string()).collect(),
        kept.iter().map(|k| k.2).collect(),
        kept.iter().map(|k| k.1).collect(),
        histories.len(),
        cfg.ngram_max,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    L2,
    RelativeFreq,
    None,
}

/// Sparse user-by-feature matrix. Each row holds `(column, value)` pairs in
/// ascending column order with no explicit zeros.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub row_ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub normalization: Normalization,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.feature_names.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let r = &self.rows[row];
        r.binary_search_by_key(&col, |&(c, _)| c).map(|i| r[i].1).unwrap_or(0.0)
    }

    pub fn dense_row(&self, row: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols()];
        for &(c, v) in &self.rows[row] {
            out[c] = v;
        }
        out
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n_rows()).map(|r| self.dense_row(r)).collect()
    }

    /// Column-major dense copy: `columns()[j][i]` is row i of feature j.
    pub fn columns(&self) -> Vec<Vec<f64>> {
        let mut cols = vec![vec![0.0; self.n_rows()]; self.n_cols()];
        for (i, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                cols[c][i] = v;
            }
        }
        cols
    }

    /// Sparse triplet export: header `user_id,feature,value`.
    pub fn write_triplets<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["user_id", "feature", "value"])?;
        for (id, row) in self.row_ids.iter().zip(&self.rows) {
            for &(c, v) in row {
                w.write_record([id.as_str(), self.feature_names[c].as_str(), &format!("{v}")])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    /// Feature-name index export: header `index,feature`.
    pub fn write_feature_index<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "feature"])?;
        for (i, name) in self.feature_names.iter().enumerate() {
            w.write_record([i.to_string().as_str(), name.as_str()])?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

fn vocab_counts(history: &NormalizedHistory, vocab: &Vocabulary) -> Vec<(usize, f64)> {
    let mut row: Vec<(usize, f64)> = ngram_counts(history, vocab.ngram_max)
        .into_iter()
        .filter_map(|(t, c)| vocab.get(&t).map(|col| (col, c as f64)))
        .collect();
    row.sort_by_key(|&(c, _)| c);
    row
}

/// Raw-count TF times smoothed IDF, then per-row L2 normalization. Terms
/// outside the vocabulary are ignored; a user with none gets an all-zero row.
pub fn tfidf_vectorize(histories: &[NormalizedHistory], vocab: &Vocabulary) -> FeatureMatrix {
    let rows = histories
        .par_iter()
        .map(|h| {
            let mut row = vocab_counts(h, vocab);
            for (c, v) in row.iter_mut() {
                *v *= vocab.idf(*c);
            }
            let norm = row.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (_, v) in row.iter_mut() {
                    *v /= norm;
                }
            }
            row
        })
        .collect();
    FeatureMatrix {
        row_ids: histories.iter().map(|h| h.user_id.clone()).collect(),
        feature_names: vocab.terms.clone(),
        rows,
        normalization: Normalization::L2,
    }
}

/// In-vocabulary n-gram counts, optionally scaled to relative frequencies.
pub fn count_vectorize(
    histories: &[NormalizedHistory],
    vocab: &Vocabulary,
    normalization: Normalization,
) -> FeatureMatrix {
    let rows = histories
        .par_iter()
        .map(|h| {
            let mut row = vocab_counts(h, vocab);
            match normalization {
                Normalization::None => {}
                Normalization::RelativeFreq => {
                    let total: f64 = row.iter().map(|(_, v)| v).sum();
                    if total > 0.0 {
                        row.iter_mut().for_each(|(_, v)| *v /= total);
                    }
                }
                Normalization::L2 => {
                    let norm = row.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        row.iter_mut().for_each(|(_, v)| *v /= norm);
                    }
                }
            }
            row
        })
        .collect();
    FeatureMatrix {
        row_ids: histories.iter().map(|h| h.user_id.clone()).collect(),
        feature_names: vocab.terms.clone(),
        rows,
        normalization,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pattern {
    Exact(String),
    /// Written with a trailing `*`.
    Prefix(String),
}

impl Pattern {
    pub fn parse(s: &str) -> Result<Pattern> {
        match s.strip_suffix('*') {
            Some("") => Err(Error::invalid("pattern '*' has an empty prefix")),
            Some(p) => Ok(Pattern::Prefix(p.to_string())),
            None if s.is_empty() => Err(Error::invalid("empty pattern")),
            None => Ok(Pattern::Exact(s.to_string())),
        }
    }

    pub fn matches(&self, token: &str) -> bool {
        match self {
            Pattern::Exact(w) => w == token,
            Pattern::Prefix(p) => token.starts_with(p.as_str()),
        }
    }
}

const BUNDLED_LEXICON: &str = include_str!("../resources/lexicon.tsv");

/// Category to word/prefix-pattern lists in the LIWC style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub categories: Vec<(String, Vec<Pattern>)>,
}

impl Lexicon {
    pub fn new(categories: Vec<(String, Vec<Pattern>)>) -> Result<Lexicon> {
        if categories.is_empty() {
            return Err(Error::invalid("lexicon has no categories"));
        }
        let mut seen = BTreeMap::new();
        for (name, patterns) in &categories {
            if seen.insert(name.as_str(), ()).is_some() {
                return Err(Error::invalid(format!("duplicate lexicon category {name:?}")));
            }
            if patterns.is_empty() {
                return Err(Error::invalid(format!("lexicon category {name:?} has no patterns")));
            }
        }
        Ok(Lexicon { categories })
    }

    /// `category<TAB>pattern1 pattern2 ...`; `#` starts a comment line.
    pub fn parse_tsv(text: &str) -> Result<Lexicon> {
        let mut categories = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected category<TAB>patterns".into(),
            })?;
            let patterns = rest
                .split_whitespace()
                .map(Pattern::parse)
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            categories.push((name.trim().to_string(), patterns));
        }
        Lexicon::new(categories)
    }

    pub fn from_path(path: &Path) -> Result<Lexicon> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Lexicon::parse_tsv(&text)
    }

    /// The small open stand-in lexicon shipped with the crate.
    pub fn bundled() -> Lexicon {
        Lexicon::parse_tsv(BUNDLED_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn names(&self) -> Vec<String> {
        self.categories.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Categories hit by a token, each at most once.
    pub fn categories_of(&self, token: &str) -> Vec<usize> {
        self.categories
            .iter()
            .enumerate()
            .filter(|(_, (_, pats))| pats.iter().any(|p| p.matches(token)))
            .map(|(i, _)| i)
            .collect()
    }
}

/// cell(u, c) = tokens of u hitting category c / all tokens of u.
pub fn lexicon_vectorize(histories: &[NormalizedHistory], lex: &Lexicon) -> FeatureMatrix {
    let rows = histories
        .par_iter()
        .map(|h| {
            let mut distinct: HashMap<&str, usize> = HashMap::new();
            for t in &h.tokens {
                *distinct.entry(t.as_str()).or_insert(0) += 1;
            }
            let mut hits = vec![0usize; lex.categories.len()];
            for (tok, n) in distinct {
                for c in lex.categories_of(tok) {
                    hits[c] += n;
                }
            }
            let total = h.tokens.len() as f64;
            hits.into_iter()
                .enumerate()
                .filter(|&(_, n)| n > 0)
                .map(|(c, n)| (c, n as f64 / total))
                .collect()
        })
        .collect();
    FeatureMatrix {
        row_ids: histories.iter().map(|h| h.user_id.clone()).collect(),
        feature_names: lex.names(),
        rows,
        normalization: Normalization::None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_vocab_reserves_specials() {
        let h = vec![hist("a", "b a a c"), hist("b", "a b")];
        let v = WordVocab::build(&h, 2, 100).unwrap();
        assert_eq!(v.tokens, ["[UNK]", "[PAD]", "[CLS]", "[SEP]", "a", "b"]);
        assert_eq!(v.encode(&["b".into(), "zzz".into()]), [5, WordVocab::UNK]);
        assert_eq!(v.fingerprint().len(), 64);
        let small = WordVocab::build(&h, 1, 5).unwrap();
        assert_eq!(small.len(), 5);
    }

    fn hist(id: &str, text: &str) -> NormalizedHistory {
        NormalizedHistory {
            user_id: id.into(),
            tokens: text.split_whitespace().map(String::from).collect(),
            post_boundaries: vec![0],
        }
    }

    #[test]
    fn tfidf_worked_example() {
        let hs = vec![hist("d1", "a b"), hist("d2", "a")];
        let vocab = Vocabulary::new(vec!["a".into(), "b".into()], vec![2, 1], vec![2, 1], 2, 1).unwrap();
        assert!((vocab.idf(0) - 1.0).abs() < 1e-12);
        assert!((vocab.idf(1) - (1.5f64.ln() + 1.0)).abs() < 1e-12);
        let m = tfidf_vectorize(&hs, &vocab);
        let row = m.dense_row(0);
        assert!((row[0] - 0.5797).abs() < 1e-4, "{row:?}");
        assert!((row[1] - 0.8148).abs() < 1e-4, "{row:?}");
        assert_eq!(m.dense_row(1), vec![1.0, 0.0]);
    }

    #[test]
    fn tfidf_zero_row_for_oov_user() {
        let vocab = Vocabulary::new(vec!["a".into()], vec![1], vec![1], 2, 1).unwrap();
        let m = tfidf_vectorize(&[hist("u", "zzz yyy")], &vocab);
        assert!(m.rows[0].is_empty());
    }

    #[test]
    fn identical_users_identical_rows() {
        let hs: Vec<_> = (0..4).map(|i| hist(&format!("u{i}"), "a b b c")).collect();
        let vocab = Vocabulary::new(vec!["b".into(), "a".into()], vec![4, 4], vec![8, 4], 4, 1).unwrap();
        let m = tfidf_vectorize(&hs, &vocab);
        assert!(m.rows.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn vocabulary_respects_max_df() {
        // 41 of 100 users use "common" (six times each); 40 use "edge".
        let hs: Vec<_> = (0..100)
            .map(|i| {
                let mut text = String::from("filler");
                if i < 41 {
                    text.push_str(" common common common common common common");
                }
                if i < 40 {
                    text.push_str(" edge edge edge edge edge edge");
                }
                hist(&format!("u{i}"), &text)
            })
            .collect();
        let cfg = VocabConfig {
            max_df_ratio: 0.40,
            ..Default::default()
        };
        let v = build_vocabulary(&hs, &cfg).unwrap();
        assert!(v.get("common").is_none());
        assert!(v.get("edge").is_some());
        assert!(v.get("filler").is_none());
    }

    #[test]
    fn vocabulary_min_count_is_strict() {
        let mut hs: Vec<_> = (0..5).map(|i| hist(&format!("u{i}"), "five six")).collect();
        hs.extend((5..20).map(|i| hist(&format!("u{i}"), "pad")));
        hs[0].tokens.push("six".into());
        let cfg = VocabConfig {
            max_df_ratio: 1.0,
            ..Default::default()
        };
        let v = build_vocabulary(&hs, &cfg).unwrap();
        assert!(v.get("five").is_none());
        assert!(v.get("six").is_some());
    }

    #[test]
    fn vocabulary_size_cap_drops_least_frequent() {
        let mut tokens = Vec::new();
        for i in 0..10_001usize {
            let reps = if i == 10_000 { 6 } else { 7 };
            for _ in 0..reps {
                tokens.push(format!("t{i:05}"));
            }
        }
        let h1 = NormalizedHistory {
            user_id: "a".into(),
            tokens,
            post_boundaries: vec![0],
        };
        let h2 = hist("b", "other");
        let cfg = VocabConfig {
            max_df_ratio: 1.0,
            ..Default::default()
        };
        let v = build_vocabulary(&[h1, h2], &cfg).unwrap();
        assert_eq!(v.len(), 10_000);
        assert!(v.get("t10000").is_none());
        assert_eq!(v.terms[0], "t00000");
    }

    #[test]
    fn vocabulary_empty_is_error() {
        let hs = vec![hist("a", "x"), hist("b", "y")];
        assert!(matches!(
            build_vocabulary(&hs, &VocabConfig::default()),
            Err(Error::EmptyVocabulary)
        ));
    }

    #[test]
    fn bigrams_do_not_cross_posts() {
        let h = NormalizedHistory {
            user_id: "u".into(),
            tokens: ["this", "morning", "again"].iter().map(|s| s.to_string()).collect(),
            post_boundaries: vec![0, 2],
        };
        let c = ngram_counts(&h, 2);
        assert_eq!(c.get("this morning"), Some(&1));
        assert_eq!(c.get("morning again"), None);
    }

    #[test]
    fn lexicon_ratio_and_prefix() {
        let lex = Lexicon::new(vec![
            (
                "posemo".into(),
                vec![Pattern::Exact("happy".into()), Pattern::parse("ador*").unwrap()],
            ),
            ("negemo".into(), vec![Pattern::Exact("sad".into())]),
        ])
        .unwrap();
        let m = lexicon_vectorize(&[hist("u", "happy sad"), hist("v", "adorable x y z")], &lex);
        assert_eq!(m.get(0, 0), 0.5);
        assert_eq!(m.get(0, 1), 0.5);
        assert_eq!(m.get(1, 0), 0.25);
    }

    #[test]
    fn lexicon_rejects_empty_category() {
        assert!(Lexicon::new(vec![("x".into(), vec![])]).is_err());
        assert!(Lexicon::parse_tsv("x\t\n").is_err());
        assert!(Lexicon::parse_tsv("x\ta\nx\tb\n").is_err());
        assert!(Pattern::parse("*").is_err());
    }

    #[test]
    fn bundled_lexicon_loads() {
        let lex = Lexicon::bundled();
        assert!(lex.categories.len() >= 10);
    }

    #[test]
    fn triplet_export() {
        let vocab = Vocabulary::new(vec!["a".into(), "b".into()], vec![2, 1], vec![2, 1], 2, 1).unwrap();
        let m = count_vectorize(&[hist("d1", "a b b")], &vocab, Normalization::None);
        let mut buf = Vec::new();
        m.write_triplets(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "user_id,feature,value\nd1,a,1\nd1,b,2\n"
        );
    }
}
