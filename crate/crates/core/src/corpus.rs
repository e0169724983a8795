//! Labeled user histories: ingestion, filtering, splitting, synthetic corpora
//! and descriptive statistics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class of a user. `Poster` is the positive class of every binary model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Poster,
    ActiveCitizen,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Poster, Label::ActiveCitizen];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Poster => "poster",
            Label::ActiveCitizen => "active_citizen",
        }
    }

    /// Binary target used by the sigmoid models: 1 for posters, 0 otherwise.
    pub fn target(self) -> f64 {
        match self {
            Label::Poster => 1.0,
            Label::ActiveCitizen => 0.0,
        }
    }

    pub fn from_probability(p: f64) -> Label {
        if p >= 0.5 {
            Label::Poster
        } else {
            Label::ActiveCitizen
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Poster => Label::ActiveCitizen,
            Label::ActiveCitizen => Label::Poster,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poster" => Ok(Label::Poster),
            "active_citizen" => Ok(Label::ActiveCitizen),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Platform {
    Twitter,
    Weibo,
}

impl Platform {
    /// Per-user post cap applied during filtering.
    pub fn default_max_posts(self) -> usize {
        match self {
            Platform::Twitter => 3200,
            Platform::Weibo => 2000,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Platform::Twitter => "twitter",
            Platform::Weibo => "weibo",
        }
    }
}

impl FromStr for Platform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "twitter" => Ok(Platform::Twitter),
            "weibo" => Ok(Platform::Weibo),
            other => Err(Error::invalid(format!("unknown platform {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub text: String,
    #[serde(default)]
    pub timestamp: Option<String>,
    #[serde(default)]
    pub lang: Option<String>,
    #[serde(default = "default_true")]
    pub is_original: bool,
}

fn default_true() -> bool {
    true
}

impl Post {
    pub fn new(text: impl Into<String>) -> Self {
        Post {
            text: text.into(),
            timestamp: None,
            lang: None,
            is_original: true,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.text.trim().is_empty() {
            return Err("post text is empty".into());
        }
        if matches!(&self.lang, Some(l) if l.trim().is_empty()) {
            return Err("post lang is an empty tag".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub label: Label,
    pub platform: Platform,
    #[serde(default)]
    pub verified: Option<bool>,
    pub posts: Vec<Post>,
}

impl UserRecord {
    pub fn original_post_count(&self) -> usize {
        self.posts.iter().filter(|p| p.is_original).count()
    }

    /// Whitespace token count over all posts.
    pub fn whitespace_tokens(&self) -> usize {
        self.posts.iter().map(|p| p.text.split_whitespace().count()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub users: Vec<UserRecord>,
    pub platform: Platform,
    pub provenance: String,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.users.iter().map(|u| u.label).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.users.iter().filter(|u| u.label == label).count()
    }

    pub fn user_ids(&self) -> BTreeSet<&str> {
        self.users.iter().map(|u| u.user_id.as_str()).collect()
    }

    fn with_users(&self, users: Vec<UserRecord>) -> LabeledDataset {
        LabeledDataset {
            users,
            platform: self.platform,
            provenance: self.provenance.clone(),
        }
    }

    /// Writes the dataset in the one-user-per-line JSONL format read by [`load_jsonl`].
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for user in &self.users {
            serde_json::to_writer(&mut out, user)?;
            out.write_all(b"\n").map_err(|e| Error::io("<jsonl writer>", e))?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write_jsonl(&mut out)?;
        out.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Deserialize)]
struct RawRecord {
    user_id: String,
    label: String,
    #[serde(default)]
    platform: Option<String>,
    #[serde(default)]
    verified: Option<bool>,
    posts: Vec<Post>,
}

/// Reads a JSONL dataset file.
pub fn load_jsonl(path: &Path, platform: Platform) -> Result<LabeledDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ds = parse_jsonl(BufReader::new(file), platform)?;
    ds.provenance = path.display().to_string();
    Ok(ds)
}

/// Parses JSONL records from any reader. Blank lines are skipped.
pub fn parse_jsonl<R: BufRead>(reader: R, platform: Platform) -> Result<LabeledDataset> {
    let mut users = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io("<jsonl reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let label: Label = raw.label.parse()?;
        let record_platform = match raw.platform.as_deref() {
            None => platform,
            Some(p) => p.parse().map_err(|e: Error| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?,
        };
        if record_platform != platform {
            return Err(Error::Parse {
                line: lineno,
                message: format!(
                    "record platform {} does not match dataset platform {}",
                    record_platform.as_str(),
                    platform.as_str()
                ),
            });
        }
        for post in &raw.posts {
            post.validate()
                .map_err(|message| Error::Parse { line: lineno, message })?;
        }
        if !seen.insert(raw.user_id.clone()) {
            return Err(Error::DuplicateUser(raw.user_id));
        }
        let mut posts = raw.posts;
        sort_posts_by_time(&mut posts);
        users.push(UserRecord {
            user_id: raw.user_id,
            label,
            platform,
            verified: raw.verified,
            posts,
        });
    }
    if users.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(LabeledDataset {
        users,
        platform,
        provenance: String::new(),
    })
}

/// Stable ascending sort, applied only when every post carries a parseable timestamp.
fn sort_posts_by_time(posts: &mut [Post]) {
    let keys: Option<Vec<i64>> = posts
        .iter()
        .map(|p| p.timestamp.as_deref().and_then(parse_timestamp))
        .collect();
    if let Some(keys) = keys {
        let mut order: Vec<usize> = (0..posts.len()).collect();
        order.sort_by_key(|&i| keys[i]);
        let sorted: Vec<Post> = order.iter().map(|&i| posts[i].clone()).collect();
        posts.clone_from_slice(&sorted);
    }
}

fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp_millis());
    }
    chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .ok()
        .map(|dt| dt.and_utc().timestamp_millis())
        .or_else(|| {
            chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
                .map(|dt| dt.and_utc().timestamp_millis())
        })
}

/// Reads a dual-role exclusion list: one user id per line, blank lines ignored.
pub fn load_id_list(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_posts: usize,
    /// `None` means the platform default (2,000 Weibo, 3,200 Twitter).
    pub max_posts: Option<usize>,
    pub drop_dual_role: bool,
    #[serde(default)]
    pub dual_role_ids: BTreeSet<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_posts: 30,
            max_posts: None,
            drop_dual_role: true,
            dual_role_ids: BTreeSet::new(),
        }
    }
}

/// Keeps original posts only, truncates each history to its `max_posts` most
/// recent posts, and drops users below `min_posts` or on the dual-role list.
pub fn filter_users(ds: &LabeledDataset, cfg: &FilterConfig) -> Result<LabeledDataset> {
    if cfg.min_posts < 1 {
        return Err(Error::invalid("min_posts must be at least 1"));
    }
    let max_posts = cfg.max_posts.unwrap_or(ds.platform.default_max_posts());
    if max_posts < cfg.min_posts {
        return Err(Error::invalid(format!(
            "max_posts {max_posts} is below min_posts {}",
            cfg.min_posts
        )));
    }
    let users = ds
        .users
        .iter()
        .filter(|u| !(cfg.drop_dual_role && cfg.dual_role_ids.contains(&u.user_id)))
        .filter_map(|u| {
            let originals: Vec<Post> = u.posts.iter().filter(|p| p.is_original).cloned().collect();
            if originals.len() < cfg.min_posts {
                return None;
            }
            let skip = originals.len().saturating_sub(max_posts);
            Some(UserRecord {
                posts: originals[skip..].to_vec(),
                ..u.clone()
            })
        })
        .collect();
    Ok(ds.with_users(users))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub valid_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.70,
            valid_frac: 0.10,
            test_frac: 0.20,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        SplitSpec {
            seed,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: LabeledDataset,
    pub valid: LabeledDataset,
    pub test: LabeledDataset,
}

/// Split membership by user id, as persisted between pipeline stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn ids(&self) -> SplitIds {
        let ids = |d: &LabeledDataset| d.users.iter().map(|u| u.user_id.clone()).collect();
        SplitIds {
            train: ids(&self.train),
            valid: ids(&self.valid),
            test: ids(&self.test),
        }
    }
}

impl SplitIds {
    /// Rebuilds the split datasets from `ds`; unknown ids are an error.
    pub fn apply(&self, ds: &LabeledDataset) -> Result<Split> {
        let by_id: BTreeMap<&str, &UserRecord> = ds.users.iter().map(|u| (u.user_id.as_str(), u)).collect();
        let pick = |ids: &[String]| -> Result<LabeledDataset> {
            let users = ids
                .iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|u| (*u).clone())
                        .ok_or_else(|| Error::invalid(format!("split references unknown user {id:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ds.with_users(users))
        };
        Ok(Split {
            train: pick(&self.train)?,
            valid: pick(&self.valid)?,
            test: pick(&self.test)?,
        })
    }
}

/// Stratified, seeded train/valid/test partition. Each split keeps the
/// input order of its users.
pub fn split_dataset(ds: &LabeledDataset, spec: &SplitSpec) -> Result<Split> {
    let fracs = [spec.train_frac, spec.valid_frac, spec.test_frac];
    if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split fractions must lie in [0,1] and sum to 1"));
    }
    if ds.len() < 10 {
        return Err(Error::invalid(format!(
            "need at least 10 users to split, got {}",
            ds.len()
        )));
    }
    for label in Label::ALL {
        let count = ds.count(label);
        if count < 3 {
            return Err(Error::Stratification {
                label: label.to_string(),
                count,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut assignment = vec![0u8; ds.len()];
    for label in Label::ALL {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.users[i].label == label).collect();
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = (n * spec.train_frac).round() as usize;
        let n_valid = ((n * spec.valid_frac).round() as usize).min(idx.len() - n_train);
        for (pos, &i) in idx.iter().enumerate() {
            assignment[i] = if pos < n_train {
                0
            } else if pos < n_train + n_valid {
                1
            } else {
                2
            };
        }
    }
    let part = |which: u8| {
        ds.with_users(
            ds.users
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == which)
                .map(|(u, _)| u.clone())
                .collect(),
        )
    };
    Ok(Split {
        train: part(0),
        valid: part(1),
        test: part(2),
    })
}

/// Where planted tokens may occur within a synthetic history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantRegion {
    Anywhere,
    /// Only posts in the final `fraction` of each history.
    Tail {
        fraction: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub posts_per_user: usize,
    pub planted: BTreeMap<Label, Vec<String>>,
    pub noise_vocab_size: usize,
    pub p_plant: f64,
    pub min_post_tokens: usize,
    pub max_post_tokens: usize,
    pub plant_region: PlantRegion,
    pub platform: Platform,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_users: 200,
            posts_per_user: 50,
            planted: default_planted_tokens(),
            noise_vocab_size: 5000,
            p_plant: 0.3,
            min_post_tokens: 6,
            max_post_tokens: 14,
            plant_region: PlantRegion::Anywhere,
            platform: Platform::Twitter,
            seed: 1,
        }
    }
}

/// Ten marker tokens per class. They are ordinary English words so that they
/// survive tweet normalization unchanged.
pub fn default_planted_tokens() -> BTreeMap<Label, Vec<String>> {
    let poster = [
        "illegals",
        "msm",
        "soros",
        "brennan",
        "communist",
        "schumer",
        "leftist",
        "rino",
        "globalists",
        "deepstate",
    ];
    let citizen = [
        "slightly",
        "empathy",
        "theories",
        "generally",
        "equivalent",
        "necessarily",
        "confusing",
        "fewer",
        "quotes",
        "actively",
    ];
    BTreeMap::from([
        (Label::Poster, poster.iter().map(|s| s.to_string()).collect()),
        (Label::ActiveCitizen, citizen.iter().map(|s| s.to_string()).collect()),
    ])
}

/// Noise token name for index `i` of the synthetic vocabulary.
pub fn noise_token(i: usize) -> String {
    format!("n{i:04}")
}

/// Generates a planted-signal corpus: users post uniform noise tokens, and each
/// post of a class-c user carries one class-c marker with probability `p_plant`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<LabeledDataset> {
    if cfg.n_users == 0 || cfg.n_users % 2 != 0 {
        return Err(Error::invalid("n_users must be a positive even number"));
    }
    if cfg.posts_per_user == 0 || cfg.noise_vocab_size == 0 {
        return Err(Error::invalid("posts_per_user and noise_vocab_size must be positive"));
    }
    if cfg.min_post_tokens == 0 || cfg.min_post_tokens > cfg.max_post_tokens {
        return Err(Error::invalid("post length range is empty"));
    }
    if !(0.0..=1.0).contains(&cfg.p_plant) {
        return Err(Error::invalid("p_plant must lie in [0,1]"));
    }
    let mut seen: BTreeMap<&str, Label> = BTreeMap::new();
    for (&label, tokens) in &cfg.planted {
        for t in tokens {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("planted token {t:?} is not a single token")));
            }
            if let Some(prev) = seen.insert(t, label) {
                if prev != label {
                    return Err(Error::invalid(format!(
                        "planted token {t:?} is listed for both classes"
                    )));
                }
            }
        }
    }
    let noise: Vec<String> = (0..cfg.noise_vocab_size).map(noise_token).collect();
    if let Some(t) = noise.iter().find(|t| seen.contains_key(t.as_str())) {
        return Err(Error::invalid(format!(
            "planted token {t:?} collides with the noise vocabulary"
        )));
    }
    let tail_start = match cfg.plant_region {
        PlantRegion::Anywhere => 0,
        PlantRegion::Tail { fraction } => {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::invalid("tail fraction must lie in [0,1]"));
            }
            cfg.posts_per_user - (cfg.posts_per_user as f64 * fraction).round() as usize
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = chrono::DateTime::from_timestamp(1_577_836_800, 0).expect("valid epoch");
    let mut users = Vec::with_capacity(cfg.n_users);
    for i in 0..cfg.n_users {
        let label = if i % 2 == 0 {
            Label::Poster
        } else {
            Label::ActiveCitizen
        };
        let markers = cfg.planted.get(&label).map(Vec::as_slice).unwrap_or(&[]);
        let mut posts = Vec::with_capacity(cfg.posts_per_user);
        for j in 0..cfg.posts_per_user {
            let len = rng.gen_range(cfg.min_post_tokens..=cfg.max_post_tokens);
            let mut words: Vec<&str> = (0..len)
                .map(|_| noise[rng.gen_range(0..noise.len())].as_str())
                .collect();
            let plant = rng.gen_bool(cfg.p_plant);
            if plant && j >= tail_start && !markers.is_empty() {
                let pos = rng.gen_range(0..len);
                words[pos] = markers[rng.gen_range(0..markers.len())].as_str();
            }
            let ts = base + chrono::Duration::hours((i * cfg.posts_per_user + j) as i64);
            posts.push(Post {
                text: words.join(" "),
                timestamp: Some(ts.format("%Y-%m-%dT%H:%M:%SZ").to_string()),
                lang: Some(match cfg.platform {
                    Platform::Twitter => "en".into(),
                    Platform::Weibo => "zh".into(),
                }),
                is_original: true,
            });
        }
        users.push(UserRecord {
            user_id: format!("syn-{i:05}"),
            label,
            platform: cfg.platform,
            verified: None,
            posts,
        });
    }
    Ok(LabeledDataset {
        users,
        platform: cfg.platform,
        provenance: format!("synthetic(seed={}, p_plant={})", cfg.seed, cfg.p_plant),
    })
}

/// One row of the per-label descriptive statistics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: Label,
    pub n_users: usize,
    pub posts_min: usize,
    pub posts_max: usize,
    pub posts_mean: f64,
    pub posts_total: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub tokens_mean: f64,
    pub tokens_median: f64,
}

/// Per-label user, post and whitespace-token statistics.
pub fn summarize(ds: &LabeledDataset) -> Result<Vec<SummaryRow>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rows = Vec::new();
    for label in Label::ALL {
        let users: Vec<&UserRecord> = ds.users.iter().filter(|u| u.label == label).collect();
        if users.is_empty() {
            continue;
        }
        let posts: Vec<usize> = users.iter().map(|u| u.posts.len()).collect();
        let mut tokens: Vec<usize> = users.iter().map(|u| u.whitespace_tokens()).collect();
        tokens.sort_unstable();
        let n = users.len();
        let posts_total: usize = posts.iter().sum();
        let tokens_total: usize = tokens.iter().sum();
        let median = if n % 2 == 1 {
            tokens[n / 2] as f64
        } else {
            (tokens[n / 2 - 1] + tokens[n / 2]) as f64 / 2.0
        };
        rows.push(SummaryRow {
            label,
            n_users: n,
            posts_min: *posts.iter().min().unwrap(),
            posts_max: *posts.iter().max().unwrap(),
            posts_mean: posts_total as f64 / n as f64,
            posts_total,
            tokens_min: tokens[0],
            tokens_max: tokens[n - 1],
            tokens_mean: tokens_total as f64 / n as f64,
            tokens_median: median,
        });
    }
    Ok(rows)
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "label",
        "n_users",
        "posts_min",
        "posts_max",
        "posts_mean",
        "posts_total",
        "tokens_min",
        "tokens_max",
        "tokens_mean",
        "tokens_median",
    ])?;
    for r in rows {
        w.write_record([
            r.label.to_string(),
            r.n_users.to_string(),
            r.posts_min.to_string(),
            r.posts_max.to_string(),
            format!("{:.4}", r.posts_mean),
            r.posts_total.to_string(),
            r.tokens_min.to_string(),
            r.tokens_max.to_string(),
            format!("{:.4}", r.tokens_mean),
            format!("{:.1}", r.tokens_median),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
