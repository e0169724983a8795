//! Univariate Pearson correlation between per-user feature frequencies and
//! the class label, with rankings and word-cloud exports.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

pub const DEFAULT_ALPHA: f64 = 0.001;
pub const TABLE_ROWS: usize = 10;
pub const WORDCLOUD_SIZE: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub feature: String,
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
    /// Class the feature is positively associated with.
    pub class_direction: Label,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub results: Vec<CorrelationResult>,
    /// Features with zero variance across users; r is undefined for them.
    pub skipped: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrelationOptions {
    /// Replace the t-transform p value by a label-permutation estimate with
    /// this many permutations.
    pub permutations: Option<usize>,
    pub permutation_seed: u64,
    /// Multiply p values by the number of tested features (capped at 1).
    pub bonferroni: bool,
}

/// Pearson r against a binary y, in the point-biserial form
/// r = (x̄₁ − x̄₀)·sqrt(n₁n₀/n) / sqrt(Σ(x−x̄)²). Flipping y negates the
/// result exactly, which keeps p values identical under relabeling.
fn pearson(x: &[f64], y: &[bool], n1: usize) -> f64 {
    let n = x.len();
    let n0 = n - n1;
    let mean = x.iter().sum::<f64>() / n as f64;
    let (mut s1, mut s0, mut sxx) = (0.0, 0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        let d = xi - mean;
        if yi {
            s1 += d;
        } else {
            s0 += d;
        }
        sxx += d * d;
    }
    let diff = s1 / n1 as f64 - s0 / n0 as f64;
    let scale = ((n1 * n0) as f64 / n as f64).sqrt();
    (diff * scale / sxx.sqrt()).clamp(-1.0, 1.0)
}

/// Two-sided p value of r under the null, via t = r·sqrt((n−2)/(1−r²)).
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("n >= 3 gives positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

/// Correlates every column of `x` with y (1 for posters, 0 otherwise).
pub fn pearson_feature_correlation(
    x: &FeatureMatrix,
    labels: &[Label],
    opts: &CorrelationOptions,
) -> Result<CorrelationReport> {
    if x.n_rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: x.n_rows(),
            actual: labels.len(),
        });
    }
    let n = labels.len();
    if n < 3 {
        return Err(Error::invalid(format!("correlation needs at least 3 users, got {n}")));
    }
    let y: Vec<bool> = labels.iter().map(|&l| l == Label::Poster).collect();
    let n1 = y.iter().filter(|&&b| b).count();
    if n1 == 0 || n1 == n {
        return Err(Error::invalid("labels are constant; correlation is undefined"));
    }
    let columns = x.columns();
    let mut skipped = Vec::new();
    let mut tested: Vec<(usize, &Vec<f64>)> = Vec::new();
    for (c, col) in columns.iter().enumerate() {
        if col.iter().all(|&v| v == col[0]) {
            skipped.push(x.feature_names[c].clone());
        } else {
            tested.push((c, col));
        }
    }
    let rs: Vec<f64> = tested.par_iter().map(|(_, col)| pearson(col, &y, n1)).collect();
    let mut ps: Vec<f64> = match opts.permutations {
        None => rs.iter().map(|&r| correlation_p_value(r, n)).collect(),
        Some(b) => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.permutation_seed);
            let mut exceed = vec![0usize; rs.len()];
            let mut perm = y.clone();
            for _ in 0..b {
                perm.shuffle(&mut rng);
                let hits: Vec<bool> = tested
                    .par_iter()
                    .zip(&rs)
                    .map(|((_, col), &r)| pearson(col, &perm, n1).abs() >= r.abs() - 1e-12)
                    .collect();
                exceed.iter_mut().zip(hits).for_each(|(e, h)| *e += h as usize);
            }
            exceed.iter().map(|&e| (1 + e) as f64 / (1 + b) as f64).collect()
        }
    };
    if opts.bonferroni {
        let m = rs.len() as f64;
        ps.iter_mut().for_each(|p| *p = (*p * m).min(1.0));
    }
    let results = tested
        .iter()
        .zip(rs.iter().zip(&ps))
        .map(|(&(c, _), (&r, &p))| CorrelationResult {
            feature: x.feature_names[c].clone(),
            r,
            p_value: p,
            n,
            class_direction: if r > 0.0 { Label::Poster } else { Label::ActiveCitizen },
        })
        .collect();
    Ok(CorrelationReport { results, skipped })
}

/// Features associated with `class` at p < `alpha` (no filter when
/// `alpha >= 1`), strongest first, ties broken by feature name.
pub fn top_features(results: &[CorrelationResult], class: Label, k: usize, alpha: f64) -> Vec<CorrelationResult> {
    let mut picked: Vec<CorrelationResult> = results
        .iter()
        .filter(|r| r.class_direction == class && (alpha >= 1.0 || r.p_value < alpha))
        .cloned()
        .collect();
    picked.sort_by(|a, b| b.r.abs().total_cmp(&a.r.abs()).then_with(|| a.feature.cmp(&b.feature)));
    picked.truncate(k);
    picked
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordCloudEntry {
    pub token: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordCloud {
    pub class: Label,
    pub entries: Vec<WordCloudEntry>,
}

/// Up to `k` features for `class` with weights |r| / max |r|.
pub fn wordcloud_export(results: &[CorrelationResult], class: Label, k: usize, alpha: f64) -> WordCloud {
    let top = top_features(results, class, k, alpha);
    let max = top.iter().map(|r| r.r.abs()).fold(0.0, f64::max);
    WordCloud {
        class,
        entries: top
            .into_iter()
            .map(|r| WordCloudEntry {
                weight: if max > 0.0 { r.r.abs() / max } else { 0.0 },
                token: r.feature,
            })
            .collect(),
    }
}

impl WordCloud {
    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

/// Rankings CSV with columns `class,rank,feature,r,p,n`.
pub fn write_rankings_csv<W: Write>(tables: &[(Label, Vec<CorrelationResult>)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class", "rank", "feature", "r", "p", "n"])?;
    for (class, rows) in tables {
        for (i, r) in rows.iter().enumerate() {
            w.write_record([
                class.as_str(),
                &(i + 1).to_string(),
                &r.feature,
                &r.r.to_string(),
                &r.p_value.to_string(),
                &r.n.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("rankings.csv", e))?;
    Ok(())
}
