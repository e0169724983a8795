//! Correlation analysis and the final report.

use std::fmt::Write as _;
use std::fs;

use civic_lens::analysis::{
    pearson_feature_correlation, top_features, wordcloud_export, write_rankings_csv, CorrelationOptions,
    CorrelationReport, CorrelationResult,
};
use civic_lens::features::{
    build_vocabulary, count_vectorize, lexicon_vectorize, CountBasis, Normalization, VocabConfig,
};
use civic_lens::trainer::{significance_test, EvalReport, TTest};
use civic_lens::Label;
use serde::Serialize;
use serde_json::json;

use crate::config::hash_of;
use crate::error::{CliError, Result};
use crate::models::EVALUATE;
use crate::pipeline::{lexicon_fingerprint, Ctx, StageOutcome, Status, FEATURIZE, PREPROCESS};
use crate::store::{self, Manifest};

pub const ANALYZE: &str = "analyze";
pub const REPORT: &str = "report";

impl Ctx {
    pub fn analyze_hash(&self, preprocess: &str) -> Result<String> {
        Ok(hash_of(&json!({
            "stage": ANALYZE,
            "preprocess": preprocess,
            "analysis": self.cfg.analysis,
            "lexicon": lexicon_fingerprint(&self.load_lexicon()?),
        })))
    }
}

fn tables(report: &CorrelationReport, k: usize, alpha: f64) -> Vec<(Label, Vec<CorrelationResult>)> {
    Label::ALL
        .iter()
        .map(|&c| (c, top_features(&report.results, c, k, alpha)))
        .collect()
}

pub fn run_analyze(ctx: &mut Ctx) -> Result<StageOutcome> {
    let ph = ctx.ensure_preprocess()?;
    let hash = ctx.analyze_hash(&ph)?;
    let dir = ctx.dir(ANALYZE);
    if ctx.is_current(&dir, ANALYZE, &hash)? {
        return Ok(StageOutcome {
            stage: ANALYZE.into(),
            status: Status::UpToDate,
            config_hash: hash,
            dir,
        });
    }
    let a = ctx.cfg.analysis.clone();
    let all = ctx.load_histories()?.all();
    let vocab = build_vocabulary(
        &all.histories,
        &VocabConfig {
            ngram_max: a.ngram_max,
            min_count: a.min_count,
            min_count_basis: CountBasis::Corpus,
            max_df_ratio: a.max_df_ratio,
            max_size: a.max_size,
        },
    )?;
    let opts = CorrelationOptions {
        permutations: a.permutations,
        permutation_seed: a.permutation_seed,
        bonferroni: a.bonferroni,
    };
    let ngrams = count_vectorize(&all.histories, &vocab, Normalization::RelativeFreq);
    let lexicon = lexicon_vectorize(&all.histories, &ctx.load_lexicon()?);
    let mut outputs = Vec::new();
    let mut summary = Vec::new();
    let mut ngram_results = Vec::new();
    for (name, x) in [("ngrams", &ngrams), ("lexicon", &lexicon)] {
        let report = pearson_feature_correlation(x, &all.labels, &opts)?;
        store::write_json(&dir.join(format!("correlations_{name}.json")), &hash, &report)?;
        let t = tables(&report, a.top_k, a.alpha);
        store::write_csv(&dir.join(format!("rankings_{name}.csv")), &hash, |b| {
            write_rankings_csv(&t, b)
        })?;
        outputs.push(format!("correlations_{name}.json"));
        outputs.push(format!("rankings_{name}.csv"));
        for (class, rows) in &t {
            let shown: Vec<String> = rows.iter().map(|r| format!("{} ({:+.3})", r.feature, r.r)).collect();
            eprintln!("analyze: {name} / {class}: {}", shown.join(", "));
        }
        summary.push(json!({ "features": name, "tested": report.results.len(), "skipped": report.skipped.len() }));
        if name == "ngrams" {
            ngram_results = report.results;
        }
    }
    for class in Label::ALL {
        let cloud = wordcloud_export(&ngram_results, class, a.wordcloud_k, a.alpha);
        let name = format!("wordcloud_{}.json", class.as_str());
        store::write_json_stamped(&dir.join(&name), &hash, &cloud)?;
        outputs.push(name);
    }
    let mut m = Manifest::new(ANALYZE, &hash);
    m.upstream.insert(PREPROCESS.into(), ph);
    m.outputs = outputs;
    m.details = json!({ "users": all.labels.len(), "terms": vocab.len(), "tests": summary });
    m.write(&dir)?;
    Ok(StageOutcome {
        stage: ANALYZE.into(),
        status: Status::Built,
        config_hash: hash,
        dir,
    })
}

#[derive(Debug, Serialize)]
struct Comparison {
    best: String,
    other: String,
    test: TTest,
}

#[derive(Debug, Serialize)]
struct FinalReport {
    featurize: String,
    models: Vec<EvalReport>,
    comparisons: Vec<Comparison>,
    rankings: Option<serde_json::Value>,
}

/// Evaluated models built on the current features, in model-name order.
fn collect_models(ctx: &Ctx, featurize: &str) -> Result<Vec<(String, EvalReport)>> {
    let root = ctx.ws.root.clone();
    let mut found = Vec::new();
    let Ok(entries) = fs::read_dir(&root) else {
        return Ok(found);
    };
    for entry in entries {
        let dir = entry.map_err(|e| CliError::io(&root, e))?.path();
        let Some(m) = Manifest::read(&dir, EVALUATE)? else {
            continue;
        };
        if m.upstream.get(FEATURIZE).map(String::as_str) != Some(featurize) || !m.outputs_exist(&dir) {
            continue;
        }
        let report: EvalReport = store::read_json_plain(&dir.join("report.json"))?;
        found.push((m.config_hash, report));
    }
    found.sort_by(|a, b| a.1.model.cmp(&b.1.model));
    Ok(found)
}

fn rankings_markdown(out: &mut String, title: &str, t: &[(Label, Vec<CorrelationResult>)]) {
    let _ = writeln!(out, "\n### {title}\n");
    let _ = writeln!(out, "| Rank | {} | {} |", Label::Poster, Label::ActiveCitizen);
    let _ = writeln!(out, "|---:|---|---|");
    let depth = t.iter().map(|(_, rows)| rows.len()).max().unwrap_or(0);
    let cell = |rows: &[CorrelationResult], i: usize| {
        rows.get(i)
            .map(|r| format!("{} ({:.3})", r.feature, r.r))
            .unwrap_or_default()
    };
    for i in 0..depth {
        let _ = writeln!(out, "| {} | {} | {} |", i + 1, cell(&t[0].1, i), cell(&t[1].1, i));
    }
}

pub fn run_report(ctx: &mut Ctx) -> Result<StageOutcome> {
    let ph = ctx.preprocess_hash()?;
    let fh = ctx.featurize_hash(&ph)?;
    ctx.require(&ctx.dir(FEATURIZE), FEATURIZE, &fh, "run `civic-lens featurize` first")?;
    let models = collect_models(ctx, &fh)?;
    if models.is_empty() {
        return Err(CliError::missing(
            EVALUATE,
            "no evaluated models for the current features; run `civic-lens train` and `civic-lens evaluate`",
        ));
    }
    let ah = ctx.analyze_hash(&ph)?;
    let adir = ctx.dir(ANALYZE);
    let analysis_current =
        matches!(Manifest::read(&adir, ANALYZE)?, Some(m) if m.config_hash == ah && m.outputs_exist(&adir));
    if !analysis_current {
        eprintln!("report: no current correlation analysis; run `civic-lens analyze` to include rankings");
    }
    let hash = hash_of(&json!({
        "stage": REPORT,
        "featurize": fh,
        "evaluations": models.iter().map(|(h, _)| h).collect::<Vec<_>>(),
        "analyze": analysis_current.then_some(&ah),
    }));
    let dir = ctx.dir(REPORT);
    if ctx.is_current(&dir, REPORT, &hash)? {
        return Ok(StageOutcome {
            stage: REPORT.into(),
            status: Status::UpToDate,
            config_hash: hash,
            dir,
        });
    }

    let reports: Vec<EvalReport> = models.into_iter().map(|(_, r)| r).collect();
    let mut md = String::from("# Classification results\n\n");
    let _ = writeln!(
        md,
        "Macro-averaged test scores in percent, mean ± standard deviation over seeds.\n"
    );
    let _ = writeln!(md, "| Model | Seeds | Precision | Recall | F1 |");
    let _ = writeln!(md, "|---|---:|---:|---:|---:|");
    for r in &reports {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} |",
            r.model,
            r.runs.len(),
            r.precision.percent(),
            r.recall.percent(),
            r.f1.percent()
        );
    }

    let mut comparisons = Vec::new();
    let best = reports
        .iter()
        .filter(|r| r.runs.len() >= 2)
        .max_by(|a, b| a.f1.mean.total_cmp(&b.f1.mean).then_with(|| b.model.cmp(&a.model)));
    if let Some(best) = best {
        for other in reports.iter().filter(|r| r.runs.len() >= 2 && r.model != best.model) {
            let test = significance_test(&best.f1_scores(), &other.f1_scores())?;
            comparisons.push(Comparison {
                best: best.model.clone(),
                other: other.model.clone(),
                test,
            });
        }
    }
    if !comparisons.is_empty() {
        let _ = writeln!(md, "\n## F1 comparisons (Welch t-test)\n");
        let _ = writeln!(md, "| Best | Other | t | df | p | Note |");
        let _ = writeln!(md, "|---|---|---:|---:|---:|---|");
        for c in &comparisons {
            let note = if c.test.small_sample { "fewer than 5 seeds" } else { "" };
            let _ = writeln!(
                md,
                "| {} | {} | {:.3} | {:.1} | {:.4} | {note} |",
                c.best, c.other, c.test.t, c.test.df, c.test.p
            );
        }
    }

    let mut rankings = None;
    if analysis_current {
        let a = &ctx.cfg.analysis;
        let _ = writeln!(md, "\n## Features correlated with each class\n");
        let _ = writeln!(md, "Pearson r against the poster label, p < {}.", a.alpha);
        let mut all = serde_json::Map::new();
        for (name, title) in [("ngrams", "N-grams"), ("lexicon", "Lexicon categories")] {
            let (_, report): (_, CorrelationReport) =
                store::read_json(&adir.join(format!("correlations_{name}.json")))?;
            let t = tables(&report, a.top_k, a.alpha);
            rankings_markdown(&mut md, title, &t);
            all.insert(name.into(), serde_json::to_value(&t)?);
        }
        rankings = Some(serde_json::Value::Object(all));
    }

    let report = FinalReport {
        featurize: fh.clone(),
        models: reports,
        comparisons,
        rankings,
    };
    store::write_markdown(&dir.join("report.md"), &hash, &md)?;
    store::write_json(&dir.join("report.json"), &hash, &report)?;
    eprint!("{md}");
    let mut m = Manifest::new(REPORT, &hash);
    m.upstream.insert(FEATURIZE.into(), fh);
    if analysis_current {
        m.upstream.insert(ANALYZE.into(), ah);
    }
    m.outputs = vec!["report.md".into(), "report.json".into()];
    m.write(&dir)?;
    Ok(StageOutcome {
        stage: REPORT.into(),
        status: Status::Built,
        config_hash: hash,
        dir,
    })
}
