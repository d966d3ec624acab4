//! Accuracy, ROC AUC and the tabular reports built on them.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabeledCorpus;
use crate::pipeline::{AblationConfig, PipelineResult};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no labeled predictions to score")]
    Empty,
    #[error("{0} scores but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("AUC is undefined: all labels are {0}")]
    SingleClass(u8),
    #[error("label must be 0 or 1, got {0}")]
    BadLabel(u8),
    #[error("score {0} is not finite")]
    NonFinite(f64),
    #[error("no ground-truth label for scored meme {0:?}")]
    MissingLabel(String),
    #[error("report: {0}")]
    Format(String),
}

fn check_labels(labels: &[u8]) -> Result<(), EvalError> {
    match labels.iter().find(|&&l| l > 1) {
        Some(&l) => Err(EvalError::BadLabel(l)),
        None => Ok(()),
    }
}

/// Fraction of `predictions` equal to `labels`.
pub fn accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    check_labels(labels)?;
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Area under the ROC curve as the Mann-Whitney statistic: the probability a
/// random positive outscores a random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    check_labels(labels)?;
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite(s));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass(labels[0]));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of midranks (1-based) of the positives
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        pos_rank_sum += midrank * positives as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    /// Absent when the scored memes carry a single class.
    pub auc: Option<f64>,
    pub confusion: Confusion,
    pub unparseable_count: usize,
    pub config_echo: AblationConfig,
}

/// Scores `results` against the corpus labels. Unparseable answers count
/// as predicted 0.
pub fn metrics(
    results: &[PipelineResult],
    corpus: &LabeledCorpus,
    config: &AblationConfig,
) -> Result<MetricsReport, EvalError> {
    let mut preds = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut confusion = Confusion::default();
    for r in results {
        let label = corpus
            .get(&r.meme_id)
            .and_then(|m| m.label)
            .ok_or_else(|| EvalError::MissingLabel(r.meme_id.clone()))?;
        match (r.prediction, label) {
            (1, 1) => confusion.tp += 1,
            (1, _) => confusion.fp += 1,
            (_, 0) => confusion.tn += 1,
            _ => confusion.fn_ += 1,
        }
        preds.push(r.prediction);
        scores.push(r.score);
        labels.push(label);
    }
    let accuracy = accuracy(&preds, &labels)?;
    let auc = match auc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(EvalError::SingleClass(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        n: labels.len(),
        accuracy,
        auc,
        confusion,
        unparseable_count: results.iter().filter(|r| r.unparseable).count(),
        config_echo: *config,
    })
}

fn pct(x: f64) -> f64 {
    (x * 1000.0).round() / 10.0
}

/// One row of an ablation table, in percent rounded to one decimal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub use_epm: bool,
    pub use_eie: bool,
    pub use_cra: bool,
    pub acc: f64,
    pub auc: Option<f64>,
    pub d_acc: f64,
    pub d_auc: Option<f64>,
    pub n: usize,
}

fn study_position(c: &AblationConfig) -> usize {
    AblationConfig::study_rows(c.k, c.random_seed)
        .iter()
        .position(|r| (r.use_epm, r.use_eie, r.use_cra) == (c.use_epm, c.use_eie, c.use_cra))
        .unwrap_or(usize::MAX)
}

/// Orders reports like the ablation study and computes deltas against the
/// baseline row, or the first row when no baseline was run.
pub fn ablation_report(reports: &[MetricsReport]) -> Vec<AblationRow> {
    let mut sorted: Vec<&MetricsReport> = reports.iter().collect();
    sorted.sort_by_key(|r| (study_position(&r.config_echo), r.config_echo.label()));
    let Some(reference) = sorted
        .iter()
        .find(|r| r.config_echo.label() == "baseline")
        .or(sorted.first())
        .copied()
    else {
        return Vec::new();
    };
    let ref_acc = pct(reference.accuracy);
    let ref_auc = reference.auc.map(pct);
    sorted
        .iter()
        .map(|r| {
            let acc = pct(r.accuracy);
            let auc = r.auc.map(pct);
            AblationRow {
                label: r.config_echo.label(),
                use_epm: r.config_echo.use_epm,
                use_eie: r.config_echo.use_eie,
                use_cra: r.config_echo.use_cra,
                acc,
                auc,
                d_acc: pct((acc - ref_acc) / 100.0),
                d_auc: auc.zip(ref_auc).map(|(a, b)| pct((a - b) / 100.0)),
                n: r.n,
            }
        })
        .collect()
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        ""
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.1}")).unwrap_or_else(|| "n/a".into())
}

fn signed(x: Option<f64>) -> String {
    x.map(|v| format!("{v:+.1}")).unwrap_or_else(|| "n/a".into())
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from("| config | EPM | EIE | CRA | ACC | AUC | ΔACC | ΔAUC | n |\n");
    out.push_str("|---|:-:|:-:|:-:|--:|--:|--:|--:|--:|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {:.1} | {} | {} | {} | {} |\n",
            r.label,
            mark(r.use_epm),
            mark(r.use_eie),
            mark(r.use_cra),
            r.acc,
            opt(r.auc),
            signed(Some(r.d_acc)),
            signed(r.d_auc),
            r.n
        ));
    }
    out
}

pub fn ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["config", "epm", "eie", "cra", "acc", "auc", "d_acc", "d_auc", "n"])
        .map_err(|e| EvalError::Format(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.use_epm.to_string(),
            r.use_eie.to_string(),
            r.use_cra.to_string(),
            format!("{:.1}", r.acc),
            opt(r.auc),
            format!("{:.1}", r.d_acc),
            r.d_auc.map(|v| format!("{v:.1}")).unwrap_or_else(|| "n/a".into()),
            r.n.to_string(),
        ])
        .map_err(|e| EvalError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| EvalError::Format(e.to_string()))
}

/// Accuracy and AUC for one neighbor count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub acc: f64,
    pub auc: Option<f64>,
    pub n: usize,
    pub unparseable: usize,
}

/// Runs `run` once per k in ascending order and scores each run.
pub fn k_sweep<F, E>(
    ks: &[usize],
    corpus: &LabeledCorpus,
    base: &AblationConfig,
    mut run: F,
) -> Result<Vec<SweepPoint>, E>
where
    F: FnMut(&AblationConfig) -> Result<Vec<PipelineResult>, E>,
    E: From<EvalError>,
{
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut out = Vec::with_capacity(ks.len());
    for k in ks {
        let config = AblationConfig { k, ..*base };
        let results = run(&config)?;
        let m = metrics(&results, corpus, &config)?;
        out.push(SweepPoint {
            k,
            acc: m.accuracy,
            auc: m.auc,
            n: m.n,
            unparseable: m.unparseable_count,
        });
    }
    Ok(out)
}

pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "acc", "auc", "n", "unparseable"])
        .map_err(|e| EvalError::Format(e.to_string()))?;
    for p in points {
        w.write_record([
            p.k.to_string(),
            format!("{:.6}", p.acc),
            p.auc.map(|a| format!("{a:.6}")).unwrap_or_default(),
            p.n.to_string(),
            p.unparseable.to_string(),
        ])
        .map_err(|e| EvalError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| EvalError::Format(e.to_string()))
}

pub fn read_sweep_csv<R: Read>(input: R) -> Result<Vec<SweepPoint>, EvalError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(|e| EvalError::Format(e.to_string()))?.clone();
    let col: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let idx = |name: &str| {
        col.get(name)
            .copied()
            .ok_or_else(|| EvalError::Format(format!("missing column {name:?}")))
    };
    let (ki, ai, ui, ni, pi) = (idx("k")?, idx("acc")?, idx("auc")?, idx("n")?, idx("unparseable")?);
    let bad = |field: &str, v: &str| EvalError::Format(format!("bad {field} value {v:?}"));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| EvalError::Format(e.to_string()))?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let auc = match get(ui) {
            "" => None,
            v => Some(v.parse().map_err(|_| bad("auc", v))?),
        };
        out.push(SweepPoint {
            k: get(ki).parse().map_err(|_| bad("k", get(ki)))?,
            acc: get(ai).parse().map_err(|_| bad("acc", get(ai)))?,
            auc,
            n: get(ni).parse().map_err(|_| bad("n", get(ni)))?,
            unparseable: get(pi).parse().map_err(|_| bad("unparseable", get(pi)))?,
        });
    }
    Ok(out)
}
