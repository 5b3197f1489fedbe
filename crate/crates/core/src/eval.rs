//! Sentence- and character-level detection/correction metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub source: String,
    pub prediction: String,
    pub target: String,
}

impl EvalRecord {
    pub fn new(source: &str, prediction: &str, target: &str) -> Self {
        EvalRecord {
            source: source.into(),
            prediction: prediction.into(),
            target: target.into(),
        }
    }

    fn columns(&self) -> Result<(Vec<char>, Vec<char>, Vec<char>)> {
        let s: Vec<char> = self.source.chars().collect();
        let p: Vec<char> = self.prediction.chars().collect();
        let t: Vec<char> = self.target.chars().collect();
        for (what, len) in [("source vs prediction", p.len()), ("source vs target", t.len())] {
            if len != s.len() {
                return Err(Error::LengthMismatch {
                    what,
                    left: s.len(),
                    right: len,
                });
            }
        }
        Ok((s, p, t))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub d_precision: f64,
    pub d_recall: f64,
    pub d_f1: f64,
    pub c_precision: f64,
    pub c_recall: f64,
    pub c_f1: f64,
    pub detection: Counts,
    pub correction: Counts,
}

/// `a / b`, with `0 / 0 = 0`.
pub fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl MetricReport {
    /// Precision `tp / (tp + fp)` and recall `tp / (tp + fn)` per level.
    pub fn from_counts(detection: Counts, correction: Counts) -> Self {
        let dp = ratio(detection.tp, detection.tp + detection.fp);
        let dr = ratio(detection.tp, detection.tp + detection.fn_);
        let cp = ratio(correction.tp, correction.tp + correction.fp);
        let cr = ratio(correction.tp, correction.tp + correction.fn_);
        MetricReport {
            d_precision: dp,
            d_recall: dr,
            d_f1: f1(dp, dr),
            c_precision: cp,
            c_recall: cr,
            c_f1: f1(cp, cr),
            detection,
            correction,
        }
    }

    /// Aligned plain-text table, percentages.
    pub fn table(&self) -> String {
        let row = |name: &str, p: f64, r: f64, f: f64, c: &Counts| {
            format!(
                "{name:<10} {:>7.2} {:>7.2} {:>7.2} {:>6} {:>6} {:>6}\n",
                p * 100.0,
                r * 100.0,
                f * 100.0,
                c.tp,
                c.fp,
                c.fn_
            )
        };
        let mut out = format!("{:<10} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6}\n", "level", "P", "R", "F1", "TP", "FP", "FN");
        out += &row("detection", self.d_precision, self.d_recall, self.d_f1, &self.detection);
        out += &row("correction", self.c_precision, self.c_recall, self.c_f1, &self.correction);
        out
    }
}

/// A sentence counts as predicted positive when the model changed anything,
/// and as gold positive when it contains an error. Detection is right when
/// the changed positions are exactly the error positions; correction when the
/// prediction equals the target.
pub fn sentence_metrics(records: &[EvalRecord]) -> Result<MetricReport> {
    let mut predicted = 0;
    let mut gold = 0;
    let mut d_tp = 0;
    let mut c_tp = 0;
    for r in records {
        let (s, p, t) = r.columns()?;
        let edits: Vec<usize> = (0..s.len()).filter(|&i| p[i] != s[i]).collect();
        let errors: Vec<usize> = (0..s.len()).filter(|&i| t[i] != s[i]).collect();
        if !errors.is_empty() {
            gold += 1;
        }
        if edits.is_empty() {
            continue;
        }
        predicted += 1;
        if edits == errors {
            d_tp += 1;
        }
        if p == t {
            c_tp += 1;
        }
    }
    Ok(MetricReport::from_counts(
        Counts {
            tp: d_tp,
            fp: predicted - d_tp,
            fn_: gold - d_tp,
        },
        Counts {
            tp: c_tp,
            fp: predicted - c_tp,
            fn_: gold - c_tp,
        },
    ))
}

/// Detection over edited positions; correction precision is measured among
/// detected errors and correction recall among all errors.
pub fn character_metrics(records: &[EvalRecord]) -> Result<MetricReport> {
    let mut d = Counts::default();
    let mut c_tp = 0;
    let mut gold = 0;
    for r in records {
        let (s, p, t) = r.columns()?;
        for i in 0..s.len() {
            let edited = p[i] != s[i];
            let error = t[i] != s[i];
            gold += error as usize;
            match (edited, error) {
                (true, true) => {
                    d.tp += 1;
                    if p[i] == t[i] {
                        c_tp += 1;
                    }
                }
                (true, false) => d.fp += 1,
                (false, true) => d.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(MetricReport::from_counts(
        d,
        Counts {
            tp: c_tp,
            fp: d.tp - c_tp,
            fn_: gold - c_tp,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Sentence,
    Char,
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentence" => Ok(Level::Sentence),
            "char" | "character" => Ok(Level::Char),
            other => Err(Error::InvalidConfig(format!("unknown level `{other}`"))),
        }
    }
}

pub fn metrics(records: &[EvalRecord], level: Level) -> Result<MetricReport> {
    match level {
        Level::Sentence => sentence_metrics(records),
        Level::Char => character_metrics(records),
    }
}

/// One JSON object per line.
pub fn read_records_jsonl(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
