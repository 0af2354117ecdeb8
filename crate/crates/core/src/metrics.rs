// Copyright 2026 The medbert authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Evaluation metrics: exact-match entity F1, micro/macro F1, accuracy, Pearson, cosine.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::kv::KvDoc;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {gold} gold vs {pred} predicted")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("malformed span ({start}, {end}, {ty}): start > end")]
    MalformedSpan { start: usize, end: usize, ty: String },
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),
    #[error("cosine of a zero vector")]
    ZeroVector,
    #[error("invalid metric report: {0}")]
    Parse(String),
}

/// Inclusive word-index span with an entity type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub ty: String,
}

impl Span {
    pub fn new(start: usize, end: usize, ty: impl Into<String>) -> Self {
        Span {
            start,
            end,
            ty: ty.into(),
        }
    }
}

/// True/false positive and false negative counts for one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }

    fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Named metric values plus the counts behind them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub values: Vec<(String, f64)>,
    pub counts: Vec<(String, Counts)>,
    pub n_examples: usize,
}

impl MetricReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }

    pub fn set(&mut self, key: &str, value: f64) {
        match self.values.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.values.push((key.to_string(), value)),
        }
    }

    /// Flat `key = value` text, six decimals.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n_examples = {}", self.n_examples);
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v:.6}");
        }
        for (label, c) in &self.counts {
            let _ = writeln!(out, "count.{label}.tp = {}", c.tp);
            let _ = writeln!(out, "count.{label}.fp = {}", c.fp);
            let _ = writeln!(out, "count.{label}.fn = {}", c.fn_);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, MetricsError> {
        let doc = KvDoc::parse(text).map_err(|e| MetricsError::Parse(e.to_string()))?;
        let mut report = MetricReport::default();
        for (k, v) in doc.iter() {
            let bad = || MetricsError::Parse(format!("{k} = {v:?}"));
            if k == "n_examples" {
                report.n_examples = v.parse().map_err(|_| bad())?;
            } else if let Some(rest) = k.strip_prefix("count.") {
                let (label, field) = rest.rsplit_once('.').ok_or_else(bad)?;
                let n: usize = v.parse().map_err(|_| bad())?;
                let idx = match report.counts.iter().position(|(l, _)| l == label) {
                    Some(i) => i,
                    None => {
                        report.counts.push((label.to_string(), Counts::default()));
                        report.counts.len() - 1
                    }
                };
                let c = &mut report.counts[idx].1;
                match field {
                    "tp" => c.tp = n,
                    "fp" => c.fp = n,
                    "fn" => c.fn_ = n,
                    _ => return Err(bad()),
                }
            } else {
                report.values.push((k.to_string(), v.parse().map_err(|_| bad())?));
            }
        }
        Ok(report)
    }
}

/// Micro-averaged exact-match span scores over all documents. Empty gold and empty
/// predictions everywhere scores 1.0.
pub fn entity_f1(gold: &[Vec<Span>], pred: &[Vec<Span>]) -> Result<MetricReport, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let mut per_type: Vec<(String, Counts)> = Vec::new();
    let mut total = Counts::default();
    for (g, p) in gold.iter().zip(pred) {
        for s in g.iter().chain(p) {
            if s.start > s.end {
                return Err(MetricsError::MalformedSpan {
                    start: s.start,
                    end: s.end,
                    ty: s.ty.clone(),
                });
            }
        }
        let g: BTreeSet<&Span> = g.iter().collect();
        let p: BTreeSet<&Span> = p.iter().collect();
        let mut bump = |ty: &str, c: Counts| {
            total.add(c);
            match per_type.iter_mut().find(|(t, _)| t == ty) {
                Some(slot) => slot.1.add(c),
                None => per_type.push((ty.to_string(), c)),
            }
        };
        for s in &p {
            let hit = g.contains(s);
            bump(
                &s.ty,
                Counts {
                    tp: hit as usize,
                    fp: !hit as usize,
                    fn_: 0,
                },
            );
        }
        for s in g.difference(&p) {
            bump(&s.ty, Counts { tp: 0, fp: 0, fn_: 1 });
        }
    }
    per_type.sort_by(|a, b| a.0.cmp(&b.0));
    let (p, r, f) = if total == Counts::default() {
        (1.0, 1.0, 1.0)
    } else {
        (total.precision(), total.recall(), total.f1())
    };
    Ok(MetricReport {
        values: vec![("precision".into(), p), ("recall".into(), r), ("f1".into(), f)],
        counts: per_type,
        n_examples: gold.len(),
    })
}

/// Single-label scores over class ids `0..classes`: pooled micro F1, macro F1 (every
/// declared class counts, absent ones as 0), and accuracy.
pub fn classification_scores(gold: &[usize], pred: &[usize], classes: usize) -> Result<MetricReport, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if let Some(&label) = gold.iter().chain(pred).find(|&&l| l >= classes) {
        return Err(MetricsError::LabelOutOfRange { label, classes });
    }
    let mut per = vec![Counts::default(); classes];
    let mut correct = 0;
    for (&g, &p) in gold.iter().zip(pred) {
        if g == p {
            per[g].tp += 1;
            correct += 1;
        } else {
            per[p].fp += 1;
            per[g].fn_ += 1;
        }
    }
    Ok(report_from_counts(per, ratio(correct, gold.len()), gold.len()))
}

fn report_from_counts(per: Vec<Counts>, accuracy: f64, n: usize) -> MetricReport {
    let mut total = Counts::default();
    per.iter().for_each(|c| total.add(*c));
    let macro_f1 = if per.is_empty() {
        0.0
    } else {
        per.iter().map(Counts::f1).sum::<f64>() / per.len() as f64
    };
    MetricReport {
        values: vec![
            ("micro_f1".into(), total.f1()),
            ("macro_f1".into(), macro_f1),
            ("accuracy".into(), accuracy),
        ],
        counts: per.into_iter().enumerate().map(|(i, c)| (i.to_string(), c)).collect(),
        n_examples: n,
    }
}

/// Multilabel scores over indicator rows; accuracy is the exact-set-match fraction.
pub fn multilabel_scores(gold: &[Vec<bool>], pred: &[Vec<bool>]) -> Result<MetricReport, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let classes = gold.first().map_or(0, Vec::len);
    let mut per = vec![Counts::default(); classes];
    let mut exact = 0;
    for (g, p) in gold.iter().zip(pred) {
        if g.len() != classes || p.len() != classes {
            return Err(MetricsError::LengthMismatch {
                gold: g.len(),
                pred: p.len(),
            });
        }
        exact += (g == p) as usize;
        for c in 0..classes {
            match (g[c], p[c]) {
                (true, true) => per[c].tp += 1,
                (false, true) => per[c].fp += 1,
                (true, false) => per[c].fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(report_from_counts(per, ratio(exact, gold.len()), gold.len()))
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch {
            gold: x.len(),
            pred: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(MetricsError::UndefinedCorrelation("fewer than 2 points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::UndefinedCorrelation("zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, MetricsError> {
    if u.len() != v.len() {
        return Err(MetricsError::LengthMismatch {
            gold: u.len(),
            pred: v.len(),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(MetricsError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}
