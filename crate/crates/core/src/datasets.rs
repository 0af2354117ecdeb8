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

//! Loaders for the downstream formats: CoNLL BIO files, tab-separated labeled text,
//! a dataset manifest, and seeded train/validation/test splits.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: {message}")]
    Placeholder { line: usize, message: String },
    #[error("split needs at least 5 examples, got {0}")]
    TooFew(usize),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn read(path: &Path) -> Result<String, DatasetError> {
    std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn malformed(line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Malformed {
        line,
        message: message.into(),
    }
}

/// One sentence of `(word, tag)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NerSentence {
    pub words: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NerDocument {
    pub sentences: Vec<NerSentence>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConllData {
    pub documents: Vec<NerDocument>,
    /// Sorted, so tag ids are stable.
    pub tags: Vec<String>,
    /// Number of `I-X` tags rewritten to `B-X`.
    pub repairs: usize,
}

impl ConllData {
    pub fn sentences(&self) -> impl Iterator<Item = &NerSentence> {
        self.documents.iter().flat_map(|d| d.sentences.iter())
    }

    pub fn token_count(&self) -> usize {
        self.sentences().map(|s| s.words.len()).sum()
    }
}

pub const DOCSTART: &str = "-DOCSTART-";

/// `O`, `B-X` or `I-X` with non-empty `X`.
pub fn parse_tag(tag: &str) -> Option<(char, &str)> {
    if tag == "O" {
        return Some(('O', ""));
    }
    let (prefix, ty) = tag.split_once('-')?;
    match prefix {
        "B" | "I" if !ty.is_empty() => Some((prefix.chars().next()?, ty)),
        _ => None,
    }
}

/// Word and tag per line (first and last whitespace-separated fields); a blank line ends a
/// sentence and a `-DOCSTART-` line starts a new document. `I-X` after `O` or another type
/// becomes `B-X`.
pub fn parse_conll(text: &str) -> Result<ConllData, DatasetError> {
    let mut documents = vec![NerDocument::default()];
    let mut current = NerSentence {
        words: vec![],
        tags: vec![],
    };
    let mut tags = BTreeSet::new();
    let mut repairs = 0;
    let flush = |docs: &mut Vec<NerDocument>, cur: &mut NerSentence| {
        if !cur.words.is_empty() {
            docs.last_mut().unwrap().sentences.push(std::mem::replace(
                cur,
                NerSentence {
                    words: vec![],
                    tags: vec![],
                },
            ));
        }
    };
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            flush(&mut documents, &mut current);
            continue;
        }
        if fields[0] == DOCSTART {
            flush(&mut documents, &mut current);
            if !documents.last().unwrap().sentences.is_empty() {
                documents.push(NerDocument::default());
            }
            continue;
        }
        if fields.len() < 2 {
            return Err(malformed(line_no, format!("expected `word<TAB>tag`, got {line:?}")));
        }
        let word = fields[0];
        let tag = fields[fields.len() - 1];
        let (kind, ty) = parse_tag(tag).ok_or_else(|| malformed(line_no, format!("invalid BIO tag {tag:?}")))?;
        let mut tag = tag.to_string();
        if kind == 'I' {
            let continues = current
                .tags
                .last()
                .and_then(|prev| parse_tag(prev))
                .is_some_and(|(pk, pt)| pk != 'O' && pt == ty);
            if !continues {
                tag = format!("B-{ty}");
                repairs += 1;
            }
        }
        tags.insert(tag.clone());
        current.words.push(word.to_string());
        current.tags.push(tag);
    }
    flush(&mut documents, &mut current);
    if documents.len() > 1 && documents.last().unwrap().sentences.is_empty() {
        documents.pop();
    }
    Ok(ConllData {
        documents,
        tags: tags.into_iter().collect(),
        repairs,
    })
}

pub fn load_conll(path: &Path) -> Result<ConllData, DatasetError> {
    parse_conll(&read(path)?)
}

pub fn render_conll(documents: &[NerDocument]) -> String {
    let mut out = String::new();
    for (d, doc) in documents.iter().enumerate() {
        if documents.len() > 1 || d > 0 {
            out.push_str(DOCSTART);
            out.push_str("\n\n");
        }
        for s in &doc.sentences {
            for (w, t) in s.words.iter().zip(&s.tags) {
                let _ = writeln!(out, "{w}\t{t}");
            }
            out.push('\n');
        }
    }
    out
}

/// Entity placeholder pairing expected in relation sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RelationFamily {
    GeneDisease,
    GeneChemical,
    DrugDrug,
}

impl RelationFamily {
    /// Placeholder and required occurrence count.
    pub fn placeholders(self) -> &'static [(&'static str, usize)] {
        match self {
            RelationFamily::GeneDisease => &[("@GENE$", 1), ("@DISEASE$", 1)],
            RelationFamily::GeneChemical => &[("@GENE$", 1), ("@CHEMICAL$", 1)],
            RelationFamily::DrugDrug => &[("@DRUG$", 2)],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationFamily::GeneDisease => "gene-disease",
            RelationFamily::GeneChemical => "gene-chemical",
            RelationFamily::DrugDrug => "drug-drug",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Self::GeneDisease, Self::GeneChemical, Self::DrugDrug]
            .into_iter()
            .find(|f| f.name() == s)
    }

    pub fn check(self, sentence: &str) -> Result<(), String> {
        for &(ph, want) in self.placeholders() {
            let got = sentence.matches(ph).count();
            if got != want {
                let plural = if want == 1 { "" } else { "s" };
                return Err(format!("expected {want} {ph} placeholder{plural}, found {got}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationExample {
    pub sentence: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaExample {
    pub question: String,
    pub context: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub a: String,
    pub b: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiLabelDoc {
    pub text: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabeledKind {
    Relation(RelationFamily),
    Qa,
    MultiLabel,
    Pair,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabeledData {
    Relation {
        family: RelationFamily,
        labels: Vec<String>,
        examples: Vec<RelationExample>,
    },
    Qa {
        labels: Vec<String>,
        examples: Vec<QaExample>,
    },
    MultiLabel {
        labels: Vec<String>,
        examples: Vec<MultiLabelDoc>,
    },
    Pair {
        examples: Vec<SentencePair>,
    },
}

impl LabeledData {
    pub fn len(&self) -> usize {
        match self {
            LabeledData::Relation { examples, .. } => examples.len(),
            LabeledData::Qa { examples, .. } => examples.len(),
            LabeledData::MultiLabel { examples, .. } => examples.len(),
            LabeledData::Pair { examples } => examples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> &[String] {
        match self {
            LabeledData::Relation { labels, .. }
            | LabeledData::Qa { labels, .. }
            | LabeledData::MultiLabel { labels, .. } => labels,
            LabeledData::Pair { .. } => &[],
        }
    }
}

pub const QA_DEFAULT_LABELS: [&str; 3] = ["maybe", "no", "yes"];
const LABELS_HEADER: &str = "# labels:";

fn sorted_unique<I: IntoIterator<Item = String>>(it: I) -> Vec<String> {
    it.into_iter().collect::<BTreeSet<_>>().into_iter().collect()
}

/// Tab-separated labeled text. An optional `# labels: a,b,c` line declares the label set;
/// other `#` lines and blank lines are skipped.
pub fn parse_labeled_text(text: &str, kind: LabeledKind) -> Result<LabeledData, DatasetError> {
    let mut declared: Option<Vec<String>> = None;
    let mut rows: Vec<(usize, Vec<&str>)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if let Some(rest) = line.strip_prefix(LABELS_HEADER) {
            declared = Some(sorted_unique(
                rest.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from),
            ));
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        rows.push((n + 1, line.split('\t').collect()));
    }
    let want = match kind {
        LabeledKind::Relation(_) | LabeledKind::MultiLabel => 2,
        LabeledKind::Qa | LabeledKind::Pair => 3,
    };
    for (line, f) in &rows {
        if f.len() != want {
            return Err(malformed(
                *line,
                format!("expected {want} tab-separated fields, got {}", f.len()),
            ));
        }
    }
    let check_label = |declared: &Option<Vec<String>>, line: usize, label: &str| -> Result<(), DatasetError> {
        match declared {
            Some(set) if !set.iter().any(|l| l == label) => Err(DatasetError::UnknownLabel {
                line,
                label: label.to_string(),
            }),
            _ if label.is_empty() => Err(malformed(line, "empty label")),
            _ => Ok(()),
        }
    };

    Ok(match kind {
        LabeledKind::Relation(family) => {
            let mut examples = Vec::with_capacity(rows.len());
            for (line, f) in &rows {
                family
                    .check(f[0])
                    .map_err(|message| DatasetError::Placeholder { line: *line, message })?;
                check_label(&declared, *line, f[1])?;
                examples.push(RelationExample {
                    sentence: f[0].to_string(),
                    label: f[1].to_string(),
                });
            }
            let labels = declared.unwrap_or_else(|| sorted_unique(examples.iter().map(|e| e.label.clone())));
            LabeledData::Relation {
                family,
                labels,
                examples,
            }
        }
        LabeledKind::Qa => {
            let declared = declared.or_else(|| Some(QA_DEFAULT_LABELS.iter().map(|s| s.to_string()).collect()));
            let mut examples = Vec::with_capacity(rows.len());
            for (line, f) in &rows {
                check_label(&declared, *line, f[2])?;
                examples.push(QaExample {
                    question: f[0].to_string(),
                    context: f[1].to_string(),
                    label: f[2].to_string(),
                });
            }
            LabeledData::Qa {
                labels: declared.unwrap(),
                examples,
            }
        }
        LabeledKind::MultiLabel => {
            let mut examples = Vec::with_capacity(rows.len());
            for (line, f) in &rows {
                let labels: Vec<String> = f[1]
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect();
                for l in &labels {
                    check_label(&declared, *line, l)?;
                }
                if labels.iter().collect::<BTreeSet<_>>().len() != labels.len() {
                    return Err(malformed(*line, "duplicate label"));
                }
                examples.push(MultiLabelDoc {
                    text: f[0].to_string(),
                    labels,
                });
            }
            let labels = declared.unwrap_or_else(|| sorted_unique(examples.iter().flat_map(|e| e.labels.clone())));
            LabeledData::MultiLabel { labels, examples }
        }
        LabeledKind::Pair => {
            let mut examples = Vec::with_capacity(rows.len());
            for (line, f) in &rows {
                let score: f64 = f[2]
                    .trim()
                    .parse()
                    .ok()
                    .filter(|s: &f64| s.is_finite())
                    .ok_or_else(|| malformed(*line, format!("score {:?} is not a finite number", f[2])))?;
                examples.push(SentencePair {
                    a: f[0].to_string(),
                    b: f[1].to_string(),
                    score,
                });
            }
            LabeledData::Pair { examples }
        }
    })
}

pub fn load_labeled_text(path: &Path, kind: LabeledKind) -> Result<LabeledData, DatasetError> {
    parse_labeled_text(&read(path)?, kind)
}

pub fn render_labeled_text(data: &LabeledData) -> String {
    let mut out = String::new();
    if !matches!(data, LabeledData::Pair { .. }) {
        let _ = writeln!(out, "{LABELS_HEADER} {}", data.labels().join(","));
    }
    match data {
        LabeledData::Relation { examples, .. } => {
            for e in examples {
                let _ = writeln!(out, "{}\t{}", e.sentence, e.label);
            }
        }
        LabeledData::Qa { examples, .. } => {
            for e in examples {
                let _ = writeln!(out, "{}\t{}\t{}", e.question, e.context, e.label);
            }
        }
        LabeledData::MultiLabel { examples, .. } => {
            for e in examples {
                let _ = writeln!(out, "{}\t{}", e.text, e.labels.join(","));
            }
        }
        LabeledData::Pair { examples } => {
            for e in examples {
                let _ = writeln!(out, "{}\t{}\t{}", e.a, e.b, e.score);
            }
        }
    }
    out
}

/// Validation and test shares; train receives the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPolicy {
    /// 80/10/10
    Large,
    /// 75/15/10
    Medium,
    /// 60/20/20
    Small,
}

impl SplitPolicy {
    pub const LARGE_MIN: usize = 5000;
    pub const SMALL_MAX: usize = 1000;

    pub fn for_size(n: usize) -> Self {
        if n >= Self::LARGE_MIN {
            SplitPolicy::Large
        } else if n <= Self::SMALL_MAX {
            SplitPolicy::Small
        } else {
            SplitPolicy::Medium
        }
    }

    /// Percent of examples in (validation, test).
    pub fn percentages(self) -> (usize, usize) {
        match self {
            SplitPolicy::Large => (10, 10),
            SplitPolicy::Medium => (15, 10),
            SplitPolicy::Small => (20, 20),
        }
    }

    /// `(train, validation, test)` sizes: validation and test are floored, train takes the rest.
    pub fn sizes(self, n: usize) -> (usize, usize, usize) {
        let (v, t) = self.percentages();
        let (val, test) = (n * v / 100, n * t / 100);
        (n - val - test, val, test)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then an exact partition per [`SplitPolicy::sizes`].
pub fn split_dataset<T>(mut examples: Vec<T>, policy: SplitPolicy, seed: u64) -> Result<Split<T>, DatasetError> {
    if examples.len() < 5 {
        return Err(DatasetError::TooFew(examples.len()));
    }
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, val, _) = policy.sizes(examples.len());
    let mut rest = examples.split_off(train);
    let test = rest.split_off(val);
    Ok(Split {
        train: examples,
        validation: rest,
        test,
    })
}

/// Task family a manifest entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Ner,
    Pico,
    Relation(RelationFamily),
    Qa,
    MultiLabel,
    Similarity,
}

impl TaskKind {
    pub fn name(self) -> String {
        match self {
            TaskKind::Ner => "ner".into(),
            TaskKind::Pico => "pico".into(),
            TaskKind::Relation(f) => format!("relation:{}", f.name()),
            TaskKind::Qa => "qa".into(),
            TaskKind::MultiLabel => "multilabel".into(),
            TaskKind::Similarity => "similarity".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "ner" => TaskKind::Ner,
            "pico" => TaskKind::Pico,
            "qa" => TaskKind::Qa,
            "multilabel" => TaskKind::MultiLabel,
            "similarity" => TaskKind::Similarity,
            _ => TaskKind::Relation(RelationFamily::from_name(s.strip_prefix("relation:")?)?),
        })
    }

    /// Labeled-text layout, or `None` for CoNLL-formatted tasks.
    pub fn labeled_kind(self) -> Option<LabeledKind> {
        match self {
            TaskKind::Ner | TaskKind::Pico => None,
            TaskKind::Relation(f) => Some(LabeledKind::Relation(f)),
            TaskKind::Qa => Some(LabeledKind::Qa),
            TaskKind::MultiLabel => Some(LabeledKind::MultiLabel),
            TaskKind::Similarity => Some(LabeledKind::Pair),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: TaskKind,
    pub path: PathBuf,
}

/// `name<TAB>kind<TAB>path` per line; relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>, DatasetError> {
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        if f.len() != 3 {
            return Err(DatasetError::Manifest(format!(
                "line {}: expected name<TAB>kind<TAB>path",
                n + 1
            )));
        }
        let kind = TaskKind::parse(f[1])
            .ok_or_else(|| DatasetError::Manifest(format!("line {}: unknown task kind {:?}", n + 1, f[1])))?;
        if entries.iter().any(|e| e.name == f[0]) {
            return Err(DatasetError::Manifest(format!(
                "line {}: duplicate dataset {:?}",
                n + 1,
                f[0]
            )));
        }
        entries.push(ManifestEntry {
            name: f[0].to_string(),
            kind,
            path: base.join(f[2]),
        });
    }
    Ok(entries)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DatasetError> {
    parse_manifest(&read(path)?, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_file() {
        let d = parse_conll("Aspirin\tB-Chemical\n\n").unwrap();
        assert_eq!(d.documents.len(), 1);
        assert_eq!(d.documents[0].sentences.len(), 1);
        assert_eq!(d.token_count(), 1);
        assert_eq!(d.tags, vec!["B-Chemical"]);
    }

    #[test]
    fn repairs_stray_inside_tags() {
        let d = parse_conll("the O\nkidney I-Disease\nfailure I-Disease\nand O\n").unwrap();
        assert_eq!(d.repairs, 1);
        assert_eq!(
            d.documents[0].sentences[0].tags,
            vec!["O", "B-Disease", "I-Disease", "O"]
        );
        let d = parse_conll("x B-A\ny I-B\n").unwrap();
        assert_eq!(d.repairs, 1);
        let d = parse_conll("x I-A\n").unwrap();
        assert_eq!(d.repairs, 1);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let e = parse_conll("a O\nb\n").unwrap_err();
        assert!(matches!(e, DatasetError::Malformed { line: 2, .. }));
        let e = parse_conll("a O\n\nb X-Y\n").unwrap_err();
        assert!(matches!(e, DatasetError::Malformed { line: 3, .. }));
    }

    #[test]
    fn docstart_separates_documents() {
        let d = parse_conll("-DOCSTART- O\n\na O\n\nb O\n-DOCSTART- O\nc B-X\n").unwrap();
        assert_eq!(d.documents.len(), 2);
        assert_eq!(d.documents[0].sentences.len(), 2);
        assert_eq!(parse_conll(&render_conll(&d.documents)).unwrap(), d);
    }

    #[test]
    fn relation_and_pair_lines() {
        let d = parse_labeled_text(
            "the @GENE$ causes @DISEASE$\t1\n",
            LabeledKind::Relation(RelationFamily::GeneDisease),
        )
        .unwrap();
        let LabeledData::Relation { examples, .. } = d else {
            panic!()
        };
        assert_eq!(examples[0].label, "1");
        let d = parse_labeled_text("a\tb\t2.5\n", LabeledKind::Pair).unwrap();
        let LabeledData::Pair { examples } = d else { panic!() };
        assert_eq!(examples[0].score, 2.5);
        let e = parse_labeled_text(
            "@DRUG$ with aspirin\tadvise\n",
            LabeledKind::Relation(RelationFamily::DrugDrug),
        )
        .unwrap_err();
        assert!(e.to_string().contains("expected 2 @DRUG$ placeholders"), "{e}");
    }

    #[test]
    fn unknown_labels_rejected() {
        let e = parse_labeled_text("q\tc\tperhaps\n", LabeledKind::Qa).unwrap_err();
        assert!(matches!(e, DatasetError::UnknownLabel { line: 1, .. }));
        let e = parse_labeled_text("# labels: a,b\ntext\ta,c\n", LabeledKind::MultiLabel).unwrap_err();
        assert!(matches!(e, DatasetError::UnknownLabel { line: 2, .. }));
    }

    #[test]
    fn split_sizes() {
        assert_eq!(SplitPolicy::Small.sizes(100), (60, 20, 20));
        assert_eq!(SplitPolicy::Large.sizes(10), (8, 1, 1));
        assert_eq!(SplitPolicy::Medium.sizes(100), (75, 15, 10));
        assert_eq!(SplitPolicy::for_size(5000), SplitPolicy::Large);
        assert_eq!(SplitPolicy::for_size(1000), SplitPolicy::Small);
        assert_eq!(SplitPolicy::for_size(1001), SplitPolicy::Medium);
        assert!(split_dataset(vec![1, 2, 3, 4], SplitPolicy::Small, 0).is_err());
    }

    #[test]
    fn manifest_kinds() {
        let m = parse_manifest(
            "ncbi\tner\tncbi.conll\nddi\trelation:drug-drug\t/abs/ddi.tsv\n",
            Path::new("/data"),
        )
        .unwrap();
        assert_eq!(m[0].path, PathBuf::from("/data/ncbi.conll"));
        assert_eq!(m[1].kind, TaskKind::Relation(RelationFamily::DrugDrug));
        assert_eq!(m[1].path, PathBuf::from("/abs/ddi.tsv"));
        assert!(parse_manifest("x\tbogus\tp\n", Path::new(".")).is_err());
        for k in [
            "ner",
            "pico",
            "qa",
            "multilabel",
            "similarity",
            "relation:gene-chemical",
        ] {
            assert_eq!(TaskKind::parse(k).unwrap().name(), k);
        }
    }
}
