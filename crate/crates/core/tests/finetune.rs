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

use std::path::Path;

use medbert::datasets::{load_conll, load_labeled_text, LabeledData, LabeledKind, RelationFamily, TaskKind};
use medbert::finetune::{
    align_labels, decode_bio, encode_bio, finetune, hyperparameters_for, labeled_examples, predict, token_examples,
    FinetuneConfig, FinetuneError, FinetuneExample, Predictions, TaskModel, TaskSpec, HEAD_BIAS, HEAD_WEIGHT,
};
use medbert::metrics::Span;
use medbert::model::{BertModel, ModelConfig};
use medbert::numerics::Tensor;
use medbert::tokenizer::{encode_words, train_bpe, BpeOptions, Vocabulary, SPECIAL_TOKENS};
use proptest::prelude::*;

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn fixture_vocab(extra: &[&str]) -> Vocabulary {
    let tokens = SPECIAL_TOKENS.iter().chain(extra).map(|s| s.to_string()).collect();
    Vocabulary::new(tokens, Vec::new()).unwrap()
}

#[test]
fn first_subword_carries_the_label() {
    let v = fixture_vocab(&["nephro", "##pathy", "renal"]);
    let t = encode_words(&["renal", "nephropathy"], &v);
    assert_eq!(
        align_labels(&[0, 2], &t.word_starts).unwrap(),
        vec![Some(0), Some(2), None]
    );
    assert!(matches!(
        align_labels(&[0], &t.word_starts),
        Err(FinetuneError::Misaligned(_))
    ));
    let single = encode_words(&["renal", "renal"], &v);
    assert_eq!(
        align_labels(&[4, 1], &single.word_starts).unwrap(),
        vec![Some(4), Some(1)]
    );
}

#[test]
fn eight_words_eleven_pieces() {
    let v = fixture_vocab(&[
        "Cis", "##platin", "induced", "acute", "kid", "##ney", "in", "##jury", "rats", ".",
    ]);
    let words = ["Cisplatin", "induced", "acute", "kidney", "injury", "in", "rats", "."];
    let t = encode_words(&words, &v);
    assert_eq!(t.len(), 11);
    let labels = align_labels(&[1, 0, 2, 3, 3, 0, 0, 0], &t.word_starts).unwrap();
    assert_eq!(labels.iter().filter(|l| l.is_some()).count(), 8);
}

#[test]
fn decode_bio_cases() {
    assert_eq!(decode_bio(&["B-Chem", "I-Chem", "O"]), vec![Span::new(0, 1, "Chem")]);
    assert!(decode_bio(&["O", "O"]).is_empty());
    assert_eq!(
        decode_bio(&["B-A", "I-B"]),
        vec![Span::new(0, 0, "A"), Span::new(1, 1, "B")]
    );
    assert_eq!(decode_bio(&["O", "I-A", "I-A"]), vec![Span::new(1, 2, "A")]);
}

#[test]
fn override_table() {
    let j = hyperparameters_for("jnlpba", TaskKind::Ner);
    assert_eq!(j.lr, 1e-5);
    let d = hyperparameters_for("ddi", TaskKind::Relation(RelationFamily::DrugDrug));
    assert_eq!((d.lr, d.epochs), (3e-5, 10));
    let n = hyperparameters_for("ncbi-disease", TaskKind::Ner);
    assert_eq!((n.lr, n.batch_size), (5e-5, 16));
    assert!(n.epochs >= 5 && n.epochs <= 25);
}

#[test]
fn config_bounds() {
    let ok = FinetuneConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        FinetuneConfig {
            batch_size: 8,
            ..ok.clone()
        },
        FinetuneConfig {
            epochs: 101,
            ..ok.clone()
        },
        FinetuneConfig { lr: 0.0, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(FinetuneError::InvalidConfig(_))));
    }
}

fn tiny_encoder(vocab: &Vocabulary) -> BertModel {
    let mut cfg = ModelConfig::small(vocab.len(), 16, 1, 2, 32);
    cfg.dropout = 0.0;
    BertModel::init(cfg, 1).unwrap()
}

fn head(tm: &mut TaskModel, weight_scale: f64, bias: &[f64]) {
    let w = tm.encoder.params.get(HEAD_WEIGHT).unwrap().clone();
    let scaled = Tensor::new(w.shape().to_vec(), w.data().iter().map(|x| x * weight_scale).collect()).unwrap();
    tm.encoder.params.set(HEAD_WEIGHT, scaled).unwrap();
    tm.encoder.params.set(HEAD_BIAS, Tensor::vector(bias)).unwrap();
}

#[test]
fn uniform_qa_logits_pick_maybe() {
    let v = fixture_vocab(&["is", "it", "safe", "yes"]);
    let task = TaskSpec::QaClassification(strings(&["maybe", "no", "yes"]));
    let mut tm = TaskModel::new(tiny_encoder(&v), task, 0).unwrap();
    head(&mut tm, 0.0, &[0.0, 0.0, 0.0]);
    let ex = vec![FinetuneExample::Sequence {
        a: "is it safe".into(),
        b: Some("yes".into()),
        label: 2,
    }];
    let Predictions::Classes(c) = predict(&tm, &v, &ex, 32).unwrap().predictions else {
        panic!()
    };
    assert_eq!(c, vec![0]);
}

#[test]
fn multilabel_threshold() {
    let v = fixture_vocab(&["cell", "growth"]);
    let task = TaskSpec::MultiLabel(strings(&["a", "b"]));
    let mut tm = TaskModel::new(tiny_encoder(&v), task, 0).unwrap();
    let logit = |p: f64| (p / (1.0 - p)).ln();
    head(&mut tm, 0.0, &[logit(0.51), logit(0.49)]);
    let ex = vec![FinetuneExample::MultiLabel {
        text: "cell growth".into(),
        labels: vec![true, false],
    }];
    let Predictions::LabelSets(s) = predict(&tm, &v, &ex, 32).unwrap().predictions else {
        panic!()
    };
    assert_eq!(s, vec![vec![true, false]]);
}

#[test]
fn identical_sentences_score_four() {
    let v = fixture_vocab(&["renal", "failure", "was", "observed"]);
    let tm = TaskModel::new(tiny_encoder(&v), TaskSpec::Similarity, 0).unwrap();
    let ex = vec![
        FinetuneExample::Pair {
            a: "renal failure was observed".into(),
            b: "renal failure was observed".into(),
            score: 4.0,
        },
        FinetuneExample::Pair {
            a: "renal failure".into(),
            b: "was observed".into(),
            score: 1.0,
        },
    ];
    let Predictions::Scores(s) = predict(&tm, &v, &ex, 32).unwrap().predictions else {
        panic!()
    };
    assert!((s[0] - 4.0).abs() < 1e-9, "{}", s[0]);
    assert!((0.0..=4.0).contains(&s[1]));
}

#[test]
fn argmax_predictions_ignore_positive_scaling() {
    let conll = load_conll(&fixture("ner_10.conll")).unwrap();
    let corpus: Vec<String> = conll.sentences().map(|s| s.words.join(" ")).collect();
    let vocab = train_bpe(&corpus, 150, 1, BpeOptions::default()).unwrap();
    let (task, ex) = token_examples(&conll);
    let tm = TaskModel::new(tiny_encoder(&vocab), task, 4).unwrap();
    let base = predict(&tm, &vocab, &ex, 32).unwrap().predictions;
    let bias: Vec<f64> = tm.encoder.params.get(HEAD_BIAS).unwrap().data().to_vec();
    for c in [0.25, 3.0, 40.0] {
        let mut scaled = TaskModel {
            encoder: tm.encoder.clone(),
            task: tm.task.clone(),
        };
        head(&mut scaled, c, &bias.iter().map(|b| b * c).collect::<Vec<_>>());
        assert_eq!(predict(&scaled, &vocab, &ex, 32).unwrap().predictions, base);
    }
}

#[test]
fn zero_epochs_evaluate_once() {
    let conll = load_conll(&fixture("ner_10.conll")).unwrap();
    let corpus: Vec<String> = conll.sentences().map(|s| s.words.join(" ")).collect();
    let vocab = train_bpe(&corpus, 150, 1, BpeOptions::default()).unwrap();
    let (task, ex) = token_examples(&conll);
    let encoder = tiny_encoder(&vocab);
    let cfg = FinetuneConfig {
        epochs: 0,
        max_seq: 32,
        ..FinetuneConfig::default()
    };
    let run = finetune(encoder.clone(), task.clone(), &ex, &[], &vocab, &cfg).unwrap();
    assert_eq!(run.trace.len(), 1);
    assert_eq!(run.trace[0].train_loss, None);
    let fresh = TaskModel::new(encoder, task, cfg.seed).unwrap();
    for id in fresh.encoder.params.ids() {
        let name = fresh.encoder.params.name(id);
        assert_eq!(
            fresh.encoder.params.value(id).data(),
            run.model.encoder.params.get(name).unwrap().data(),
            "{name}"
        );
    }
}

#[test]
fn labels_outside_the_task_are_rejected() {
    let v = fixture_vocab(&["x"]);
    let task = TaskSpec::SequenceClassification(strings(&["0", "1"]));
    let ex = vec![FinetuneExample::Sequence {
        a: "x".into(),
        b: None,
        label: 5,
    }];
    let cfg = FinetuneConfig {
        epochs: 1,
        max_seq: 32,
        ..FinetuneConfig::default()
    };
    assert!(finetune(tiny_encoder(&v), task, &ex, &[], &v, &cfg).is_err());
}

fn fixture_setup() -> (Vocabulary, LabeledData, medbert::datasets::ConllData) {
    let conll = load_conll(&fixture("ner_10.conll")).unwrap();
    let rel = load_labeled_text(
        &fixture("relation_20.tsv"),
        LabeledKind::Relation(RelationFamily::GeneDisease),
    )
    .unwrap();
    let mut corpus: Vec<String> = conll.sentences().map(|s| s.words.join(" ")).collect();
    if let LabeledData::Relation { examples, .. } = &rel {
        corpus.extend(examples.iter().map(|e| e.sentence.clone()));
    }
    let vocab = train_bpe(&corpus, 200, 1, BpeOptions::default()).unwrap();
    (vocab, rel, conll)
}

fn small_encoder(vocab: &Vocabulary) -> BertModel {
    BertModel::init(ModelConfig::small(vocab.len(), 64, 2, 2, 64), 0).unwrap()
}

#[test]
fn ner_fixture_is_learnable() {
    let (vocab, _, conll) = fixture_setup();
    let (task, ex) = token_examples(&conll);
    let cfg = FinetuneConfig {
        lr: 3e-3,
        epochs: 40,
        max_seq: 64,
        ..FinetuneConfig::default()
    };
    let run = finetune(small_encoder(&vocab), task, &ex, &[], &vocab, &cfg).unwrap();
    let best = run.trace.iter().filter_map(|r| r.metrics.get("f1")).fold(0.0, f64::max);
    assert_eq!(best, 1.0);
    let first = run.trace[1].train_loss.unwrap();
    let last = run.trace.last().unwrap().train_loss.unwrap();
    assert!(last < first / 10.0, "{first} -> {last}");
}

#[test]
fn relation_fixture_is_learnable() {
    let (vocab, rel, _) = fixture_setup();
    let (task, ex) = labeled_examples(&rel).unwrap();
    let cfg = FinetuneConfig {
        lr: 1e-3,
        epochs: 40,
        max_seq: 64,
        ..FinetuneConfig::default()
    };
    let run = finetune(small_encoder(&vocab), task, &ex, &[], &vocab, &cfg).unwrap();
    assert_eq!(run.trace.last().unwrap().metrics.get("accuracy"), Some(1.0));
}

fn arb_spans(len: usize) -> impl Strategy<Value = Vec<Span>> {
    // Non-overlapping spans built by walking left to right.
    proptest::collection::vec((0usize..3, 0usize..3, 0usize..3), 0..6).prop_map(move |steps| {
        let mut spans = Vec::new();
        let mut at = 0;
        for (gap, width, ty) in steps {
            let start = at + gap;
            let end = start + width;
            if end >= len {
                break;
            }
            spans.push(Span::new(start, end, ["Gene", "Disease", "Chemical"][ty]));
            at = end + 1;
        }
        spans
    })
}

proptest! {
    #[test]
    fn decode_inverts_encode(spans in arb_spans(20)) {
        let tags = encode_bio(&spans, 20);
        prop_assert_eq!(tags.len(), 20);
        prop_assert_eq!(decode_bio(&tags), spans);
    }

    #[test]
    fn alignment_keeps_one_label_per_word(starts in proptest::collection::vec(any::<bool>(), 0..40)) {
        let words = starts.iter().filter(|&&s| s).count();
        let labels: Vec<usize> = (0..words).collect();
        let aligned = align_labels(&labels, &starts).unwrap();
        prop_assert_eq!(aligned.iter().flatten().copied().collect::<Vec<_>>(), labels);
        for (a, s) in aligned.iter().zip(&starts) {
            prop_assert_eq!(a.is_some(), *s);
        }
    }
}
