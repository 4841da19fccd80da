//! Human annotation study: class-balanced diagnostic sampling, annotation
//! records and the agreement report.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::talk_move::TalkMove;
use crate::windowing::{window_from_context, ContextItem, Example, Origin, WindowConfig};

/// Per-class quota of the diagnostic set, in listing order.
pub const DIAGNOSTIC_COMPOSITION: [(TalkMove, usize); TalkMove::COUNT] = [
    (TalkMove::None, 37),
    (TalkMove::Wait, 37),
    (TalkMove::Restating, 37),
    (TalkMove::Revoicing, 37),
    (TalkMove::PressForAccuracy, 38),
    (TalkMove::KeepingEveryoneTogether, 38),
    (TalkMove::GettingStudentsToRelate, 38),
    (TalkMove::PressForReasoning, 38),
];

pub const DIAGNOSTIC_SIZE: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticSet {
    pub examples: Vec<Example>,
    pub source: String,
    pub seed: u64,
}

/// Draws the fixed per-class quota uniformly without replacement from the
/// given dev examples, then shuffles so labels are not grouped. Every
/// class is checked before any sampling; the first short class is
/// reported.
pub fn sample_diagnostic(dev: &[Example], seed: u64) -> Result<DiagnosticSet> {
    let mut seen = HashSet::new();
    let mut by_class: BTreeMap<TalkMove, Vec<&Example>> = BTreeMap::new();
    for e in dev {
        if seen.insert(&e.origin) {
            by_class.entry(e.label).or_default().push(e);
        }
    }
    for (class, need) in DIAGNOSTIC_COMPOSITION {
        let have = by_class.get(&class).map_or(0, Vec::len);
        if have < need {
            return Err(Error::InsufficientClass {
                class: class.name().into(),
                need,
                have,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples: Vec<Example> = Vec::with_capacity(DIAGNOSTIC_SIZE);
    for (class, need) in DIAGNOSTIC_COMPOSITION {
        examples.extend(by_class[&class].choose_multiple(&mut rng, need).map(|e| (*e).clone()));
    }
    examples.shuffle(&mut rng);
    Ok(DiagnosticSet {
        examples,
        source: "dev".into(),
        seed,
    })
}

pub fn composition(examples: &[Example]) -> [usize; TalkMove::COUNT] {
    let mut c = [0; TalkMove::COUNT];
    for e in examples {
        c[e.label.index()] += 1;
    }
    c
}

/// One exported diagnostic example: the window as readable context items
/// (padding omitted; `padding` counts the leading pad slots) and the gold
/// next move.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticItem {
    pub example_id: String,
    pub origin: Origin,
    pub label: TalkMove,
    pub window: usize,
    pub padding: usize,
    pub context: Vec<ContextItem>,
    pub utterance_idx: Vec<u64>,
}

impl DiagnosticItem {
    /// Looks the window's utterances up in `corpus` to recover their text.
    pub fn from_example(e: &Example, corpus: &Corpus) -> Result<Self> {
        let t = corpus
            .transcript(&e.origin.transcript_id)
            .ok_or_else(|| Error::invalid(format!("example {} refers to an unknown transcript", e.id())))?;
        let mut context = Vec::new();
        let mut utterance_idx = Vec::new();
        for el in e.window.iter().filter(|el| !el.is_pad()) {
            let idx = el
                .utterance_idx
                .ok_or_else(|| Error::invalid(format!("example {} lacks utterance indices", e.id())))?;
            let u = t
                .utterances
                .iter()
                .find(|u| u.idx == idx)
                .ok_or_else(|| Error::invalid(format!("utterance {idx} not found in {}", t.id)))?;
            context.push(ContextItem::from_utterance(u, el.speaker_change));
            utterance_idx.push(idx);
        }
        Ok(DiagnosticItem {
            example_id: e.id(),
            origin: e.origin.clone(),
            label: e.label,
            window: e.window.len(),
            padding: e.pad_count(),
            context,
            utterance_idx,
        })
    }

    /// Rebuilds the model input from the exported context.
    pub fn to_example(&self, vocab: &Vocabulary) -> Result<Example> {
        let (mut window, _) = window_from_context(&self.context, vocab, WindowConfig::new(self.window)?)?;
        let pads = window.len() - self.context.len();
        for (el, idx) in window[pads..].iter_mut().zip(&self.utterance_idx) {
            el.utterance_idx = Some(*idx);
        }
        Ok(Example {
            window,
            label: self.label,
            origin: self.origin.clone(),
        })
    }
}

pub fn export_diagnostic(set: &DiagnosticSet, corpus: &Corpus) -> Result<Vec<DiagnosticItem>> {
    set.examples.iter().map(|e| DiagnosticItem::from_example(e, corpus)).collect()
}

pub fn write_diagnostic(items: &[DiagnosticItem], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_diagnostic(path: &Path) -> Result<Vec<DiagnosticItem>> {
    let r = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: DiagnosticItem = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !ids.insert(item.example_id.clone()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("duplicate example id {}", item.example_id),
            });
        }
        items.push(item);
    }
    Ok(items)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub annotator_id: String,
    pub example_id: String,
    pub primary: TalkMove,
    pub acceptable: BTreeSet<TalkMove>,
    /// Milliseconds since the Unix epoch.
    #[serde(default)]
    pub timestamp: u64,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        if self.annotator_id.trim().is_empty() {
            return Err(Error::invalid("annotator_id is empty"));
        }
        if self.example_id.trim().is_empty() {
            return Err(Error::invalid("example_id is empty"));
        }
        if self.acceptable.is_empty() {
            return Err(Error::invalid("acceptable set is empty"));
        }
        if !self.acceptable.contains(&self.primary) {
            return Err(Error::invalid(format!(
                "primary {} is not in the acceptable set",
                self.primary
            )));
        }
        Ok(())
    }
}

/// Anything with an example id and a single chosen move.
pub trait Primary {
    fn example_id(&self) -> &str;
    fn primary(&self) -> TalkMove;
}

impl Primary for AnnotationRecord {
    fn example_id(&self) -> &str {
        &self.example_id
    }

    fn primary(&self) -> TalkMove {
        self.primary
    }
}

impl Primary for (String, TalkMove) {
    fn example_id(&self) -> &str {
        &self.0
    }

    fn primary(&self) -> TalkMove {
        self.1
    }
}

fn check_aligned<A: Primary, B: Primary>(a: &[A], b: &[B]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::IdMismatch(format!("{} vs {} records", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid("no records to compare"));
    }
    for (x, y) in a.iter().zip(b) {
        if x.example_id() != y.example_id() {
            return Err(Error::IdMismatch(format!("{} vs {}", x.example_id(), y.example_id())));
        }
    }
    Ok(())
}

fn percent(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

/// Percentage of examples on which both sides chose the same move. Both
/// slices must list the same example ids in the same order.
pub fn primary_agreement<A: Primary, B: Primary>(a: &[A], b: &[B]) -> Result<f64> {
    check_aligned(a, b)?;
    let hits = a.iter().zip(b).filter(|(x, y)| x.primary() == y.primary()).count();
    Ok(percent(hits, a.len()))
}

/// Percentage of examples on which `source`'s move is in the judge's
/// acceptable set.
pub fn acceptance_rate<S: Primary>(source: &[S], judge: &[AnnotationRecord]) -> Result<f64> {
    check_aligned(source, judge)?;
    let hits = source
        .iter()
        .zip(judge)
        .filter(|(s, j)| j.acceptable.contains(&s.primary()))
        .count();
    Ok(percent(hits, source.len()))
}

/// Orders one annotator's records by `ids`. Every id must be covered
/// exactly once.
pub fn align_records(records: &[AnnotationRecord], ids: &[String]) -> Result<Vec<AnnotationRecord>> {
    let mut by_id: BTreeMap<&str, &AnnotationRecord> = BTreeMap::new();
    for r in records {
        if by_id.insert(&r.example_id, r).is_some() {
            return Err(Error::IdMismatch(format!("duplicate record for {}", r.example_id)));
        }
    }
    if by_id.len() != ids.len() {
        return Err(Error::IdMismatch(format!(
            "{} records for {} examples",
            by_id.len(),
            ids.len()
        )));
    }
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|r| (*r).clone())
                .ok_or_else(|| Error::IdMismatch(format!("no record for {id}")))
        })
        .collect()
}

/// Agreement percentages over the diagnostic set. Rows that need a second
/// annotator are `None` when only one is available.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub examples: usize,
    pub annotators: Vec<String>,
    pub inter_annotator: Option<f64>,
    pub annotator1_vs_ground_truth: f64,
    pub annotator2_vs_ground_truth: Option<f64>,
    pub both_vs_ground_truth: Option<f64>,
    pub model_vs_annotator1: f64,
    pub model_vs_annotator2: Option<f64>,
    pub model_vs_ground_truth: f64,
    pub annotator1_accepted_by_annotator2: Option<f64>,
    pub annotator2_accepted_by_annotator1: Option<f64>,
    pub ground_truth_accepted_by_annotator1: f64,
    pub ground_truth_accepted_by_annotator2: Option<f64>,
    pub model_accepted_by_annotator1: f64,
    pub model_accepted_by_annotator2: Option<f64>,
    pub mean_acceptable_size: f64,
    pub annotator1_eval: EvalReport,
    pub annotator2_eval: Option<EvalReport>,
    pub model_eval: EvalReport,
}

impl AgreementReport {
    /// The thirteen table rows, in order.
    pub fn rows(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("Inter-annotator agreement", self.inter_annotator),
            ("Annotator 1 vs ground truth", Some(self.annotator1_vs_ground_truth)),
            ("Annotator 2 vs ground truth", self.annotator2_vs_ground_truth),
            ("Both annotators vs ground truth", self.both_vs_ground_truth),
            ("Model vs Annotator 1", Some(self.model_vs_annotator1)),
            ("Model vs Annotator 2", self.model_vs_annotator2),
            ("Model vs ground truth", Some(self.model_vs_ground_truth)),
            ("Annotator 1 primary accepted by Annotator 2", self.annotator1_accepted_by_annotator2),
            ("Annotator 2 primary accepted by Annotator 1", self.annotator2_accepted_by_annotator1),
            ("Ground truth accepted by Annotator 1", Some(self.ground_truth_accepted_by_annotator1)),
            ("Ground truth accepted by Annotator 2", self.ground_truth_accepted_by_annotator2),
            ("Model predictions accepted by Annotator 1", Some(self.model_accepted_by_annotator1)),
            ("Model predictions accepted by Annotator 2", self.model_accepted_by_annotator2),
        ]
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Measure | % |\n|---|---|\n");
        for (name, v) in self.rows() {
            match v {
                Some(v) => {
                    let _ = writeln!(s, "| {name} | {v:.1} |");
                }
                None => {
                    let _ = writeln!(s, "| {name} | n/a |");
                }
            }
        }
        let _ = writeln!(s, "| Mean acceptable-set size | {:.2} |", self.mean_acceptable_size);
        let _ = writeln!(s, "\nExamples: {}; annotators: {}", self.examples, self.annotators.join(", "));
        s
    }
}

/// Fills every agreement row. `ids`, `ground_truth` and `model` are
/// parallel; annotator records may arrive in any order and are aligned to
/// `ids`.
pub fn agreement_report(
    ids: &[String],
    ground_truth: &[TalkMove],
    model: &[TalkMove],
    ann1: &[AnnotationRecord],
    ann2: Option<&[AnnotationRecord]>,
) -> Result<AgreementReport> {
    if ids.len() != ground_truth.len() || ids.len() != model.len() {
        return Err(Error::Shape(format!(
            "{} ids, {} gold labels, {} predictions",
            ids.len(),
            ground_truth.len(),
            model.len()
        )));
    }
    for r in ann1.iter().chain(ann2.into_iter().flatten()) {
        r.validate()?;
    }
    let gt: Vec<(String, TalkMove)> = ids.iter().cloned().zip(ground_truth.iter().copied()).collect();
    let pred: Vec<(String, TalkMove)> = ids.iter().cloned().zip(model.iter().copied()).collect();
    let a1 = align_records(ann1, ids)?;
    let a2 = ann2.map(|r| align_records(r, ids)).transpose()?;
    let name = |r: &[AnnotationRecord]| r.first().map(|x| x.annotator_id.clone()).unwrap_or_default();

    let primaries = |r: &[AnnotationRecord]| r.iter().map(|x| x.primary).collect::<Vec<_>>();
    let mut sizes: Vec<usize> = a1.iter().map(|r| r.acceptable.len()).collect();
    let mut annotators = vec![name(&a1)];
    let mut report = AgreementReport {
        examples: ids.len(),
        annotators: Vec::new(),
        inter_annotator: None,
        annotator1_vs_ground_truth: primary_agreement(&a1, &gt)?,
        annotator2_vs_ground_truth: None,
        both_vs_ground_truth: None,
        model_vs_annotator1: primary_agreement(&pred, &a1)?,
        model_vs_annotator2: None,
        model_vs_ground_truth: primary_agreement(&pred, &gt)?,
        annotator1_accepted_by_annotator2: None,
        annotator2_accepted_by_annotator1: None,
        ground_truth_accepted_by_annotator1: acceptance_rate(&gt, &a1)?,
        ground_truth_accepted_by_annotator2: None,
        model_accepted_by_annotator1: acceptance_rate(&pred, &a1)?,
        model_accepted_by_annotator2: None,
        mean_acceptable_size: 0.0,
        annotator1_eval: evaluate(ground_truth, &primaries(&a1))?,
        annotator2_eval: None,
        model_eval: evaluate(ground_truth, model)?,
    };
    if let Some(a2) = &a2 {
        annotators.push(name(a2));
        sizes.extend(a2.iter().map(|r| r.acceptable.len()));
        let both = a1
            .iter()
            .zip(a2)
            .zip(ground_truth)
            .filter(|((x, y), g)| x.primary == **g && y.primary == **g)
            .count();
        report.inter_annotator = Some(primary_agreement(&a1, a2)?);
        report.annotator2_vs_ground_truth = Some(primary_agreement(a2, &gt)?);
        report.both_vs_ground_truth = Some(percent(both, ids.len()));
        report.model_vs_annotator2 = Some(primary_agreement(&pred, a2)?);
        report.annotator1_accepted_by_annotator2 = Some(acceptance_rate(&a1, a2)?);
        report.annotator2_accepted_by_annotator1 = Some(acceptance_rate(a2, &a1)?);
        report.ground_truth_accepted_by_annotator2 = Some(acceptance_rate(&gt, a2)?);
        report.model_accepted_by_annotator2 = Some(acceptance_rate(&pred, a2)?);
        report.annotator2_eval = Some(evaluate(ground_truth, &primaries(a2))?);
    }
    report.annotators = annotators;
    report.mean_acceptable_size = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::windowing::ContextElement;
    use TalkMove::*;

    fn example(tid: &str, pos: usize, label: TalkMove) -> Example {
        Example {
            window: vec![ContextElement::pad()],
            label,
            origin: Origin {
                transcript_id: tid.into(),
                position: pos,
            },
        }
    }

    fn pool(per_class: usize) -> Vec<Example> {
        TalkMove::ALL
            .iter()
            .flat_map(|&m| (0..per_class).map(move |i| example(m.name(), i, m)))
            .collect()
    }

    fn rec(ann: &str, id: usize, primary: TalkMove, acceptable: &[TalkMove]) -> AnnotationRecord {
        AnnotationRecord {
            annotator_id: ann.into(),
            example_id: format!("e{id}"),
            primary,
            acceptable: acceptable.iter().copied().chain([primary]).collect(),
            timestamp: 0,
        }
    }

    #[test]
    fn composition_is_fixed() {
        let set = sample_diagnostic(&pool(50), 3).unwrap();
        assert_eq!(set.examples.len(), DIAGNOSTIC_SIZE);
        let c = composition(&set.examples);
        for (m, n) in DIAGNOSTIC_COMPOSITION {
            assert_eq!(c[m.index()], n);
        }
        assert_eq!(sample_diagnostic(&pool(50), 3).unwrap(), set);
        assert_ne!(sample_diagnostic(&pool(50), 4).unwrap(), set);
    }

    #[test]
    fn short_class_is_named() {
        let mut dev = pool(40);
        dev.retain(|e| e.label != Revoicing || e.origin.position < 10);
        let err = sample_diagnostic(&dev, 0).unwrap_err();
        assert_eq!(err.to_string(), "Revoicing: need 37, have 10");
    }

    #[test]
    fn duplicate_origins_count_once() {
        let mut dev = pool(38);
        dev.push(example("Wait", 0, Wait));
        let set = sample_diagnostic(&dev, 1).unwrap();
        let ids: HashSet<String> = set.examples.iter().map(Example::id).collect();
        assert_eq!(ids.len(), DIAGNOSTIC_SIZE);
    }

    #[test]
    fn hand_counts() {
        let a = vec![rec("a", 0, None, &[]), rec("a", 1, Wait, &[]), rec("a", 2, Revoicing, &[])];
        let b = vec![rec("b", 0, None, &[]), rec("b", 1, Revoicing, &[]), rec("b", 2, Wait, &[])];
        let p = primary_agreement(&a, &b).unwrap();
        assert!((p - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(p, primary_agreement(&b, &a).unwrap());
        assert_eq!(primary_agreement(&a, &a).unwrap(), 100.0);

        let judge: Vec<_> = (0..4).map(|i| rec("j", i, None, &[Wait])).collect();
        let src: Vec<(String, TalkMove)> = [None, Wait, Wait, Revoicing]
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("e{i}"), *m))
            .collect();
        assert_eq!(acceptance_rate(&src, &judge).unwrap(), 75.0);
    }

    #[test]
    fn acceptance_collapses_to_agreement_for_singleton_sets() {
        let a = vec![rec("a", 0, None, &[]), rec("a", 1, Wait, &[])];
        let b = vec![rec("b", 0, None, &[]), rec("b", 1, Revoicing, &[])];
        assert_eq!(acceptance_rate(&a, &b).unwrap(), primary_agreement(&a, &b).unwrap());
        let all: Vec<_> = (0..2).map(|i| rec("c", i, Wait, &TalkMove::ALL)).collect();
        assert_eq!(acceptance_rate(&a, &all).unwrap(), 100.0);
    }

    #[test]
    fn id_mismatch_is_reported() {
        let a = vec![rec("a", 0, None, &[])];
        let b = vec![rec("b", 1, None, &[])];
        assert!(matches!(primary_agreement(&a, &b), Err(Error::IdMismatch(_))));
        assert!(matches!(acceptance_rate(&a, &b[..0]), Err(Error::IdMismatch(_))));
    }

    #[test]
    fn record_invariants() {
        let mut r = rec("a", 0, None, &[]);
        r.validate().unwrap();
        r.acceptable = [Wait].into();
        assert!(r.validate().is_err());
        r.acceptable.clear();
        assert!(r.validate().is_err());
        let bad = r#"{"annotator_id":"a","example_id":"e","primary":"None","acceptable":["Bogus"]}"#;
        assert!(serde_json::from_str::<AnnotationRecord>(bad).is_err());
    }

    #[test]
    fn report_with_known_overlap() {
        let n = 100;
        let ids: Vec<String> = (0..n).map(|i| format!("e{i}")).collect();
        let gt = vec![None; n];
        // a1 matches gt on the first 60, a2 on the first 46 and the last 20.
        let a1: Vec<_> = (0..n).map(|i| rec("a1", i, if i < 60 { None } else { Wait }, &[])).collect();
        let a2: Vec<_> = (0..n)
            .map(|i| rec("a2", i, if i < 46 || i >= 80 { None } else { Revoicing }, &[Restating]))
            .collect();
        let r = agreement_report(&ids, &gt, &gt, &a1, Some(&a2)).unwrap();
        assert_eq!(r.inter_annotator, Some(46.0));
        assert_eq!(r.annotator1_vs_ground_truth, 60.0);
        assert_eq!(r.annotator2_vs_ground_truth, Some(66.0));
        assert_eq!(r.both_vs_ground_truth, Some(46.0));
        assert_eq!(r.model_vs_ground_truth, 100.0);
        assert_eq!(r.ground_truth_accepted_by_annotator2, Some(66.0));
        assert_eq!(r.mean_acceptable_size, 1.5);
        assert_eq!(r.rows().len(), 13);
        assert!(r.to_markdown().contains("| Inter-annotator agreement | 46.0 |"));
    }

    #[test]
    fn single_annotator_report_leaves_pair_rows_empty() {
        let ids: Vec<String> = (0..2).map(|i| format!("e{i}")).collect();
        let a1 = vec![rec("a1", 1, Wait, &[]), rec("a1", 0, None, &[])];
        let r = agreement_report(&ids, &[None, Wait], &[None, None], &a1, Option::None).unwrap();
        assert_eq!(r.inter_annotator, Option::None);
        assert_eq!(r.annotator1_vs_ground_truth, 100.0);
        assert_eq!(r.model_vs_annotator1, 50.0);
        assert!(r.to_markdown().contains("n/a"));
    }

    #[test]
    fn export_round_trips_to_the_same_window() {
        use crate::corpus::{generate_synthetic, split_corpus, Bucket, SyntheticConfig};
        use crate::windowing::examples_for_bucket;
        let cfg = SyntheticConfig {
            num_transcripts: 6,
            mean_length: 10,
            transition_matrix: SyntheticConfig::uniform(),
            lexical_cue_strength: 0.5,
            seed: 2,
            initial: Option::None,
        };
        let corpus = split_corpus(generate_synthetic(&cfg).unwrap(), 0).unwrap();
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let dev = examples_for_bucket(&corpus, Bucket::Train, &vocab, WindowConfig::new(5).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diag.jsonl");
        let items: Vec<DiagnosticItem> = dev.iter().map(|e| DiagnosticItem::from_example(e, &corpus).unwrap()).collect();
        write_diagnostic(&items, &path).unwrap();
        let back = read_diagnostic(&path).unwrap();
        assert_eq!(back, items);
        for (item, e) in back.iter().zip(&dev) {
            assert_eq!(&item.to_example(&vocab).unwrap(), e);
        }
    }
}
