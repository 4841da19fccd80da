//! Annotated classroom transcripts: ingestion, label normalization, the
//! document-level train/dev/test split, vocabulary and synthetic corpora.

mod synthetic;
mod tokenize;
mod vocab;

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::talk_move::TalkMove;

pub use synthetic::{generate_synthetic, SyntheticConfig};
pub use tokenize::{split_sentences, tokenize, tokenize_sentence};
pub use vocab::Vocabulary;

pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    /// Source ordinal from the transcript file; strictly increasing.
    pub idx: u64,
    pub speaker_id: String,
    pub role: Role,
    pub text: String,
    pub talk_move: TalkMove,
}

impl Utterance {
    /// Students always map to Wait; teachers never do.
    pub fn validate(&self) -> Result<()> {
        match (self.role, self.talk_move) {
            (Role::Student, TalkMove::Wait) => Ok(()),
            (Role::Student, other) => Err(Error::invalid(format!(
                "student utterance {} carries non-Wait label {other}",
                self.idx
            ))),
            (Role::Teacher, TalkMove::Wait) => Err(Error::invalid(format!(
                "teacher utterance {} carries the Wait label",
                self.idx
            ))),
            (Role::Teacher, _) => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Bucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Bucket::Train),
            "dev" => Ok(Bucket::Dev),
            "test" => Ok(Bucket::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?} (expected train, dev or test)"))),
        }
    }
}

/// Transcripts plus their split assignment. The split map is empty until
/// [`split_corpus`] runs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub transcripts: Vec<Transcript>,
    pub split: BTreeMap<String, Bucket>,
}

impl Corpus {
    pub fn is_split(&self) -> bool {
        !self.split.is_empty()
    }

    pub fn bucket(&self, bucket: Bucket) -> impl Iterator<Item = &Transcript> {
        self.transcripts
            .iter()
            .filter(move |t| self.split.get(&t.id) == Some(&bucket))
    }

    pub fn transcript(&self, id: &str) -> Option<&Transcript> {
        self.transcripts.iter().find(|t| t.id == id)
    }

    pub fn num_utterances(&self) -> usize {
        self.transcripts.iter().map(|t| t.utterances.len()).sum()
    }

    /// Checks the split invariant: every transcript assigned exactly once.
    pub fn validate_split(&self) -> Result<()> {
        if self.split.len() != self.transcripts.len() {
            return Err(Error::invalid(format!(
                "split covers {} ids but corpus has {} transcripts",
                self.split.len(),
                self.transcripts.len()
            )));
        }
        for t in &self.transcripts {
            if !self.split.contains_key(&t.id) {
                return Err(Error::invalid(format!("transcript {} missing from split", t.id)));
            }
        }
        Ok(())
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_corpus_jsonl(self, &dir.join(TRANSCRIPTS_FILE))?;
        if self.is_split() {
            let f = BufWriter::new(File::create(dir.join(SPLIT_FILE))?);
            serde_json::to_writer_pretty(f, &self.split)?;
        }
        Ok(())
    }

    /// Loads `transcripts.jsonl` and, if present, `split.json` from a corpus
    /// directory.
    pub fn load_dir(dir: &Path) -> Result<Corpus> {
        let mut corpus = load_corpus(&dir.join(TRANSCRIPTS_FILE), false)?;
        let split_path = dir.join(SPLIT_FILE);
        if split_path.exists() {
            let f = BufReader::new(File::open(&split_path)?);
            corpus.split = serde_json::from_reader(f)?;
            corpus.validate_split()?;
        }
        Ok(corpus)
    }
}

/// One line of the transcript JSONL format.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceLine {
    pub transcript_id: String,
    pub idx: u64,
    pub speaker_id: String,
    pub role: Role,
    pub text: String,
    pub label: String,
}

/// Maps a label string to a talk move. In raw mode the two extra source
/// categories are folded in: Marking becomes Restating, Context becomes Wait.
pub fn normalize_label(label: &str, raw_label_mode: bool) -> Result<TalkMove> {
    if raw_label_mode {
        match label {
            "Marking" => return Ok(TalkMove::Restating),
            "Context" => return Ok(TalkMove::Wait),
            _ => {}
        }
    }
    label.parse()
}

pub fn load_corpus(path: &Path, raw_label_mode: bool) -> Result<Corpus> {
    let reader = BufReader::new(File::open(path)?);
    let mut transcripts: Vec<Transcript> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();

    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceLine =
            serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        let talk_move = normalize_label(&rec.label, raw_label_mode).map_err(|e| match e {
            Error::UnknownLabel(l) => parse_err(line_no, format!("unknown talk move label {l:?}")),
            other => other,
        })?;
        let utt = Utterance {
            idx: rec.idx,
            speaker_id: rec.speaker_id,
            role: rec.role,
            text: rec.text,
            talk_move,
        };
        utt.validate().map_err(|e| parse_err(line_no, e.to_string()))?;

        let slot = *index.entry(rec.transcript_id.clone()).or_insert_with(|| {
            transcripts.push(Transcript {
                id: rec.transcript_id.clone(),
                utterances: Vec::new(),
            });
            transcripts.len() - 1
        });
        let transcript = &mut transcripts[slot];
        if let Some(last) = transcript.utterances.last() {
            if utt.idx <= last.idx {
                return Err(parse_err(
                    line_no,
                    format!(
                        "idx {} not strictly increasing in transcript {} (previous {})",
                        utt.idx, transcript.id, last.idx
                    ),
                ));
            }
        }
        transcript.utterances.push(utt);
    }

    if transcripts.is_empty() {
        return Err(Error::invalid("no transcripts"));
    }
    Ok(Corpus {
        transcripts,
        split: BTreeMap::new(),
    })
}

pub fn write_corpus_jsonl(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in &corpus.transcripts {
        for u in &t.utterances {
            let line = UtteranceLine {
                transcript_id: t.id.clone(),
                idx: u.idx,
                speaker_id: u.speaker_id.clone(),
                role: u.role,
                text: u.text.clone(),
                label: u.talk_move.name().to_string(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

const SPLIT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];
const BUCKETS: [Bucket; 3] = [Bucket::Train, Bucket::Dev, Bucket::Test];

/// Bucket sizes for `n` documents.
///
/// Each target `n * fraction` is rounded half away from zero. A shortfall is
/// then added one document at a time in Train, Dev, Test order and a surplus
/// removed in Test, Dev, Train order. Finally every bucket is made nonempty
/// by taking from the largest one.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let mut sizes = SPLIT_FRACTIONS.map(|f| (n as f64 * f).round() as usize);
    let mut total: usize = sizes.iter().sum();
    let mut i = 0;
    while total < n {
        sizes[i % 3] += 1;
        total += 1;
        i += 1;
    }
    let mut i = 0;
    while total > n {
        let b = 2 - (i % 3);
        if sizes[b] > 0 {
            sizes[b] -= 1;
            total -= 1;
        }
        i += 1;
    }
    if n >= 3 {
        for b in 0..3 {
            if sizes[b] == 0 {
                let largest = (0..3).max_by_key(|&j| (sizes[j], usize::MAX - j)).unwrap();
                sizes[largest] -= 1;
                sizes[b] += 1;
            }
        }
    }
    sizes
}

/// Assigns transcripts to Train/Dev/Test uniformly at random by document.
pub fn split_corpus(mut corpus: Corpus, seed: u64) -> Result<Corpus> {
    let n = corpus.transcripts.len();
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 transcripts to split, have {n}")));
    }
    let mut ids: Vec<String> = corpus.transcripts.iter().map(|t| t.id.clone()).collect();
    ids.sort();
    ids.dedup();
    if ids.len() != n {
        return Err(Error::invalid("duplicate transcript ids"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let sizes = split_sizes(n);
    let mut split = BTreeMap::new();
    let mut it = ids.into_iter();
    for (bucket, size) in BUCKETS.iter().zip(sizes) {
        for id in it.by_ref().take(size) {
            split.insert(id, *bucket);
        }
    }
    corpus.split = split;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn line(tid: &str, idx: u64, role: &str, label: &str) -> String {
        format!(
            r#"{{"transcript_id":"{tid}","idx":{idx},"speaker_id":"{}","role":"{role}","text":"hi","label":"{label}"}}"#,
            if role == "teacher" { "T" } else { "S1" }
        )
    }

    #[test]
    fn raw_labels_are_merged() {
        let f = write_lines(&[
            &line("a", 0, "teacher", "Marking"),
            &line("a", 1, "student", "Context"),
            &line("a", 2, "teacher", "PressForAccuracy"),
        ]);
        let c = load_corpus(f.path(), true).unwrap();
        let moves: Vec<_> = c.transcripts[0].utterances.iter().map(|u| u.talk_move).collect();
        assert_eq!(moves, [TalkMove::Restating, TalkMove::Wait, TalkMove::PressForAccuracy]);
    }

    #[test]
    fn raw_labels_rejected_outside_raw_mode() {
        let f = write_lines(&[&line("a", 0, "teacher", "Marking")]);
        let err = load_corpus(f.path(), false).unwrap_err();
        assert!(err.to_string().contains("Marking"), "{err}");
    }

    #[test]
    fn unknown_label_reports_line_and_text() {
        let f = write_lines(&[&line("a", 0, "teacher", "None"), &line("a", 1, "teacher", "Bogus")]);
        let err = load_corpus(f.path(), true).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:") && msg.contains("Bogus"), "{msg}");
    }

    #[test]
    fn student_with_teacher_label_is_rejected() {
        let f = write_lines(&[&line("a", 0, "student", "Revoicing")]);
        let err = load_corpus(f.path(), true).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("non-Wait"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_lines(&[&line("a", 0, "teacher", "None"), "{not json"]);
        let err = load_corpus(f.path(), false).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn non_increasing_idx_is_rejected() {
        let f = write_lines(&[&line("a", 3, "teacher", "None"), &line("a", 3, "teacher", "None")]);
        assert!(load_corpus(f.path(), false).is_err());
    }

    #[test]
    fn empty_file_has_no_transcripts() {
        let f = write_lines(&[]);
        let err = load_corpus(f.path(), false).unwrap_err();
        assert_eq!(err.to_string(), "invalid input: no transcripts");
    }

    #[test]
    fn split_sizes_match_rounding_rule() {
        assert_eq!(split_sizes(216), [152, 32, 32]);
        assert_eq!(split_sizes(10), [7, 2, 1]);
        assert_eq!(split_sizes(3), [1, 1, 1]);
        for n in 3..400 {
            let s = split_sizes(n);
            assert_eq!(s.iter().sum::<usize>(), n);
            for (size, f) in s.iter().zip(SPLIT_FRACTIONS) {
                let target = (n as f64 * f).round() as i64;
                assert!((*size as i64 - target).abs() <= 1, "n={n} {s:?}");
                assert!(*size >= 1);
            }
        }
    }

    fn toy_corpus(n: usize) -> Corpus {
        Corpus {
            transcripts: (0..n)
                .map(|i| Transcript {
                    id: format!("t{i:03}"),
                    utterances: vec![Utterance {
                        idx: 0,
                        speaker_id: "T".into(),
                        role: Role::Teacher,
                        text: "hello".into(),
                        talk_move: TalkMove::None,
                    }],
                })
                .collect(),
            split: BTreeMap::new(),
        }
    }

    #[test]
    fn split_is_deterministic_and_complete() {
        let a = split_corpus(toy_corpus(10), 5).unwrap();
        let b = split_corpus(toy_corpus(10), 5).unwrap();
        assert_eq!(a.split, b.split);
        a.validate_split().unwrap();
        let count = |bk| a.split.values().filter(|&&v| v == bk).count();
        assert_eq!([count(Bucket::Train), count(Bucket::Dev), count(Bucket::Test)], [7, 2, 1]);
        assert!(split_corpus(toy_corpus(2), 0).is_err());
    }
}
