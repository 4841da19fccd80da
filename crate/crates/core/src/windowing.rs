//! Turns transcripts into fixed-width next-move prediction examples.

use serde::{Deserialize, Serialize};

use crate::corpus::{Bucket, Corpus, Role, Transcript, Utterance, Vocabulary};
use crate::error::{Error, Result};
use crate::talk_move::TalkMove;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub w: usize,
}

impl WindowConfig {
    pub fn new(w: usize) -> Result<Self> {
        if w == 0 {
            return Err(Error::invalid("window size must be at least 1"));
        }
        Ok(WindowConfig { w })
    }
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { w: 5 }
    }
}

/// One position of a context window. Padding elements have no tokens, no
/// move and a zero speaker bit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextElement {
    pub speaker_change: bool,
    pub tokens: Vec<u32>,
    pub talk_move: Option<TalkMove>,
    /// Source `idx` of the utterance, absent for padding.
    pub utterance_idx: Option<u64>,
}

impl ContextElement {
    pub fn pad() -> Self {
        ContextElement {
            speaker_change: false,
            tokens: Vec::new(),
            talk_move: None,
            utterance_idx: None,
        }
    }

    pub fn is_pad(&self) -> bool {
        self.talk_move.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Origin {
    pub transcript_id: String,
    /// Zero-based position of the last context utterance.
    pub position: usize,
}

impl Origin {
    pub fn id(&self) -> String {
        format!("{}:{}", self.transcript_id, self.position)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub window: Vec<ContextElement>,
    pub label: TalkMove,
    pub origin: Origin,
}

impl Example {
    pub fn id(&self) -> String {
        self.origin.id()
    }

    pub fn pad_count(&self) -> usize {
        self.window.iter().filter(|e| e.is_pad()).count()
    }

    /// Move of the last window element.
    pub fn last_move(&self) -> Option<TalkMove> {
        self.window.last().and_then(|e| e.talk_move)
    }
}

pub fn speaker_change(prev: Option<&str>, cur: &str) -> bool {
    prev != Some(cur)
}

fn elements(transcript: &Transcript, vocab: &Vocabulary) -> Vec<ContextElement> {
    let mut prev: Option<&str> = None;
    transcript
        .utterances
        .iter()
        .map(|u| {
            let e = ContextElement {
                speaker_change: speaker_change(prev, &u.speaker_id),
                tokens: vocab.encode(&u.text),
                talk_move: Some(u.talk_move),
                utterance_idx: Some(u.idx),
            };
            prev = Some(&u.speaker_id);
            e
        })
        .collect()
}

/// One example per position `t` in `0..n-1`, labeled with the move of
/// utterance `t + 1`. Short prefixes are left-padded to `w` elements.
pub fn extract_examples(transcript: &Transcript, vocab: &Vocabulary, cfg: WindowConfig) -> Vec<Example> {
    let w = cfg.w;
    let elems = elements(transcript, vocab);
    let n = elems.len();
    (0..n.saturating_sub(1))
        .map(|t| {
            let start = (t + 1).saturating_sub(w);
            let pads = w - (t + 1 - start);
            let mut window = Vec::with_capacity(w);
            window.extend(std::iter::repeat_with(ContextElement::pad).take(pads));
            window.extend(elems[start..=t].iter().cloned());
            Example {
                window,
                label: transcript.utterances[t + 1].talk_move,
                origin: Origin {
                    transcript_id: transcript.id.clone(),
                    position: t,
                },
            }
        })
        .collect()
}

pub fn examples_for_bucket(
    corpus: &Corpus,
    bucket: Bucket,
    vocab: &Vocabulary,
    cfg: WindowConfig,
) -> Vec<Example> {
    corpus
        .bucket(bucket)
        .flat_map(|t| extract_examples(t, vocab, cfg))
        .collect()
}

/// A context utterance as it arrives from a client or a diagnostic file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextItem {
    pub speaker_id: String,
    pub role: Role,
    pub text: String,
    pub talk_move: TalkMove,
    /// Explicit speaker-change bit; derived from the previous item when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_change: Option<bool>,
}

impl ContextItem {
    pub fn from_utterance(u: &Utterance, speaker_change: bool) -> Self {
        ContextItem {
            speaker_id: u.speaker_id.clone(),
            role: u.role,
            text: u.text.clone(),
            talk_move: u.talk_move,
            speaker_change: Some(speaker_change),
        }
    }

    pub fn validate(&self) -> Result<()> {
        Utterance {
            idx: 0,
            speaker_id: self.speaker_id.clone(),
            role: self.role,
            text: self.text.clone(),
            talk_move: self.talk_move,
        }
        .validate()
    }
}

/// Builds a `w`-element window from an ordered context list, keeping the
/// most recent `w` items and left-padding shorter lists. Returns whether
/// items were dropped.
pub fn window_from_context(
    items: &[ContextItem],
    vocab: &Vocabulary,
    cfg: WindowConfig,
) -> Result<(Vec<ContextElement>, bool)> {
    for item in items {
        item.validate()?;
    }
    let mut prev: Option<&str> = None;
    let mut elems: Vec<ContextElement> = items
        .iter()
        .map(|item| {
            let s = item
                .speaker_change
                .unwrap_or_else(|| speaker_change(prev, &item.speaker_id));
            prev = Some(&item.speaker_id);
            ContextElement {
                speaker_change: s,
                tokens: vocab.encode(&item.text),
                talk_move: Some(item.talk_move),
                utterance_idx: None,
            }
        })
        .collect();
    let truncated = elems.len() > cfg.w;
    if truncated {
        elems.drain(..elems.len() - cfg.w);
    }
    let mut window: Vec<ContextElement> = std::iter::repeat_with(ContextElement::pad)
        .take(cfg.w - elems.len())
        .collect();
    window.extend(elems);
    Ok((window, truncated))
}
