//! Reference predictors: uniform random, majority class, talk-move bigram
//! and a GRU over the talk-move history alone.

mod tmonly;

pub use tmonly::TmOnly;

use std::fmt::Write as _;

use rand::Rng;

use crate::corpus::Transcript;
use crate::error::{Error, Result};
use crate::numcore::argmax;
use crate::talk_move::TalkMove;

/// Uniform draw over the eight moves.
pub fn rb_predict<R: Rng + ?Sized>(rng: &mut R) -> TalkMove {
    TalkMove::ALL[rng.gen_range(0..TalkMove::COUNT)]
}

/// Most frequent label, ties to the lowest index.
pub fn majority_fit(labels: &[TalkMove]) -> Result<TalkMove> {
    if labels.is_empty() {
        return Err(Error::invalid("majority baseline needs at least one label"));
    }
    let mut counts = [0.0; TalkMove::COUNT];
    for l in labels {
        counts[l.index()] += 1.0;
    }
    Ok(TalkMove::ALL[argmax(&counts)])
}

/// Next-move counts conditioned on the previous move. Row 8 is the
/// transcript start.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BigramTable {
    pub counts: [[u64; TalkMove::COUNT]; TalkMove::COUNT + 1],
}

pub const START_ROW: usize = TalkMove::COUNT;

impl BigramTable {
    pub fn fit<'a, I: IntoIterator<Item = &'a Transcript>>(transcripts: I) -> Self {
        let mut counts = [[0u64; TalkMove::COUNT]; TalkMove::COUNT + 1];
        for t in transcripts {
            let mut prev = START_ROW;
            for u in &t.utterances {
                counts[prev][u.talk_move.index()] += 1;
                prev = u.talk_move.index();
            }
        }
        BigramTable { counts }
    }

    pub fn row_seen(&self, row: usize) -> bool {
        self.counts[row].iter().any(|c| *c > 0)
    }

    /// Row-normalized conditional probabilities; unseen rows are all zero.
    pub fn probs(&self) -> [[f64; TalkMove::COUNT]; TalkMove::COUNT + 1] {
        let mut p = [[0.0; TalkMove::COUNT]; TalkMove::COUNT + 1];
        for (row, counts) in p.iter_mut().zip(&self.counts) {
            let sum: u64 = counts.iter().sum();
            if sum > 0 {
                for (x, c) in row.iter_mut().zip(counts) {
                    *x = *c as f64 / sum as f64;
                }
            }
        }
        p
    }

    /// Most frequent successor over all non-start rows, i.e. the majority
    /// label of the windowed examples.
    pub fn fallback(&self) -> TalkMove {
        let mut cols = [0.0; TalkMove::COUNT];
        for row in &self.counts[..TalkMove::COUNT] {
            for (c, v) in cols.iter_mut().zip(row) {
                *c += *v as f64;
            }
        }
        TalkMove::ALL[argmax(&cols)]
    }

    /// Argmax of the row for `prev` (`None` = transcript start); unseen rows
    /// fall back to [`BigramTable::fallback`].
    pub fn predict(&self, prev: Option<TalkMove>) -> TalkMove {
        let row = TalkMove::slot_index(prev);
        if !self.row_seen(row) {
            return self.fallback();
        }
        let counts: Vec<f64> = self.counts[row].iter().map(|c| *c as f64).collect();
        TalkMove::ALL[argmax(&counts)]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("previous");
        for m in TalkMove::ALL {
            let _ = write!(s, ",{}", m.name());
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            s.push_str(TalkMove::from_index(i).map_or("<start>", TalkMove::name));
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        if rows.len() != TalkMove::COUNT + 1 || rows.iter().any(|r| r.len() != TalkMove::COUNT) {
            return Err(Error::Shape("bigram table must be 9 x 8".into()));
        }
        let mut counts = [[0u64; TalkMove::COUNT]; TalkMove::COUNT + 1];
        for (dst, src) in counts.iter_mut().zip(rows) {
            dst.copy_from_slice(&src);
        }
        Ok(BigramTable { counts })
    }
}
