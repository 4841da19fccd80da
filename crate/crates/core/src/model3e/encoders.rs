use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::layers::{prefixed, prefixed_mut};
use crate::numcore::{Embedding, Gru, Param, Parameterized, SequenceCache, Tensor};
use crate::talk_move::TalkMove;
use crate::windowing::ContextElement;

/// Embeds the talk-move sequence of a window (PAD slot included) and runs
/// a GRU over it.
#[derive(Clone, Debug, PartialEq)]
pub struct MoveEncoder {
    pub emb: Embedding,
    pub gru: Gru,
}

#[derive(Clone, Debug)]
pub struct MoveCache {
    ids: Vec<Vec<usize>>,
    seq: SequenceCache,
}

impl MoveEncoder {
    pub fn new<R: Rng>(move_dim: usize, hidden: usize, rng: &mut R) -> Self {
        MoveEncoder {
            emb: Embedding::new(TalkMove::COUNT + 1, move_dim, rng),
            gru: Gru::new(move_dim, hidden, rng),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.gru.hidden_size()
    }

    /// Final GRU state per window.
    pub fn forward(&self, windows: &[&[ContextElement]]) -> Result<(Tensor, MoveCache)> {
        let w = window_len(windows)?;
        let ids: Vec<Vec<usize>> = (0..w)
            .map(|j| windows.iter().map(|win| TalkMove::slot_index(win[j].talk_move)).collect())
            .collect();
        let inputs = ids.iter().map(|step| self.emb.lookup(step)).collect::<Result<Vec<_>>>()?;
        let h0 = Tensor::zeros(windows.len(), self.hidden_size());
        let (h, seq) = self.gru.forward_packed(&inputs, &h0)?;
        Ok((h, MoveCache { ids, seq }))
    }

    pub fn backward(&mut self, cache: &MoveCache, d: &Tensor) {
        let (dxs, _) = self.gru.backward_packed(&cache.seq, d);
        for (ids, dx) in cache.ids.iter().zip(&dxs) {
            self.emb.accumulate(ids, dx.data());
        }
    }
}

impl Parameterized for MoveEncoder {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut v = prefixed("move_emb", self.emb.params());
        v.extend(prefixed("move_gru", self.gru.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = prefixed_mut("move_emb", self.emb.params_mut());
        v.extend(prefixed_mut("move_gru", self.gru.params_mut()));
        v
    }
}

/// Common window length of a batch.
pub(crate) fn window_len(windows: &[&[ContextElement]]) -> Result<usize> {
    let w = windows
        .first()
        .map(|w| w.len())
        .ok_or_else(|| Error::invalid("empty batch"))?;
    if w == 0 {
        return Err(Error::invalid("window must contain at least one element"));
    }
    if let Some(bad) = windows.iter().find(|x| x.len() != w) {
        return Err(Error::Shape(format!("window of length {} in a batch of length {w}", bad.len())));
    }
    Ok(w)
}

/// Word-level utterance encoder. Identical token sequences within a batch
/// are encoded once.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceEncoder {
    pub emb: Embedding,
    pub gru: Gru,
}

#[derive(Clone, Debug)]
pub struct UtteranceCache {
    /// Token ids fed at each step; rows are sorted by length, longest first.
    ids: Vec<Vec<usize>>,
    seq: SequenceCache,
    /// Row of the encoded batch for each input sequence.
    pub rows: Vec<usize>,
    pub unique: usize,
}

impl UtteranceEncoder {
    pub fn new<R: Rng>(vocab_size: usize, word_dim: usize, hidden: usize, rng: &mut R) -> Self {
        UtteranceEncoder {
            emb: Embedding::new(vocab_size, word_dim, rng),
            gru: Gru::new(word_dim, hidden, rng),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.gru.hidden_size()
    }

    /// Encodes every token sequence (empty ones as a single PAD token).
    /// Returns one row per distinct sequence and the cache mapping inputs
    /// to rows.
    pub fn forward(&self, seqs: &[&[u32]]) -> Result<(Tensor, UtteranceCache)> {
        const PAD: [u32; 1] = [0];
        let mut seen: HashMap<&[u32], usize> = HashMap::new();
        let mut uniq: Vec<&[u32]> = Vec::new();
        let first: Vec<usize> = seqs
            .iter()
            .map(|s| {
                let key: &[u32] = if s.is_empty() { &PAD } else { s };
                *seen.entry(key).or_insert_with(|| {
                    uniq.push(key);
                    uniq.len() - 1
                })
            })
            .collect();
        let vocab = self.emb.count();
        if let Some(bad) = uniq.iter().flat_map(|s| s.iter()).find(|&&t| t as usize >= vocab) {
            return Err(Error::invalid(format!("token id {bad} out of range for a vocabulary of {vocab}")));
        }
        let mut order: Vec<usize> = (0..uniq.len()).collect();
        order.sort_by(|&a, &b| uniq[b].len().cmp(&uniq[a].len()));
        let mut position = vec![0; uniq.len()];
        for (pos, &u) in order.iter().enumerate() {
            position[u] = pos;
        }
        let max_len = uniq[order[0]].len();
        let ids: Vec<Vec<usize>> = (0..max_len)
            .map(|k| {
                order
                    .iter()
                    .map(|&u| uniq[u])
                    .take_while(|s| s.len() > k)
                    .map(|s| s[k] as usize)
                    .collect()
            })
            .collect();
        let inputs = ids.iter().map(|step| self.emb.lookup(step)).collect::<Result<Vec<_>>>()?;
        let h0 = Tensor::zeros(uniq.len(), self.hidden_size());
        let (h, seq) = self.gru.forward_packed(&inputs, &h0)?;
        let rows = first.iter().map(|&u| position[u]).collect();
        Ok((
            h,
            UtteranceCache {
                ids,
                seq,
                rows,
                unique: uniq.len(),
            },
        ))
    }

    /// `d` holds one gradient row per distinct sequence.
    pub fn backward(&mut self, cache: &UtteranceCache, d: &Tensor) {
        let (dxs, _) = self.gru.backward_packed(&cache.seq, d);
        for (ids, dx) in cache.ids.iter().zip(&dxs) {
            self.emb.accumulate(ids, dx.data());
        }
    }
}

impl Parameterized for UtteranceEncoder {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut v = prefixed("word_emb", self.emb.params());
        v.extend(prefixed("utt_gru", self.gru.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = prefixed_mut("word_emb", self.emb.params_mut());
        v.extend(prefixed_mut("utt_gru", self.gru.params_mut()));
        v
    }
}
