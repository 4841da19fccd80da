//! The three-encoder next-move classifier.
//!
//! Each context element is encoded by a word-level GRU; the final state is
//! extended with the speaker-change bit (and an optional external
//! utterance embedding) and a dialogue GRU runs over the window. A second
//! GRU runs over the window's talk moves. Both final states (plus an
//! optional external context embedding) feed a two-layer tanh network and a
//! softmax over the eight moves.

pub mod checkpoint;
pub mod encoders;
pub mod external;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointHeader, ParamSpec};
pub use encoders::{MoveCache, MoveEncoder, UtteranceCache, UtteranceEncoder};
pub use external::{ExtFeatures, ExternalEmbeddings};

use crate::error::{Error, Result};
use crate::numcore::layers::{prefixed, prefixed_mut};
use crate::numcore::{argmax, softmax, Gru, Linear, Param, Parameterized, SequenceCache, Tensor};
use crate::talk_move::TalkMove;
use crate::windowing::{ContextElement, Example};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Model3EDims {
    pub word_dim: usize,
    pub utt_hidden: usize,
    pub move_dim: usize,
    pub move_hidden: usize,
    pub dialogue_hidden: usize,
    pub ff_hidden: usize,
    /// Width of external per-utterance embeddings, 0 when unused.
    pub ext_u: usize,
    /// Width of the external context embedding, 0 when unused.
    pub ext_c: usize,
}

impl Default for Model3EDims {
    fn default() -> Self {
        Model3EDims {
            word_dim: 256,
            utt_hidden: 512,
            move_dim: 32,
            move_hidden: 64,
            dialogue_hidden: 1025,
            ff_hidden: 32,
            ext_u: 0,
            ext_c: 0,
        }
    }
}

impl Model3EDims {
    /// Small dimensions for gradient checking and fast tests.
    pub fn tiny() -> Self {
        Model3EDims {
            word_dim: 4,
            utt_hidden: 6,
            move_dim: 3,
            move_hidden: 5,
            dialogue_hidden: 7,
            ff_hidden: 4,
            ext_u: 0,
            ext_c: 0,
        }
    }

    /// Width of `a_i`: utterance state, speaker bit, external block.
    pub fn dialogue_input(&self) -> usize {
        self.utt_hidden + 1 + self.ext_u
    }

    /// Width of the classifier input `r`.
    pub fn repr_dim(&self) -> usize {
        self.dialogue_hidden + self.move_hidden + self.ext_c
    }

    pub fn validate(&self) -> Result<()> {
        let d = [
            self.word_dim,
            self.utt_hidden,
            self.move_dim,
            self.move_hidden,
            self.dialogue_hidden,
            self.ff_hidden,
        ];
        if d.contains(&0) {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model3E {
    pub dims: Model3EDims,
    pub utterance: UtteranceEncoder,
    pub dialogue: Gru,
    pub moves: MoveEncoder,
    pub ff1: Linear,
    pub ff2: Linear,
}

/// Per-example intermediates, mainly for inspection and tests.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Utterance encodings `â_i`.
    pub a_hat: Vec<Vec<f64>>,
    /// Dialogue GRU inputs `a_i`.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub d: Vec<f64>,
    pub r: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Everything the backward pass needs from a batched forward.
#[derive(Clone, Debug)]
pub struct BatchState {
    batch: usize,
    w: usize,
    utt_out: Tensor,
    utt_cache: UtteranceCache,
    dia_inputs: Vec<Tensor>,
    dia_cache: SequenceCache,
    dia_out: Tensor,
    move_cache: MoveCache,
    move_out: Tensor,
    r: Tensor,
    hidden: Tensor,
    pub logits: Tensor,
}

impl BatchState {
    pub fn len(&self) -> usize {
        self.batch
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    pub fn probs(&self, i: usize) -> Vec<f64> {
        softmax(self.logits.row(i))
    }

    /// Trace of batch row `i`.
    pub fn trace(&self, i: usize) -> ForwardTrace {
        let uh = self.utt_out.cols();
        let a: Vec<Vec<f64>> = self.dia_inputs.iter().map(|x| x.row(i).to_vec()).collect();
        ForwardTrace {
            a_hat: (0..self.w)
                .map(|j| self.utt_out.row(self.utt_cache.rows[i * self.w + j])[..uh].to_vec())
                .collect(),
            a,
            b: self.dia_out.row(i).to_vec(),
            d: self.move_out.row(i).to_vec(),
            r: self.r.row(i).to_vec(),
            logits: self.logits.row(i).to_vec(),
            probs: self.probs(i),
        }
    }
}

impl Model3E {
    pub fn new(vocab_size: usize, dims: Model3EDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        if vocab_size < 2 {
            return Err(Error::invalid("vocabulary must contain at least PAD and UNK"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let utterance = UtteranceEncoder::new(vocab_size, dims.word_dim, dims.utt_hidden, &mut rng);
        let dialogue = Gru::new(dims.dialogue_input(), dims.dialogue_hidden, &mut rng);
        let moves = MoveEncoder::new(dims.move_dim, dims.move_hidden, &mut rng);
        let ff1 = Linear::new(dims.repr_dim(), dims.ff_hidden, &mut rng);
        let ff2 = Linear::new(dims.ff_hidden, TalkMove::COUNT, &mut rng);
        Ok(Model3E {
            dims,
            utterance,
            dialogue,
            moves,
            ff1,
            ff2,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.utterance.emb.count()
    }

    fn check_ext(&self, batch: usize, w: usize, ext: Option<&[ExtFeatures]>) -> Result<()> {
        let (eu, ec) = (self.dims.ext_u, self.dims.ext_c);
        let Some(ext) = ext else {
            if eu > 0 || ec > 0 {
                return Err(Error::invalid("model expects external embeddings but none were given"));
            }
            return Ok(());
        };
        if ext.len() != batch {
            return Err(Error::Shape(format!("{} external feature sets for {batch} windows", ext.len())));
        }
        for f in ext {
            match (&f.utterances, eu) {
                (None, 0) => {}
                (Some(_), 0) => return Err(Error::invalid("utterance embeddings given but not configured")),
                (None, _) => return Err(Error::invalid("utterance embeddings missing")),
                (Some(u), d) => {
                    if u.len() != w || u.iter().any(|v| v.len() != d) {
                        return Err(Error::Shape(format!("expected {w} utterance embeddings of width {d}")));
                    }
                }
            }
            match (&f.context, ec) {
                (None, 0) => {}
                (Some(_), 0) => return Err(Error::invalid("context embedding given but not configured")),
                (None, _) => return Err(Error::invalid("context embedding missing")),
                (Some(c), d) => {
                    if c.len() != d {
                        return Err(Error::Shape(format!("context embedding width {} != {d}", c.len())));
                    }
                }
            }
        }
        Ok(())
    }

    /// Batched forward pass over equally long windows.
    pub fn forward_batch(&self, windows: &[&[ContextElement]], ext: Option<&[ExtFeatures]>) -> Result<BatchState> {
        let w = encoders::window_len(windows)?;
        let batch = windows.len();
        self.check_ext(batch, w, ext)?;
        let dims = self.dims;

        let seqs: Vec<&[u32]> = windows.iter().flat_map(|win| win.iter().map(|e| e.tokens.as_slice())).collect();
        let (utt_out, utt_cache) = self.utterance.forward(&seqs)?;

        let uh = dims.utt_hidden;
        let din = dims.dialogue_input();
        let dia_inputs: Vec<Tensor> = (0..w)
            .map(|j| {
                let mut x = Tensor::zeros(batch, din);
                for (b, win) in windows.iter().enumerate() {
                    let row = x.row_mut(b);
                    row[..uh].copy_from_slice(utt_out.row(utt_cache.rows[b * w + j]));
                    row[uh] = if win[j].speaker_change { 1.0 } else { 0.0 };
                    if let Some(u) = ext.and_then(|e| e[b].utterances.as_ref()) {
                        row[uh + 1..].copy_from_slice(&u[j]);
                    }
                }
                x
            })
            .collect();
        let (dia_out, dia_cache) = self
            .dialogue
            .forward_packed(&dia_inputs, &Tensor::zeros(batch, dims.dialogue_hidden))?;
        let (move_out, move_cache) = self.moves.forward(windows)?;

        let mut r = Tensor::zeros(batch, dims.repr_dim());
        for b in 0..batch {
            let row = r.row_mut(b);
            row[..dims.dialogue_hidden].copy_from_slice(dia_out.row(b));
            row[dims.dialogue_hidden..dims.dialogue_hidden + dims.move_hidden].copy_from_slice(move_out.row(b));
            if let Some(c) = ext.and_then(|e| e[b].context.as_ref()) {
                row[dims.dialogue_hidden + dims.move_hidden..].copy_from_slice(c);
            }
        }
        let mut hidden = self.ff1.forward(&r)?;
        hidden.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let logits = self.ff2.forward(&hidden)?;
        logits.ensure_finite("3-E logits")?;
        Ok(BatchState {
            batch,
            w,
            utt_out,
            utt_cache,
            dia_inputs,
            dia_cache,
            dia_out,
            move_cache,
            move_out,
            r,
            hidden,
            logits,
        })
    }

    /// Accumulates parameter gradients given `dL/dlogits`.
    pub fn backward(&mut self, state: &BatchState, d_logits: &Tensor) {
        let dims = self.dims;
        let (batch, w) = (state.batch, state.w);
        let mut d_hidden = self.ff2.backward(&state.hidden, d_logits);
        for (d, h) in d_hidden.data_mut().iter_mut().zip(state.hidden.data()) {
            *d *= 1.0 - h * h;
        }
        let d_r = self.ff1.backward(&state.r, &d_hidden);

        let mut d_dia = Tensor::zeros(batch, dims.dialogue_hidden);
        let mut d_move = Tensor::zeros(batch, dims.move_hidden);
        for b in 0..batch {
            let row = d_r.row(b);
            d_dia.row_mut(b).copy_from_slice(&row[..dims.dialogue_hidden]);
            d_move
                .row_mut(b)
                .copy_from_slice(&row[dims.dialogue_hidden..dims.dialogue_hidden + dims.move_hidden]);
        }
        self.moves.backward(&state.move_cache, &d_move);

        let (d_inputs, _) = self.dialogue.backward_packed(&state.dia_cache, &d_dia);
        let uh = dims.utt_hidden;
        let mut d_utt = Tensor::zeros(state.utt_cache.unique, uh);
        for (j, dx) in d_inputs.iter().enumerate() {
            for b in 0..batch {
                let target = d_utt.row_mut(state.utt_cache.rows[b * w + j]);
                for (t, v) in target.iter_mut().zip(&dx.row(b)[..uh]) {
                    *t += v;
                }
            }
        }
        self.utterance.backward(&state.utt_cache, &d_utt);
    }

    pub fn forward(&self, example: &Example) -> Result<ForwardTrace> {
        let state = self.forward_batch(&[&example.window], None)?;
        Ok(state.trace(0))
    }

    pub fn forward_ext(&self, example: &Example, ext: &ExtFeatures) -> Result<ForwardTrace> {
        let state = self.forward_batch(&[&example.window], Some(std::slice::from_ref(ext)))?;
        Ok(state.trace(0))
    }

    pub fn predict(&self, example: &Example) -> Result<TalkMove> {
        Ok(predict_from_probs(&self.forward(example)?.probs))
    }

    /// `a_i`: final utterance state followed by the speaker bit.
    pub fn encode_utterance(&self, tokens: &[u32], speaker_change: bool) -> Result<Vec<f64>> {
        let (h, _) = self.utterance.forward(&[tokens])?;
        let mut a = h.into_vec();
        a.push(if speaker_change { 1.0 } else { 0.0 });
        Ok(a)
    }

    /// Final dialogue GRU state over a sequence of `a_i`.
    pub fn encode_dialogue(&self, a_seq: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.dialogue.sequence(a_seq, &vec![0.0; self.dims.dialogue_hidden])?.0)
    }

    /// Final talk-move GRU state over a move window (`None` is PAD).
    pub fn encode_talkmoves(&self, moves: &[Option<TalkMove>]) -> Result<Vec<f64>> {
        let window: Vec<ContextElement> = moves
            .iter()
            .map(|m| ContextElement {
                talk_move: *m,
                ..ContextElement::pad()
            })
            .collect();
        Ok(self.moves.forward(&[&window])?.0.into_vec())
    }
}

/// Argmax over class probabilities, ties to the lowest canonical index.
pub fn predict_from_probs(probs: &[f64]) -> TalkMove {
    TalkMove::from_index(argmax(probs)).expect("eight classes")
}

impl Parameterized for Model3E {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut v = self.utterance.params();
        v.extend(prefixed("dialogue_gru", self.dialogue.params()));
        v.extend(self.moves.params());
        v.extend(prefixed("ff1", self.ff1.params()));
        v.extend(prefixed("ff2", self.ff2.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = self.utterance.params_mut();
        v.extend(prefixed_mut("dialogue_gru", self.dialogue.params_mut()));
        v.extend(self.moves.params_mut());
        v.extend(prefixed_mut("ff1", self.ff1.params_mut()));
        v.extend(prefixed_mut("ff2", self.ff2.params_mut()));
        v
    }
}
