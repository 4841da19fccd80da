use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model3e::{MoveCache, MoveEncoder};
use crate::numcore::layers::{prefixed, prefixed_mut};
use crate::numcore::{Linear, Param, Parameterized, Tensor};
use crate::talk_move::TalkMove;
use crate::windowing::ContextElement;

/// GRU over the window's talk moves followed by a linear output layer.
/// `weighted` only records how the model was trained; the forward pass is
/// the same either way.
#[derive(Clone, Debug, PartialEq)]
pub struct TmOnly {
    pub encoder: MoveEncoder,
    pub out: Linear,
    pub weighted: bool,
}

pub struct TmOnlyState {
    cache: MoveCache,
    hidden: Tensor,
    pub logits: Tensor,
}

impl TmOnly {
    pub fn new(move_dim: usize, hidden: usize, weighted: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = MoveEncoder::new(move_dim, hidden, &mut rng);
        let out = Linear::new(hidden, TalkMove::COUNT, &mut rng);
        TmOnly { encoder, out, weighted }
    }

    pub fn forward_batch(&self, windows: &[&[ContextElement]]) -> Result<TmOnlyState> {
        let (hidden, cache) = self.encoder.forward(windows)?;
        let logits = self.out.forward(&hidden)?;
        logits.ensure_finite("tm-only logits")?;
        Ok(TmOnlyState { cache, hidden, logits })
    }

    pub fn backward(&mut self, state: &TmOnlyState, d_logits: &Tensor) {
        let d_hidden = self.out.backward(&state.hidden, d_logits);
        self.encoder.backward(&state.cache, &d_hidden);
    }
}

impl Parameterized for TmOnly {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut v = self.encoder.params();
        v.extend(prefixed("out", self.out.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = self.encoder.params_mut();
        v.extend(prefixed_mut("out", self.out.params_mut()));
        v
    }
}
