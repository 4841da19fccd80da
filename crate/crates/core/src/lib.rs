//! Next talk-move prediction for classroom dialogue: corpus handling,
//! windowing, a small float64 neural toolkit, the three-encoder model,
//! baselines, training, evaluation and the annotation study.

pub mod baselines;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model3e;
pub mod numcore;
pub mod predictor;
pub mod study;
pub mod talk_move;
pub mod training;
pub mod windowing;

pub use error::{Error, Result};
pub use talk_move::{Facet, TalkMove};
