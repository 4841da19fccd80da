//! A common interface over every next-move predictor and a registry that
//! trains or restores them by name.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baselines::{majority_fit, rb_predict, BigramTable, TmOnly};
use crate::corpus::{Bucket, Corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::model3e::external::features_for;
use crate::model3e::{Checkpoint, ExtFeatures, ExternalEmbeddings, Model3E, Model3EDims};
use crate::numcore::{batch_xent, softmax, Param, Parameterized};
use crate::talk_move::TalkMove;
use crate::training::{fit, split_examples, TrainConfig, TrainHistory, Trainable, Weighting};
use crate::windowing::{ContextElement, Example};

pub type Probs = [f64; TalkMove::COUNT];

const CHUNK: usize = 256;

pub trait Predictor: Send + Sync {
    /// Registry name of the model kind.
    fn kind(&self) -> &str;

    /// Window size the model expects.
    fn window(&self) -> usize;

    /// Vocabulary used to encode utterance text, if the model reads text.
    fn vocabulary(&self) -> Option<&Vocabulary> {
        None
    }

    /// Class distribution for each example's window. Labels are ignored.
    fn predict_proba(&self, examples: &[Example]) -> Result<Vec<Probs>>;

    fn predict(&self, examples: &[Example]) -> Result<Vec<TalkMove>> {
        Ok(self
            .predict_proba(examples)?
            .iter()
            .map(|p| crate::model3e::predict_from_probs(p))
            .collect())
    }

    fn checkpoint(&self) -> Result<Checkpoint>;
}

/// Vocabulary for building a predictor's input windows. Models that ignore
/// text get an empty one.
pub fn input_vocabulary(p: &dyn Predictor) -> Vocabulary {
    p.vocabulary()
        .cloned()
        .unwrap_or_else(|| Vocabulary::from_tokens(std::iter::empty()))
}

pub fn evaluate_predictor(p: &dyn Predictor, examples: &[Example]) -> Result<EvalReport> {
    let golds: Vec<TalkMove> = examples.iter().map(|e| e.label).collect();
    evaluate(&golds, &p.predict(examples)?)
}

fn one_hot(m: TalkMove) -> Probs {
    let mut p = [0.0; TalkMove::COUNT];
    p[m.index()] = 1.0;
    p
}

fn to_probs(v: &[f64]) -> Probs {
    let mut p = [0.0; TalkMove::COUNT];
    p.copy_from_slice(v);
    p
}

fn windows<'a>(examples: &[&'a Example]) -> Vec<&'a [ContextElement]> {
    examples.iter().map(|e| e.window.as_slice()).collect()
}

pub struct RandomBaseline {
    pub seed: u64,
    pub window: usize,
}

impl Predictor for RandomBaseline {
    fn kind(&self) -> &str {
        "random"
    }

    fn window(&self) -> usize {
        self.window
    }

    fn predict_proba(&self, examples: &[Example]) -> Result<Vec<Probs>> {
        Ok(vec![[1.0 / TalkMove::COUNT as f64; TalkMove::COUNT]; examples.len()])
    }

    /// Seeded uniform draws, one per example in order.
    fn predict(&self, examples: &[Example]) -> Result<Vec<TalkMove>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(examples.iter().map(|_| rb_predict(&mut rng)).collect())
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new("random", self.window, json!({ "seed": self.seed }), None))
    }
}

pub struct MajorityBaseline {
    pub label: TalkMove,
    pub window: usize,
}

impl Predictor for MajorityBaseline {
    fn kind(&self) -> &str {
        "majority"
    }

    fn window(&self) -> usize {
        self.window
    }

    fn predict_proba(&self, examples: &[Example]) -> Result<Vec<Probs>> {
        Ok(vec![one_hot(self.label); examples.len()])
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new("majority", self.window, json!({ "label": self.label }), None))
    }
}

pub struct BigramBaseline {
    pub table: BigramTable,
    pub window: usize,
}

impl Predictor for BigramBaseline {
    fn kind(&self) -> &str {
        "tmbm"
    }

    fn window(&self) -> usize {
        self.window
    }

    /// Row of the conditional table for the last context move, or a
    /// one-hot on the fallback class for unseen rows.
    fn predict_proba(&self, examples: &[Example]) -> Result<Vec<Probs>> {
        let probs = self.table.probs();
        Ok(examples
            .iter()
            .map(|e| {
                let prev = e.last_move();
                let row = TalkMove::slot_index(prev);
                if self.table.row_seen(row) {
                    probs[row]
                } else {
                    one_hot(self.table.fallback())
                }
            })
            .collect())
    }

    fn predict(&self, examples: &[Example]) -> Result<Vec<TalkMove>> {
        Ok(examples.iter().map(|e| self.table.predict(e.last_move())).collect())
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new("tmbm", self.window, json!({}), None);
        let values: Vec<f64> = self.table.counts.iter().flatten().map(|&v| v as f64).collect();
        c.push("counts", crate::numcore::Tensor::from_vec(TalkMove::COUNT + 1, TalkMove::COUNT, values)?);
        Ok(c)
    }
}

pub struct TmOnlyPredictor {
    pub model: TmOnly,
    pub window: usize,
}

#[derive(Serialize, Deserialize)]
struct TmOnlyConfig {
    move_dim: usize,
    hidden: usize,
    weighted: bool,
}

impl Parameterized for TmOnlyPredictor {
    fn params(&self) -> Vec<(String, &Param)> {
        self.model.params()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.model.params_mut()
    }
}

impl Trainable for TmOnlyPredictor {
    fn train_batch(&mut self, batch: &[&Example], weights: &[f64]) -> Result<f64> {
        let state = self.model.forward_batch(&windows(batch))?;
        let labels: Vec<usize> = batch.iter().map(|e| e.label.index()).collect();
        let (loss, d, _) = batch_xent(&state.logits, &labels, weights, 1.0 / batch.len() as f64)?;
        self.model.backward(&state, &d);
        Ok(loss)
    }

    fn predict_examples(&self, examples: &[Example]) -> Result<Vec<TalkMove>> {
        self.predict(examples)
    }
}

impl Predictor for TmOnlyPredictor {
    fn kind(&self) -> &str {
        if self.model.weighted {
            "tm-only-w"
        } else {
            "tm-only-z"
        }
    }

    fn window(&self) -> usize {
        self.window
    }

    fn predict_proba(&self, examples: &[Example]) -> Result<Vec<Probs>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(CHUNK) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let state = self.model.forward_batch(&windows(&refs))?;
            out.extend((0..chunk.len()).map(|i| to_probs(&softmax(state.logits.row(i)))));
        }
        Ok(out)
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let cfg = TmOnlyConfig {
            move_dim: self.model.encoder.emb.dim(),
            hidden: self.model.encoder.hidden_size(),
            weighted: self.model.weighted,
        };
        let mut c = Checkpoint::new(self.kind(), self.window, serde_json::to_value(cfg)?, None);
        c.push_params(&self.model);
        Ok(c)
    }
}

/// The 3-E model with its vocabulary and any external embedding sidecars.
pub struct ThreeE {
    pub model: Model3E,
    pub vocab: Vocabulary,
    pub window: usize,
    pub ext_utterance: Option<(PathBuf, ExternalEmbeddings)>,
    pub ext_context: Option<(PathBuf, ExternalEmbeddings)>,
}

#[derive(Serialize, Deserialize)]
struct ThreeEConfig {
    dims: Model3EDims,
    #[serde(default)]
    ext_utterance: Option<PathBuf>,
    #[serde(default)]
    ext_context: Option<PathBuf>,
}

impl ThreeE {
    pub fn new(vocab: Vocabulary, cfg: &TrainConfig) -> Result<Self> {
        let ext_utterance = cfg
            .ext_utterance
            .as_ref()
            .map(|p| ExternalEmbeddings::load(p).map(|e| (p.clone(), e)))
            .transpose()?;
        let ext_context = cfg
            .ext_context
            .as_ref()
            .map(|p| ExternalEmbeddings::load(p).map(|e| (p.clone(), e)))
            .transpose()?;
        let dims = Model3EDims {
            ext_u: ext_utterance.as_ref().map_or(0, |(_, e)| e.dim()),
            ext_c: ext_context.as_ref().map_or(0, |(_, e)| e.dim()),
            ..cfg.model
        };
        Ok(ThreeE {
            model: Model3E::new(vocab.len(), dims, cfg.seed)?,
            vocab,
            window: cfg.w,
            ext_utterance,
            ext_context,
        })
    }

    fn features(&self, examples: &[&Example]) -> Result<Option<Vec<ExtFeatures>>> {
        if self.ext_utterance.is_none() && self.ext_context.is_none() {
            return Ok(None);
        }
        examples
            .iter()
            .map(|e| {
                features_for(
                    e,
                    self.ext_utterance.as_ref().map(|x| &x.1),
                    self.ext_context.as_ref().map(|x| &x.1),
                )
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

impl Parameterized for ThreeE {
    fn params(&self) -> Vec<(String, &Param)> {
        self.model.params()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.model.params_mut()
    }
}

impl Trainable for ThreeE {
    fn train_batch(&mut self, batch: &[&Example], weights: &[f64]) -> Result<f64> {
        let ext = self.features(batch)?;
        let state = self.model.forward_batch(&windows(batch), ext.as_deref())?;
        let labels: Vec<usize> = batch.iter().map(|e| e.label.index()).collect();
        let (loss, d, _) = batch_xent(&state.logits, &labels, weights, 1.0 / batch.len() as f64)?;
        self.model.backward(&state, &d);
        Ok(loss)
    }

    fn predict_examples(&self, examples: &[Example]) -> Result<Vec<TalkMove>> {
        self.predict(examples)
    }
}

impl Predictor for ThreeE {
    fn kind(&self) -> &str {
        "3e"
    }

    fn window(&self) -> usize {
        self.window
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        Some(&self.vocab)
    }

    fn predict_proba(&self, examples: &[Example]) -> Result<Vec<Probs>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(CHUNK) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let ext = self.features(&refs)?;
            let state = self.model.forward_batch(&windows(&refs), ext.as_deref())?;
            out.extend((0..chunk.len()).map(|i| to_probs(&state.probs(i))));
        }
        Ok(out)
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let cfg = ThreeEConfig {
            dims: self.model.dims,
            ext_utterance: self.ext_utterance.as_ref().map(|x| x.0.clone()),
            ext_context: self.ext_context.as_ref().map(|x| x.0.clone()),
        };
        let mut c = Checkpoint::new("3e", self.window, serde_json::to_value(cfg)?, Some(self.vocab.clone()));
        c.push_params(&self.model);
        Ok(c)
    }
}

pub struct Trained {
    pub predictor: Box<dyn Predictor>,
    pub history: Option<TrainHistory>,
}

type TrainFn = fn(&Corpus, &Vocabulary, &TrainConfig) -> Result<Trained>;
type LoadFn = fn(&Checkpoint) -> Result<Box<dyn Predictor>>;

pub struct Strategy {
    pub name: &'static str,
    pub summary: &'static str,
    train: TrainFn,
    load: LoadFn,
}

/// Named predictor kinds.
pub struct Registry {
    strategies: Vec<Strategy>,
}

fn train_labels(corpus: &Corpus, vocab: &Vocabulary, cfg: &TrainConfig) -> Result<Vec<TalkMove>> {
    let (train, _) = split_examples(corpus, vocab, cfg.window())?;
    Ok(train.iter().map(|e| e.label).collect())
}

fn train_tmonly(corpus: &Corpus, vocab: &Vocabulary, cfg: &TrainConfig, weighted: bool) -> Result<Trained> {
    let (train, dev) = split_examples(corpus, vocab, cfg.window())?;
    let run = TrainConfig {
        weighting: if weighted {
            Weighting::ClassWeights
        } else {
            Weighting::None
        },
        ..cfg.clone()
    };
    let mut p = TmOnlyPredictor {
        model: TmOnly::new(cfg.tm_move_dim, cfg.tm_hidden, weighted, cfg.seed),
        window: cfg.w,
    };
    let history = fit(&mut p, &train, &dev, &run)?;
    Ok(Trained {
        predictor: Box::new(p),
        history: Some(history),
    })
}

fn load_tmonly(c: &Checkpoint) -> Result<Box<dyn Predictor>> {
    let cfg: TmOnlyConfig = c.config()?;
    let mut p = TmOnlyPredictor {
        model: TmOnly::new(cfg.move_dim, cfg.hidden, cfg.weighted, 0),
        window: c.header.window,
    };
    c.restore_params(&mut p.model)?;
    Ok(Box::new(p))
}

impl Registry {
    pub fn builtin() -> Self {
        let strategies = vec![
            Strategy {
                name: "random",
                summary: "uniform random move",
                train: |_, _, cfg| {
                    Ok(Trained {
                        predictor: Box::new(RandomBaseline {
                            seed: cfg.seed,
                            window: cfg.w,
                        }),
                        history: None,
                    })
                },
                load: |c| {
                    Ok(Box::new(RandomBaseline {
                        seed: c.header.config["seed"]
                            .as_u64()
                            .ok_or_else(|| Error::invalid("random checkpoint lacks a seed"))?,
                        window: c.header.window,
                    }))
                },
            },
            Strategy {
                name: "majority",
                summary: "most frequent training label",
                train: |corpus, vocab, cfg| {
                    Ok(Trained {
                        predictor: Box::new(MajorityBaseline {
                            label: majority_fit(&train_labels(corpus, vocab, cfg)?)?,
                            window: cfg.w,
                        }),
                        history: None,
                    })
                },
                load: |c| {
                    #[derive(Deserialize)]
                    struct Cfg {
                        label: TalkMove,
                    }
                    let cfg: Cfg = c.config()?;
                    Ok(Box::new(MajorityBaseline {
                        label: cfg.label,
                        window: c.header.window,
                    }))
                },
            },
            Strategy {
                name: "tmbm",
                summary: "talk-move bigram, argmax of P(next | previous)",
                train: |corpus, _, cfg| {
                    if !corpus.is_split() {
                        return Err(Error::invalid("corpus has no train/dev/test split"));
                    }
                    Ok(Trained {
                        predictor: Box::new(BigramBaseline {
                            table: BigramTable::fit(corpus.bucket(Bucket::Train)),
                            window: cfg.w,
                        }),
                        history: None,
                    })
                },
                load: |c| {
                    let t = c.tensor("counts")?;
                    let rows = (0..t.rows())
                        .map(|i| t.row(i).iter().map(|v| *v as u64).collect())
                        .collect();
                    Ok(Box::new(BigramBaseline {
                        table: BigramTable::from_rows(rows)?,
                        window: c.header.window,
                    }))
                },
            },
            Strategy {
                name: "tm-only-w",
                summary: "GRU over prior talk moves, class-weighted loss",
                train: |corpus, vocab, cfg| train_tmonly(corpus, vocab, cfg, true),
                load: load_tmonly,
            },
            Strategy {
                name: "tm-only-z",
                summary: "GRU over prior talk moves, unweighted loss",
                train: |corpus, vocab, cfg| train_tmonly(corpus, vocab, cfg, false),
                load: load_tmonly,
            },
            Strategy {
                name: "3e",
                summary: "utterance, dialogue and talk-move encoders",
                train: |corpus, vocab, cfg| {
                    let (train, dev) = split_examples(corpus, vocab, cfg.window())?;
                    let mut m = ThreeE::new(vocab.clone(), cfg)?;
                    let history = fit(&mut m, &train, &dev, cfg)?;
                    Ok(Trained {
                        predictor: Box::new(m),
                        history: Some(history),
                    })
                },
                load: |c| {
                    let cfg: ThreeEConfig = c.config()?;
                    let vocab = c
                        .header
                        .vocab
                        .clone()
                        .ok_or_else(|| Error::invalid("3-E checkpoint has no vocabulary"))?;
                    let load = |p: &Option<PathBuf>| {
                        p.as_ref()
                            .map(|p| ExternalEmbeddings::load(p).map(|e| (p.clone(), e)))
                            .transpose()
                    };
                    let mut m = ThreeE {
                        model: Model3E::new(vocab.len(), cfg.dims, 0)?,
                        vocab,
                        window: c.header.window,
                        ext_utterance: load(&cfg.ext_utterance)?,
                        ext_context: load(&cfg.ext_context)?,
                    };
                    c.restore_params(&mut m.model)?;
                    Ok(Box::new(m))
                },
            },
        ];
        Registry { strategies }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.iter().map(|s| s.name).collect()
    }

    pub fn strategies(&self) -> &[Strategy] {
        &self.strategies
    }

    pub fn get(&self, name: &str) -> Result<&Strategy> {
        self.strategies.iter().find(|s| s.name == name).ok_or_else(|| {
            Error::invalid(format!(
                "unknown model kind {name:?} (expected one of: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn train(&self, name: &str, corpus: &Corpus, vocab: &Vocabulary, cfg: &TrainConfig) -> Result<Trained> {
        let s = self.get(name)?;
        cfg.validate()?;
        (s.train)(corpus, vocab, cfg)
    }

    pub fn load(&self, checkpoint: &Checkpoint) -> Result<Box<dyn Predictor>> {
        (self.get(&checkpoint.header.model_kind)?.load)(checkpoint)
    }

    pub fn load_file(&self, path: &std::path::Path) -> Result<Box<dyn Predictor>> {
        self.load(&Checkpoint::load(path)?)
    }
}
