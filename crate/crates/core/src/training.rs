//! Mini-batch Adam training with optional class weighting, plus the
//! window/weighting tuning grid.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Bucket, Corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::model3e::Model3EDims;
use crate::numcore::{Adam, AdamConfig, Parameterized, Tensor};
use crate::predictor::Registry;
use crate::talk_move::TalkMove;
use crate::windowing::{examples_for_bucket, Example, WindowConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    ClassWeights,
    None,
    Downsample,
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_weights" | "class-weights" => Ok(Weighting::ClassWeights),
            "none" => Ok(Weighting::None),
            "downsample" => Ok(Weighting::Downsample),
            other => Err(Error::invalid(format!(
                "unknown weighting {other:?} (expected class_weights, none or downsample)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub w: usize,
    pub weighting: Weighting,
    pub seed: u64,
    pub shuffle: bool,
    /// Rescale the global gradient norm to at most this value.
    pub clip_norm: Option<f64>,
    pub min_freq: usize,
    /// Keep the parameters of the epoch with the best dev macro-F1 (when a
    /// dev split exists) instead of the last epoch.
    pub select_best: bool,
    pub model: Model3EDims,
    pub tm_move_dim: usize,
    pub tm_hidden: usize,
    /// JSONL sidecar of per-utterance embeddings for the 3-E model.
    pub ext_utterance: Option<PathBuf>,
    /// JSONL sidecar of context embeddings keyed by the last context utterance.
    pub ext_context: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-4,
            batch_size: 256,
            w: 5,
            weighting: Weighting::ClassWeights,
            seed: 0,
            shuffle: true,
            clip_norm: None,
            min_freq: 1,
            select_best: true,
            model: Model3EDims::default(),
            tm_move_dim: 32,
            tm_hidden: 64,
            ext_utterance: None,
            ext_context: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        WindowConfig::new(self.w)?;
        if self.min_freq == 0 {
            return Err(Error::invalid("min_freq must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid("clip_norm must be positive"));
            }
        }
        if self.tm_move_dim == 0 || self.tm_hidden == 0 {
            return Err(Error::invalid("tm-only dimensions must be positive"));
        }
        self.model.validate()
    }

    pub fn window(&self) -> WindowConfig {
        WindowConfig { w: self.w }
    }
}

/// `N / (K * count_k)` per class, 0 for classes that never occur.
pub fn class_weights(counts: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("class weights need at least one labelled example"));
    }
    let k = counts.len() as f64;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if c == 0 {
                log::warn!("class {i} has no training examples; its weight is 0");
                0.0
            } else {
                total as f64 / (k * c as f64)
            }
        })
        .collect())
}

pub fn label_counts(examples: &[Example]) -> [u64; TalkMove::COUNT] {
    let mut c = [0u64; TalkMove::COUNT];
    for e in examples {
        c[e.label.index()] += 1;
    }
    c
}

/// Subsamples every present class without replacement to the size of the
/// rarest present class. Kept examples stay in input order.
pub fn downsample(examples: &[Example], seed: u64) -> Result<Vec<Example>> {
    if examples.is_empty() {
        return Err(Error::invalid("nothing to downsample"));
    }
    let counts = label_counts(examples);
    let target = counts.iter().copied().filter(|c| *c > 0).min().unwrap() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; examples.len()];
    for m in TalkMove::ALL {
        let idx: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].label == m).collect();
        for &i in idx.choose_multiple(&mut rng, target) {
            keep[i] = true;
        }
    }
    Ok(examples
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(e, _)| e.clone())
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub dev_macro_f1: Vec<f64>,
    pub dev_accuracy: Vec<f64>,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,dev_macro_f1,dev_accuracy\n");
        for i in 0..self.train_loss.len() {
            let dev = |v: &Vec<f64>| v.get(i).map_or(String::new(), |x| format!("{x:.6}"));
            let _ = writeln!(
                s,
                "{},{:.6},{},{}",
                i + 1,
                self.train_loss[i],
                dev(&self.dev_macro_f1),
                dev(&self.dev_accuracy)
            );
        }
        s
    }
}

/// A model the generic loop can train.
pub trait Trainable: Parameterized {
    /// Mean weighted loss over `batch`; adds its gradient into the grad
    /// buffers.
    fn train_batch(&mut self, batch: &[&Example], weights: &[f64]) -> Result<f64>;

    fn predict_examples(&self, examples: &[Example]) -> Result<Vec<TalkMove>>;
}

/// Seed for the shuffle of `epoch`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add((epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn clip_gradients<M: Parameterized + ?Sized>(model: &mut M, max_norm: f64) {
    let norm = model
        .params()
        .iter()
        .map(|(_, p)| p.grad.squared_norm())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, p) in model.params_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
}

fn snapshot<M: Parameterized + ?Sized>(model: &M) -> Vec<Tensor> {
    model.params().into_iter().map(|(_, p)| p.value.clone()).collect()
}

fn restore<M: Parameterized + ?Sized>(model: &mut M, values: Vec<Tensor>) {
    for ((_, p), v) in model.params_mut().into_iter().zip(values) {
        p.value = v;
    }
}

/// Trains `model` in place and returns the per-epoch history.
pub fn fit<T: Trainable + ?Sized>(
    model: &mut T,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training split has no examples"));
    }
    let downsampled;
    let train = if cfg.weighting == Weighting::Downsample {
        downsampled = downsample(train, cfg.seed)?;
        &downsampled[..]
    } else {
        train
    };
    let class_w = match cfg.weighting {
        Weighting::ClassWeights => class_weights(&label_counts(train))?,
        _ => vec![1.0; TalkMove::COUNT],
    };
    let weights: Vec<f64> = train.iter().map(|e| class_w[e.label.index()]).collect();

    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), model)?;
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let dev_golds: Vec<TalkMove> = dev.iter().map(|e| e.label).collect();

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.sort_unstable();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch)));
        }
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let bw: Vec<f64> = chunk.iter().map(|&i| weights[i]).collect();
            model.zero_grads();
            let diverged = |loss: f64| Error::Diverged {
                epoch: epoch + 1,
                batch: bi + 1,
                loss,
            };
            let loss = match model.train_batch(&batch, &bw) {
                Ok(l) if l.is_finite() => l,
                Ok(l) => return Err(diverged(l)),
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            if let Some(c) = cfg.clip_norm {
                clip_gradients(model, c);
            }
            adam.step(model);
            epoch_loss += loss * chunk.len() as f64;
        }
        model.zero_grads();
        history.train_loss.push(epoch_loss / train.len() as f64);

        if !dev.is_empty() {
            let preds = model.predict_examples(dev)?;
            let report = evaluate(&dev_golds, &preds)?;
            history.dev_macro_f1.push(report.macro_f1);
            history.dev_accuracy.push(report.accuracy);
            log::info!(
                "epoch {}: loss {:.5} dev macro-F1 {:.4} acc {:.4}",
                epoch + 1,
                history.train_loss[epoch],
                report.macro_f1,
                report.accuracy
            );
            if cfg.select_best && best.as_ref().map_or(true, |(f, _)| report.macro_f1 > *f) {
                best = Some((report.macro_f1, snapshot(model)));
                history.best_epoch = epoch;
            }
        } else {
            log::info!("epoch {}: loss {:.5}", epoch + 1, history.train_loss[epoch]);
        }
    }
    match best {
        Some((_, values)) => restore(model, values),
        None => history.best_epoch = cfg.epochs - 1,
    }
    Ok(history)
}

pub fn split_examples(corpus: &Corpus, vocab: &Vocabulary, w: WindowConfig) -> Result<(Vec<Example>, Vec<Example>)> {
    if !corpus.is_split() {
        return Err(Error::invalid("corpus has no train/dev/test split"));
    }
    Ok((
        examples_for_bucket(corpus, Bucket::Train, vocab, w),
        examples_for_bucket(corpus, Bucket::Dev, vocab, w),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningRow {
    pub configuration: String,
    pub weighting: Weighting,
    pub w: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Trains and scores 3-E on the dev split: unweighted and class-weighted
/// at window 5, then class-weighted at every other window in `ws`.
pub fn tune_window(corpus: &Corpus, vocab: &Vocabulary, cfg: &TrainConfig, ws: &[usize]) -> Result<Vec<TuningRow>> {
    let mut grid = vec![(Weighting::None, 5), (Weighting::ClassWeights, 5)];
    grid.extend(ws.iter().filter(|&&w| w != 5).map(|&w| (Weighting::ClassWeights, w)));
    let registry = Registry::builtin();
    grid.into_iter()
        .map(|(weighting, w)| {
            let run = TrainConfig {
                weighting,
                w,
                ..cfg.clone()
            };
            let trained = registry.train("3e", corpus, vocab, &run)?;
            let dev = examples_for_bucket(corpus, Bucket::Dev, vocab, run.window());
            let report = crate::predictor::evaluate_predictor(trained.predictor.as_ref(), &dev)?;
            let label = match weighting {
                Weighting::None => "No weighting",
                _ => "Class weighting",
            };
            Ok(TuningRow {
                configuration: format!("{label}, window {w}"),
                weighting,
                w,
                precision: report.macro_precision,
                recall: report.macro_recall,
                f1: report.macro_f1,
                accuracy: report.accuracy,
            })
        })
        .collect()
}

pub fn tuning_csv(rows: &[TuningRow]) -> String {
    let mut s = String::from("Configuration,Prec,Recall,F1,Acc\n");
    for r in rows {
        let _ = writeln!(
            s,
            "\"{}\",{:.2},{:.2},{:.2},{:.2}",
            r.configuration,
            100.0 * r.precision,
            100.0 * r.recall,
            100.0 * r.f1,
            100.0 * r.accuracy
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::windowing::{ContextElement, Origin};

    fn ex(label: TalkMove, i: usize) -> Example {
        Example {
            window: vec![ContextElement::pad()],
            label,
            origin: Origin {
                transcript_id: "t".into(),
                position: i,
            },
        }
    }

    #[test]
    fn weights_formula() {
        assert_eq!(class_weights(&[5; 8]).unwrap(), vec![1.0; 8]);
        let w = class_weights(&[6, 2]).unwrap();
        assert!((w[0] - 8.0 / 12.0).abs() < 1e-15);
        assert_eq!(w[1], 2.0);
        let counts = [10, 3, 0, 7, 1, 1, 50, 2];
        let w = class_weights(&counts).unwrap();
        assert_eq!(w[2], 0.0);
        let products: Vec<f64> = counts.iter().zip(&w).filter(|(c, _)| **c > 0).map(|(c, w)| *c as f64 * w).collect();
        assert!(products.iter().all(|p| (p - products[0]).abs() < 1e-12));
        assert!(class_weights(&[0; 8]).is_err());
    }

    #[test]
    fn downsample_balances() {
        let mut exs: Vec<Example> = (0..100).map(|i| ex(TalkMove::None, i)).collect();
        exs.extend((100..110).map(|i| ex(TalkMove::Wait, i)));
        let d = downsample(&exs, 1).unwrap();
        let c = label_counts(&d);
        assert_eq!((c[0], c[1]), (10, 10));
        assert_eq!(d, downsample(&exs, 1).unwrap());
        let balanced: Vec<Example> = (0..6).map(|i| ex(TalkMove::ALL[i % 3], i)).collect();
        assert_eq!(downsample(&balanced, 3).unwrap(), balanced);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { w: 0, ..Default::default() }.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "weighting": "downsample"}"#).unwrap();
        assert_eq!(parsed.epochs, 3);
        assert_eq!(parsed.weighting, Weighting::Downsample);
        assert_eq!(parsed.lr, 1e-4);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn epoch_seeds_differ() {
        assert_ne!(epoch_seed(0, 0), epoch_seed(0, 1));
        assert_eq!(epoch_seed(7, 3), epoch_seed(7, 3));
    }
}
