use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ftmp_core::baselines::TmOnly;
use ftmp_core::model3e::{Model3E, Model3EDims};
use ftmp_core::numcore::{batch_xent, grad_check, GradCheckOptions, GradCheckReport};
use ftmp_core::windowing::ContextElement;
use ftmp_core::{Result, TalkMove};

pub struct Setup {
    pub vocab_size: usize,
    pub dims: Model3EDims,
    pub w: usize,
    pub batch: usize,
    pub max_coords: usize,
}

impl Setup {
    /// Vocabulary 12, window 3, every coordinate checked.
    pub fn tiny() -> Self {
        Setup {
            vocab_size: 12,
            dims: Model3EDims::tiny(),
            w: 3,
            batch: 4,
            max_coords: usize::MAX,
        }
    }

    /// Default dimensions with a sample of coordinates per parameter.
    pub fn full(max_coords: usize) -> Self {
        Setup {
            vocab_size: 50,
            dims: Model3EDims::default(),
            w: 5,
            batch: 2,
            max_coords,
        }
    }
}

struct Batch {
    windows: Vec<Vec<ContextElement>>,
    labels: Vec<usize>,
    weights: Vec<f64>,
}

/// Random windows with leading padding, varied utterance lengths and a few
/// repeated utterances, so dedup and packing paths are exercised.
fn batch(setup: &Setup, rng: &mut ChaCha8Rng) -> Batch {
    let mut windows = Vec::new();
    for b in 0..setup.batch {
        let pads = b.min(setup.w - 1);
        let mut win: Vec<ContextElement> = (0..pads).map(|_| ContextElement::pad()).collect();
        for _ in pads..setup.w {
            let len = rng.gen_range(1..=4);
            win.push(ContextElement {
                speaker_change: rng.gen_bool(0.5),
                tokens: (0..len).map(|_| rng.gen_range(2..setup.vocab_size as u32)).collect(),
                talk_move: Some(TalkMove::ALL[rng.gen_range(0..TalkMove::COUNT)]),
                utterance_idx: None,
            });
        }
        windows.push(win);
    }
    if setup.batch > 1 {
        let dup = windows[0].last().cloned().expect("nonempty window");
        *windows[1].last_mut().expect("nonempty window") = dup;
    }
    Batch {
        windows,
        labels: (0..setup.batch).map(|_| rng.gen_range(0..TalkMove::COUNT)).collect(),
        weights: (0..setup.batch).map(|_| rng.gen_range(0.5..2.0)).collect(),
    }
}

fn options(setup: &Setup, seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        max_coords_per_param: setup.max_coords,
        seed,
        ..GradCheckOptions::default()
    }
}

pub fn check_3e(setup: &Setup, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = batch(setup, &mut rng);
    let refs: Vec<&[ContextElement]> = b.windows.iter().map(Vec::as_slice).collect();
    let scale = 1.0 / setup.batch as f64;
    let mut model = Model3E::new(setup.vocab_size, setup.dims, seed)?;
    grad_check(
        &mut model,
        |m| {
            let s = m.forward_batch(&refs, None)?;
            let (loss, d, _) = batch_xent(&s.logits, &b.labels, &b.weights, scale)?;
            m.backward(&s, &d);
            Ok(loss)
        },
        &options(setup, seed),
    )
}

pub fn check_tmonly(setup: &Setup, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
    let b = batch(setup, &mut rng);
    let refs: Vec<&[ContextElement]> = b.windows.iter().map(Vec::as_slice).collect();
    let scale = 1.0 / setup.batch as f64;
    let mut model = TmOnly::new(setup.dims.move_dim, setup.dims.move_hidden, true, seed);
    grad_check(
        &mut model,
        |m| {
            let s = m.forward_batch(&refs)?;
            let (loss, d, _) = batch_xent(&s.logits, &b.labels, &b.weights, scale)?;
            m.backward(&s, &d);
            Ok(loss)
        },
        &options(setup, seed),
    )
}
