use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, Role, Transcript, Utterance};
use crate::error::{Error, Result};
use crate::talk_move::TalkMove;

/// Parameters of the Markov talk-move policy used to sample synthetic
/// transcripts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_transcripts: usize,
    pub mean_length: usize,
    /// Row `i` is the distribution of the next move given move `i`.
    pub transition_matrix: [[f64; 8]; 8],
    /// Probability that an utterance ends with the cue token of the move
    /// that follows it.
    pub lexical_cue_strength: f64,
    pub seed: u64,
    /// Distribution of the first move; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<[f64; 8]>,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_transcripts == 0 || self.mean_length == 0 {
            return Err(Error::invalid("num_transcripts and mean_length must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lexical_cue_strength) {
            return Err(Error::invalid(format!(
                "lexical_cue_strength {} outside [0, 1]",
                self.lexical_cue_strength
            )));
        }
        let rows = self
            .transition_matrix
            .iter()
            .enumerate()
            .map(|(i, r)| (format!("transition row {}", TalkMove::ALL[i]), r));
        let initial = self.initial.iter().map(|r| ("initial distribution".to_string(), r));
        for (name, row) in rows.chain(initial) {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::invalid(format!("{name} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("{name} sums to {sum}, expected 1")));
            }
        }
        Ok(())
    }

    /// Every move followed by the same next move with probability 1.
    pub fn deterministic(next: [TalkMove; 8]) -> [[f64; 8]; 8] {
        let mut m = [[0.0; 8]; 8];
        for (row, n) in m.iter_mut().zip(next) {
            row[n.index()] = 1.0;
        }
        m
    }

    pub fn uniform() -> [[f64; 8]; 8] {
        [[1.0 / 8.0; 8]; 8]
    }
}

/// Token appended to an utterance to signal the move that follows it.
pub fn cue_token(next: TalkMove) -> &'static str {
    match next {
        TalkMove::None => "cue_none",
        TalkMove::Wait => "cue_wait",
        TalkMove::PressForAccuracy => "cue_press_accuracy",
        TalkMove::KeepingEveryoneTogether => "cue_keep_together",
        TalkMove::Revoicing => "cue_revoicing",
        TalkMove::GettingStudentsToRelate => "cue_relate",
        TalkMove::Restating => "cue_restating",
        TalkMove::PressForReasoning => "cue_press_reasoning",
    }
}

fn templates(mv: TalkMove) -> &'static [&'static str] {
    match mv {
        TalkMove::None => &[
            "Good morning everyone.",
            "Okay, take out your notebooks.",
            "Thank you.",
            "Let's get started with today's problem.",
            "Alright.",
            "Put your pencils down for a second.",
        ],
        TalkMove::Wait => &[
            "It's the same shape.",
            "Four minutes!",
            "Because you'd have to use the toaster twice.",
            "I think it's ten.",
            "It had two edges.",
            "Hexagon.",
            "I don't know.",
            "You add them together.",
        ],
        TalkMove::PressForAccuracy => &[
            "What is this called?",
            "What if I had 3 slices of toast?",
            "How many sides does it have?",
            "What did you get for the answer?",
            "What number goes here?",
        ],
        TalkMove::KeepingEveryoneTogether => &[
            "Raise your hand if you know the answer.",
            "Everyone look up here.",
            "Listen to what she is saying.",
            "Can everybody hear him?",
            "Eyes on me please.",
        ],
        TalkMove::Revoicing => &[
            "So it had two edges.",
            "So you're saying it doubles.",
            "You mean the toaster runs twice.",
            "So the pattern grows by three each time.",
        ],
        TalkMove::GettingStudentsToRelate => &[
            "Do you agree or disagree with Michael?",
            "Who else agrees it would be 4?",
            "Can someone add on to that?",
            "What do you think about her idea?",
        ],
        TalkMove::Restating => &[
            "Hexagon!",
            "Four minutes.",
            "Ten.",
            "The same shape.",
        ],
        TalkMove::PressForReasoning => &[
            "How did you decide?",
            "Why would it take 4 minutes?",
            "Can you explain your thinking?",
            "How do you know that?",
        ],
    }
}

const STUDENTS: [&str; 4] = ["S1", "S2", "S3", "S4"];

fn sample_row(rng: &mut ChaCha8Rng, row: &[f64; 8]) -> TalkMove {
    let dist = WeightedIndex::new(row).expect("validated distribution");
    TalkMove::ALL[dist.sample(rng)]
}

/// Samples a corpus from the configured talk-move chain. Students speak
/// exactly when the move is Wait, and a run of consecutive Wait moves keeps
/// one student speaker. Output depends only on `cfg`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial = cfg.initial.unwrap_or([1.0 / 8.0; 8]);
    let lo = (cfg.mean_length - cfg.mean_length / 2).max(1);
    let hi = cfg.mean_length + cfg.mean_length / 2;

    let mut transcripts = Vec::with_capacity(cfg.num_transcripts);
    for t in 0..cfg.num_transcripts {
        let len = rng.gen_range(lo..=hi);
        // One extra move so the final utterance has a successor to cue.
        let mut moves = Vec::with_capacity(len + 1);
        moves.push(sample_row(&mut rng, &initial));
        while moves.len() < len + 1 {
            let prev = *moves.last().unwrap();
            moves.push(sample_row(&mut rng, &cfg.transition_matrix[prev.index()]));
        }

        let mut utterances = Vec::with_capacity(len);
        let mut student = STUDENTS[0];
        for i in 0..len {
            let mv = moves[i];
            let role = if mv == TalkMove::Wait {
                if i == 0 || moves[i - 1] != TalkMove::Wait {
                    student = STUDENTS.choose(&mut rng).copied().unwrap();
                }
                Role::Student
            } else {
                Role::Teacher
            };
            let mut text = templates(mv).choose(&mut rng).copied().unwrap().to_string();
            if rng.gen_bool(cfg.lexical_cue_strength) {
                text.push(' ');
                text.push_str(cue_token(moves[i + 1]));
            }
            utterances.push(Utterance {
                idx: i as u64,
                speaker_id: if role == Role::Student { student } else { "T" }.to_string(),
                role,
                text,
                talk_move: mv,
            });
        }
        transcripts.push(Transcript {
            id: format!("syn-{t:04}"),
            utterances,
        });
    }
    Ok(Corpus {
        transcripts,
        split: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    const CYCLE: [TalkMove; 8] = [
        TalkMove::Wait,                    // None ->
        TalkMove::PressForAccuracy,        // Wait ->
        TalkMove::KeepingEveryoneTogether, // PressForAccuracy ->
        TalkMove::Revoicing,               // KeepingEveryoneTogether ->
        TalkMove::GettingStudentsToRelate, // Revoicing ->
        TalkMove::Restating,               // GettingStudentsToRelate ->
        TalkMove::PressForReasoning,       // Restating ->
        TalkMove::None,                    // PressForReasoning ->
    ];

    fn cfg(matrix: [[f64; 8]; 8], cue: f64) -> SyntheticConfig {
        SyntheticConfig {
            num_transcripts: 6,
            mean_length: 20,
            transition_matrix: matrix,
            lexical_cue_strength: cue,
            seed: 11,
            initial: None,
        }
    }

    #[test]
    fn deterministic_cycle_is_followed() {
        let c = generate_synthetic(&cfg(SyntheticConfig::deterministic(CYCLE), 0.5)).unwrap();
        for t in &c.transcripts {
            for w in t.utterances.windows(2) {
                assert_eq!(CYCLE[w[0].talk_move.index()], w[1].talk_move);
            }
            for u in &t.utterances {
                u.validate().unwrap();
            }
        }
    }

    #[test]
    fn zero_cue_strength_plants_no_cues() {
        let c = generate_synthetic(&cfg(SyntheticConfig::uniform(), 0.0)).unwrap();
        let cues: Vec<&str> = TalkMove::ALL.iter().map(|m| cue_token(*m)).collect();
        for t in &c.transcripts {
            for u in &t.utterances {
                assert!(tokenize(&u.text).iter().all(|tok| !cues.contains(&tok.as_str())));
            }
        }
    }

    #[test]
    fn full_cue_strength_names_the_next_move() {
        let c = generate_synthetic(&cfg(SyntheticConfig::uniform(), 1.0)).unwrap();
        for t in &c.transcripts {
            for w in t.utterances.windows(2) {
                let toks = tokenize(&w[0].text);
                assert_eq!(toks.last().map(String::as_str), Some(cue_token(w[1].talk_move)));
            }
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_synthetic(&cfg(SyntheticConfig::uniform(), 0.3)).unwrap();
        let b = generate_synthetic(&cfg(SyntheticConfig::uniform(), 0.3)).unwrap();
        assert_eq!(a, b);
        let mut other = cfg(SyntheticConfig::uniform(), 0.3);
        other.seed = 12;
        assert_ne!(a, generate_synthetic(&other).unwrap());
    }

    #[test]
    fn consecutive_waits_keep_their_student() {
        let mut m = [[0.0; 8]; 8];
        for row in m.iter_mut() {
            row[TalkMove::Wait.index()] = 0.7;
            row[TalkMove::None.index()] = 0.3;
        }
        let c = generate_synthetic(&cfg(m, 0.0)).unwrap();
        for t in &c.transcripts {
            for w in t.utterances.windows(2) {
                if w[0].talk_move == TalkMove::Wait && w[1].talk_move == TalkMove::Wait {
                    assert_eq!(w[0].speaker_id, w[1].speaker_id);
                }
            }
        }
    }

    #[test]
    fn invalid_matrix_is_rejected() {
        let mut m = SyntheticConfig::uniform();
        m[3][0] += 0.01;
        assert!(generate_synthetic(&cfg(m, 0.0)).is_err());
        let mut m = SyntheticConfig::uniform();
        m[0][0] = -0.125;
        m[0][1] = 0.375;
        assert!(generate_synthetic(&cfg(m, 0.0)).is_err());
        assert!(generate_synthetic(&cfg(SyntheticConfig::uniform(), 1.5)).is_err());
    }
}
