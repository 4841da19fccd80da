//! End-to-end acceptance checks, one test per criterion. Each prints a
//! single `PASS`/`FAIL` line to stdout and fails the test when the
//! criterion does not hold.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ftmp_core::baselines::BigramTable;
use ftmp_core::corpus::{
    generate_synthetic, split_corpus, Bucket, Corpus, Role, SyntheticConfig, Transcript, Utterance, Vocabulary,
};
use ftmp_core::evaluation::{confusion_indices, evaluate, facet_eval, prf1};
use ftmp_core::model3e::{Checkpoint, Model3EDims};
use ftmp_core::predictor::{evaluate_predictor, Predictor, RandomBaseline, Registry};
use ftmp_core::study::{
    acceptance_rate, agreement_report, primary_agreement, sample_diagnostic, write_diagnostic, AnnotationRecord,
    DiagnosticItem, DIAGNOSTIC_COMPOSITION, DIAGNOSTIC_SIZE,
};
use ftmp_core::training::{TrainConfig, Weighting};
use ftmp_core::windowing::{examples_for_bucket, extract_examples, Example, WindowConfig};
use ftmp_core::{Error, TalkMove};

/// Keeps timed criteria from sharing the CPU with each other.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "C{id} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    let _ = out.flush();
    assert!(pass, "C{id} {name}: {detail}");
}

/// Synthetic corpus trimmed to exactly `total` utterances, then split.
fn sized_corpus(cfg: &SyntheticConfig, total: usize) -> Corpus {
    let mut c = generate_synthetic(cfg).unwrap();
    assert!(c.num_utterances() >= total, "generator produced too few utterances");
    while c.num_utterances() > total {
        let excess = c.num_utterances() - total;
        let last = c.transcripts.last_mut().unwrap();
        if last.utterances.len() <= excess {
            c.transcripts.pop();
        } else {
            let keep = last.utterances.len() - excess;
            last.utterances.truncate(keep);
        }
    }
    split_corpus(c, cfg.seed).unwrap()
}

fn all_examples(c: &Corpus, vocab: &Vocabulary, w: usize) -> Vec<Example> {
    let cfg = WindowConfig::new(w).unwrap();
    c.transcripts.iter().flat_map(|t| extract_examples(t, vocab, cfg)).collect()
}

fn cycle() -> [[f64; 8]; 8] {
    SyntheticConfig::deterministic(std::array::from_fn(|i| TalkMove::ALL[(i + 1) % TalkMove::COUNT]))
}

/// Smaller 3-E and a higher learning rate for the directional checks.
fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        lr: 1e-3,
        batch_size: 32,
        seed,
        model: Model3EDims {
            word_dim: 16,
            utt_hidden: 16,
            move_dim: 8,
            move_hidden: 16,
            dialogue_hidden: 32,
            ff_hidden: 16,
            ext_u: 0,
            ext_c: 0,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn c01_gradient_check() {
    let _g = serial();
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_ftmp"))
        .args(["grad-check", "--tiny"])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().filter(|l| l.starts_with("3-E:") || l.starts_with("TM-only:")).collect();
    let pass = out.status.success() && lines.len() == 2 && lines.iter().all(|l| l.ends_with("ok")) && secs < 60.0;
    verdict(1, "gradient check", pass, &format!("{} in {secs:.2}s", lines.join("; ")));
}

#[test]
fn c02_bigram_oracle() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let corpora = 50;
    for seed in 0..corpora {
        let mut m = [[0.0; 8]; 8];
        for row in &mut m {
            for x in row.iter_mut() {
                *x = rng.gen_range(0.0..1.0);
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        let c = generate_synthetic(&SyntheticConfig {
            num_transcripts: rng.gen_range(1..15),
            mean_length: rng.gen_range(1..40),
            transition_matrix: m,
            lexical_cue_strength: 0.0,
            seed,
            initial: None,
        })
        .unwrap();
        let table = BigramTable::fit(&c.transcripts);
        let mut oracle: HashMap<(Option<TalkMove>, TalkMove), u64> = HashMap::new();
        for t in &c.transcripts {
            let mut prev = None;
            for u in &t.utterances {
                *oracle.entry((prev, u.talk_move)).or_default() += 1;
                prev = Some(u.talk_move);
            }
        }
        for (row, prev) in TalkMove::ALL.iter().map(|m| Some(*m)).chain([None]).enumerate() {
            for (col, next) in TalkMove::ALL.iter().enumerate() {
                if table.counts[row][col] != oracle.get(&(prev, *next)).copied().unwrap_or(0) {
                    mismatches += 1;
                }
            }
        }
    }
    let det = sized_corpus(
        &SyntheticConfig {
            num_transcripts: 44,
            mean_length: 50,
            transition_matrix: cycle(),
            lexical_cue_strength: 0.0,
            seed: 1,
            initial: None,
        },
        2000,
    );
    let vocab = Vocabulary::build(&det, 1).unwrap();
    let cfg = TrainConfig::default();
    let tmbm = Registry::builtin().train("tmbm", &det, &vocab, &cfg).unwrap().predictor;
    let test = examples_for_bucket(&det, Bucket::Test, &vocab, cfg.window());
    let acc = evaluate_predictor(tmbm.as_ref(), &test).unwrap().accuracy;
    verdict(
        2,
        "bigram oracle",
        mismatches == 0 && acc == 1.0,
        &format!("{corpora} corpora, {mismatches} cell mismatches; deterministic held-out accuracy {acc:.4} on {} examples", test.len()),
    );
}

#[test]
fn c03_learning_sanity_transitions() {
    let _g = serial();
    let start = Instant::now();
    let det = sized_corpus(
        &SyntheticConfig {
            num_transcripts: 44,
            mean_length: 50,
            transition_matrix: cycle(),
            lexical_cue_strength: 0.5,
            seed: 1,
            initial: None,
        },
        2000,
    );
    let vocab = Vocabulary::build(&det, 1).unwrap();
    let registry = Registry::builtin();
    let three_e_cfg = TrainConfig::default();
    let tm_cfg = TrainConfig {
        batch_size: 8,
        ..TrainConfig::default()
    };
    let test = examples_for_bucket(&det, Bucket::Test, &vocab, three_e_cfg.window());
    let tm = registry.train("tm-only-w", &det, &vocab, &tm_cfg).unwrap().predictor;
    let tm_acc = evaluate_predictor(tm.as_ref(), &test).unwrap().accuracy;
    let e3 = registry.train("3e", &det, &vocab, &three_e_cfg).unwrap().predictor;
    let e3_acc = evaluate_predictor(e3.as_ref(), &test).unwrap().accuracy;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        3,
        "learning sanity (transitions)",
        tm_acc >= 0.99 && e3_acc >= 0.99 && secs < 600.0,
        &format!(
            "{} utterances, 30 epochs at lr 1e-4: TM-only-w {tm_acc:.4}, 3-E {e3_acc:.4} on {} held-out examples in {secs:.0}s",
            det.num_utterances(),
            test.len()
        ),
    );
}

#[test]
fn c04_learning_sanity_lexical() {
    let _g = serial();
    let gen = |seed, transcripts| SyntheticConfig {
        num_transcripts: transcripts,
        mean_length: 50,
        transition_matrix: SyntheticConfig::uniform(),
        lexical_cue_strength: 1.0,
        seed,
        initial: None,
    };
    let corpus = sized_corpus(&gen(2, 44), 2000);
    let held_out = generate_synthetic(&gen(77, 200)).unwrap();
    let vocab = Vocabulary::build(&corpus, 1).unwrap();
    let cfg = desk_config(4);
    let examples = all_examples(&held_out, &vocab, cfg.w);
    let registry = Registry::builtin();
    let f1 = |p: &dyn Predictor| evaluate_predictor(p, &examples).unwrap().macro_f1;
    let chance = f1(&RandomBaseline { seed: 4, window: cfg.w });
    let tmbm = f1(registry.train("tmbm", &corpus, &vocab, &cfg).unwrap().predictor.as_ref());
    let tm = f1(registry.train("tm-only-w", &corpus, &vocab, &cfg).unwrap().predictor.as_ref());
    let e3 = f1(registry.train("3e", &corpus, &vocab, &cfg).unwrap().predictor.as_ref());
    let gap = e3 - tmbm.max(tm);
    let pass = e3 >= 0.90 && (tmbm - chance).abs() <= 0.05 && (tm - chance).abs() <= 0.05 && gap > 0.3;
    verdict(
        4,
        "learning sanity (lexical cue)",
        pass,
        &format!(
            "macro-F1 on {} held-out examples: 3-E {e3:.4}, TMBM {tmbm:.4}, TM-only-w {tm:.4}, random {chance:.4}; gap {gap:.4}",
            examples.len()
        ),
    );
}

/// None follows None with probability 0.8, otherwise a uniform minority
/// move; minority move k is followed by the next minority move with
/// probability 0.43, otherwise by None. Each minority class ends up about
/// 20 times rarer than None, and weighting flips the argmax after a
/// minority move.
fn imbalanced(seed: u64) -> SyntheticConfig {
    let (stay, chain) = (0.8, 0.43);
    let mut m = [[0.0; 8]; 8];
    m[0][0] = stay;
    for k in 1..8 {
        m[0][k] = (1.0 - stay) / 7.0;
        m[k][0] = 1.0 - chain;
        m[k][1 + k % 7] = chain;
    }
    SyntheticConfig {
        num_transcripts: 80,
        mean_length: 50,
        transition_matrix: m,
        lexical_cue_strength: 0.0,
        seed,
        initial: Some([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
    }
}

#[test]
fn c05_class_weighting_direction() {
    let _g = serial();
    let registry = Registry::builtin();
    let mut details = Vec::new();
    let mut pass = true;
    for seed in 0..3 {
        let corpus = split_corpus(generate_synthetic(&imbalanced(seed)).unwrap(), seed).unwrap();
        let mut counts = [0usize; 8];
        for u in corpus.transcripts.iter().flat_map(|t| &t.utterances) {
            counts[u.talk_move.index()] += 1;
        }
        let ratio = counts[0] as f64 / (counts[1..].iter().sum::<usize>() as f64 / 7.0);
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let test = examples_for_bucket(&corpus, Bucket::Test, &vocab, WindowConfig::new(5).unwrap());
        let run = |weighting| {
            let cfg = TrainConfig {
                weighting,
                ..desk_config(seed)
            };
            let p = registry.train("3e", &corpus, &vocab, &cfg).unwrap().predictor;
            let r = evaluate_predictor(p.as_ref(), &test).unwrap();
            let minority = r.per_class[1..].iter().map(|c| c.f1).sum::<f64>() / 7.0;
            (minority, r.macro_f1)
        };
        let (min_w, macro_w) = run(Weighting::ClassWeights);
        let (min_z, macro_z) = run(Weighting::None);
        pass &= min_w > min_z && macro_w - macro_z > 0.0;
        details.push(format!(
            "seed {seed} (ratio {ratio:.1}:1): minority F1 {min_w:.4} vs {min_z:.4}, macro-F1 {macro_w:.4} vs {macro_z:.4}"
        ));
    }
    verdict(5, "class weighting direction", pass, &details.join("; "));
}

/// Independent per-class counting straight from the two label lists.
fn naive_prf1(gold: &[usize], pred: &[usize], k: usize) -> (Vec<(f64, f64, f64)>, f64) {
    let mut out = Vec::new();
    for c in 0..k {
        let tp = gold.iter().zip(pred).filter(|(g, p)| **g == c && **p == c).count() as f64;
        let fp = gold.iter().zip(pred).filter(|(g, p)| **g != c && **p == c).count() as f64;
        let fneg = gold.iter().zip(pred).filter(|(g, p)| **g == c && **p != c).count() as f64;
        let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let r = if tp + fneg == 0.0 { 0.0 } else { tp / (tp + fneg) };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        out.push((p, r, f));
    }
    let macro_f1 = out.iter().map(|x| x.2).sum::<f64>() / k as f64;
    (out, macro_f1)
}

#[test]
fn c06_metrics_oracle() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..300);
        let gold: Vec<TalkMove> = (0..n).map(|_| TalkMove::ALL[rng.gen_range(0..8)]).collect();
        let pred: Vec<TalkMove> = (0..n).map(|_| TalkMove::ALL[rng.gen_range(0..8)]).collect();
        let report = evaluate(&gold, &pred).unwrap();
        let g: Vec<usize> = gold.iter().map(|m| m.index()).collect();
        let p: Vec<usize> = pred.iter().map(|m| m.index()).collect();
        let (classes, macro_f1) = naive_prf1(&g, &p, 8);
        for (c, o) in report.per_class.iter().zip(&classes) {
            worst = worst.max((c.precision - o.0).abs()).max((c.recall - o.1).abs()).max((c.f1 - o.2).abs());
        }
        worst = worst.max((report.macro_f1 - macro_f1).abs());
        let acc = g.iter().zip(&p).filter(|(a, b)| a == b).count() as f64 / n as f64;
        worst = worst.max((report.accuracy - acc).abs());
    }
    let toy = prf1(&confusion_indices(vec!["A".into(), "B".into()], &[0, 0, 1], &[0, 1, 1]).unwrap()).unwrap();
    let toy_ok = toy.macro_f1 == 2.0 / 3.0
        && toy.per_class[0].precision == 1.0
        && toy.per_class[0].recall == 0.5
        && toy.per_class[1].precision == 0.5
        && toy.per_class[1].recall == 1.0;
    verdict(
        6,
        "metrics oracle",
        worst <= 1e-12 && toy_ok,
        &format!("1000 random sequences, max deviation {worst:.1e}; 2-class toy macro-F1 {:.6}", toy.macro_f1),
    );
}

#[test]
fn c07_facet_binning() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    let mut mean_gain = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..200);
        let gold: Vec<TalkMove> = (0..n).map(|_| TalkMove::ALL[rng.gen_range(0..8)]).collect();
        // Mix of copies and random draws so accuracies span the range.
        let keep = rng.gen_range(0.0..1.0);
        let pred: Vec<TalkMove> = gold
            .iter()
            .map(|g| if rng.gen_bool(keep) { *g } else { TalkMove::ALL[rng.gen_range(0..8)] })
            .collect();
        let moves = evaluate(&gold, &pred).unwrap().accuracy;
        let facets = facet_eval(&gold, &pred).unwrap().accuracy;
        if facets < moves {
            violations += 1;
        }
        mean_gain += (facets - moves) / 1000.0;
    }
    verdict(
        7,
        "facet binning",
        violations == 0,
        &format!("1000 prediction sets, {violations} violations, mean accuracy gain {:.4}", mean_gain),
    );
}

fn dev_pool() -> (Corpus, Vec<Example>) {
    let c = generate_synthetic(&SyntheticConfig {
        num_transcripts: 60,
        mean_length: 60,
        transition_matrix: SyntheticConfig::uniform(),
        lexical_cue_strength: 0.3,
        seed: 8,
        initial: None,
    })
    .unwrap();
    let c = split_corpus(c, 8).unwrap();
    let vocab = Vocabulary::build(&c, 1).unwrap();
    let dev = examples_for_bucket(&c, Bucket::Dev, &vocab, WindowConfig::new(5).unwrap());
    (c, dev)
}

#[test]
fn c08_diagnostic_sampling() {
    let _g = serial();
    let (c, dev) = dev_pool();
    let dev_ids: HashSet<String> = dev.iter().map(Example::id).collect();
    let dev_transcripts: HashSet<&str> = c.bucket(Bucket::Dev).map(|t| t.id.as_str()).collect();
    let mut bad = 0;
    for seed in 0..100 {
        let set = sample_diagnostic(&dev, seed).unwrap();
        let mut hist: HashMap<TalkMove, usize> = HashMap::new();
        for e in &set.examples {
            *hist.entry(e.label).or_default() += 1;
        }
        let ids: HashSet<String> = set.examples.iter().map(Example::id).collect();
        let ok = set.examples.len() == DIAGNOSTIC_SIZE
            && DIAGNOSTIC_COMPOSITION.iter().all(|(m, n)| hist.get(m) == Some(n))
            && ids.len() == DIAGNOSTIC_SIZE
            && ids.is_subset(&dev_ids)
            && set.examples.iter().all(|e| dev_transcripts.contains(e.origin.transcript_id.as_str()));
        if !ok {
            bad += 1;
        }
    }
    let mut short = Vec::new();
    let mut revoicing = 0;
    for e in &dev {
        if e.label == TalkMove::Revoicing {
            revoicing += 1;
            if revoicing > 10 {
                continue;
            }
        }
        short.push(e.clone());
    }
    let err = sample_diagnostic(&short, 0).err();
    let msg = err.as_ref().map(ToString::to_string).unwrap_or_default();
    let err_ok = matches!(err, Some(Error::InsufficientClass { .. })) && msg == "Revoicing: need 37, have 10";
    verdict(
        8,
        "diagnostic sampling",
        bad == 0 && err_ok,
        &format!("{} dev examples, 100 seeds, {bad} bad compositions; shortfall error {msg:?}", dev.len()),
    );
}

fn rec(annotator: &str, i: usize, primary: TalkMove, acceptable: impl IntoIterator<Item = TalkMove>) -> AnnotationRecord {
    let mut set: BTreeSet<TalkMove> = acceptable.into_iter().collect();
    set.insert(primary);
    AnnotationRecord {
        annotator_id: annotator.into(),
        example_id: format!("ex{i}"),
        primary,
        acceptable: set,
        timestamp: 0,
    }
}

#[test]
fn c09_agreement_fixtures() {
    let _g = serial();
    let n = 100;
    let ids: Vec<String> = (0..n).map(|i| format!("ex{i}")).collect();
    let gold: Vec<TalkMove> = (0..n).map(|i| TalkMove::ALL[i % 8]).collect();
    let other = |m: TalkMove| TalkMove::ALL[(m.index() + 1) % 8];
    // Annotator 1 matches gold on the first 70; annotator 2 on 24..80, so
    // they agree on exactly 46 (24..70) since their wrong labels never
    // coincide. Annotator 2 also lists gold as acceptable everywhere;
    // annotator 1 never does when it disagrees.
    let a1: Vec<_> = (0..n).map(|i| rec("A1", i, if i < 70 { gold[i] } else { other(gold[i]) }, [])).collect();
    let a2: Vec<_> = (0..n)
        .map(|i| {
            let p = if (24..80).contains(&i) { gold[i] } else { other(other(gold[i])) };
            rec("A2", i, p, [gold[i]])
        })
        .collect();
    let model: Vec<TalkMove> = (0..n).map(|i| if i < 90 { gold[i] } else { other(other(gold[i])) }).collect();
    let r = agreement_report(&ids, &gold, &model, &a1, Some(&a2)).unwrap();
    let expected = [
        ("inter-annotator", r.inter_annotator, 46.0),
        ("A1 vs gold", Some(r.annotator1_vs_ground_truth), 70.0),
        ("A2 vs gold", r.annotator2_vs_ground_truth, 56.0),
        ("both vs gold", r.both_vs_ground_truth, 46.0),
        ("model vs gold", Some(r.model_vs_ground_truth), 90.0),
        ("gold accepted by A2", r.ground_truth_accepted_by_annotator2, 100.0),
        ("gold accepted by A1", Some(r.ground_truth_accepted_by_annotator1), 70.0),
        ("model accepted by A1", Some(r.model_accepted_by_annotator1), 70.0),
        ("model accepted by A2", r.model_accepted_by_annotator2, 100.0),
        ("A1 accepted by A2", r.annotator1_accepted_by_annotator2, 70.0),
    ];
    let fixtures_ok = expected.iter().all(|(_, got, want)| *got == Some(*want))
        && r.rows().len() == 13
        && r.mean_acceptable_size == (100.0 + 144.0) / 200.0;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..60);
        let mut draw = |who: &str| -> Vec<AnnotationRecord> {
            (0..n)
                .map(|i| {
                    let p = TalkMove::ALL[rng.gen_range(0..8)];
                    let extra: Vec<TalkMove> = (0..rng.gen_range(0..4)).map(|_| TalkMove::ALL[rng.gen_range(0..8)]).collect();
                    rec(who, i, p, extra)
                })
                .collect()
        };
        let a = draw("a");
        let b = draw("b");
        if acceptance_rate(&a, &b).unwrap() < primary_agreement(&a, &b).unwrap() {
            violations += 1;
        }
    }
    verdict(
        9,
        "agreement fixtures",
        fixtures_ok && violations == 0,
        &format!(
            "inter-annotator {:?}, both-vs-gold {:?}, model accepted by A1 {}; 1000 random sets, {violations} violations",
            r.inter_annotator, r.both_vs_ground_truth, r.model_accepted_by_annotator1
        ),
    );
}

#[test]
fn c10_windowing_properties() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let vocab = Vocabulary::from_tokens(["a", "b", "c"].map(String::from));
    let mut failures = 0;
    for case in 0..10_000 {
        let n = rng.gen_range(1..=50);
        let w = rng.gen_range(1..=7);
        let moves: Vec<TalkMove> = (0..n).map(|_| TalkMove::ALL[rng.gen_range(0..8)]).collect();
        let t = Transcript {
            id: format!("t{case}"),
            utterances: moves
                .iter()
                .enumerate()
                .map(|(i, &m)| {
                    let student = m == TalkMove::Wait;
                    Utterance {
                        idx: i as u64 * 3,
                        speaker_id: if student { format!("S{}", rng.gen_range(0..3)) } else { "T".into() },
                        role: if student { Role::Student } else { Role::Teacher },
                        text: "a b".into(),
                        talk_move: m,
                    }
                })
                .collect(),
        };
        let ex = extract_examples(&t, &vocab, WindowConfig::new(w).unwrap());
        let ok = ex.len() == n - 1
            && ex.iter().enumerate().all(|(i, e)| {
                let want_pad = (w - 1).saturating_sub(i);
                let real: Vec<TalkMove> = e.window.iter().filter_map(|el| el.talk_move).collect();
                let lo = (i + 1).saturating_sub(w);
                e.window.len() == w
                    && e.pad_count() == want_pad
                    && e.label == moves[i + 1]
                    && real == moves[lo..=i]
            });
        if !ok {
            failures += 1;
        }
    }
    verdict(
        10,
        "windowing properties",
        failures == 0,
        &format!("10000 random transcripts (n in 1..=50, w in 1..=7), {failures} failures"),
    );
}

struct Server {
    child: Child,
    addr: String,
}

impl Server {
    fn start(config: &Path) -> Server {
        let mut child = Command::new(env!("CARGO_BIN_EXE_ftmp"))
            .args(["serve", "--config"])
            .arg(config)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line
            .trim()
            .strip_prefix("listening on http://")
            .unwrap_or_else(|| panic!("unexpected server banner {line:?}"))
            .to_string();
        Server { child, addr }
    }

    fn send(&self, method: &str, path: &str, body: &str) -> TcpStream {
        let mut s = TcpStream::connect(&self.addr).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        write!(
            s,
            "{method} {path} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            self.addr,
            body.len()
        )
        .unwrap();
        s
    }

    fn call(&self, method: &str, path: &str, body: &str) -> (u16, serde_json::Value) {
        let mut s = self.send(method, path, body);
        let mut raw = String::new();
        s.read_to_string(&mut raw).unwrap();
        let status = raw.split_whitespace().nth(1).unwrap().parse().unwrap();
        let body = raw.split_once("\r\n\r\n").map_or("", |x| x.1);
        (status, serde_json::from_str(body).unwrap_or(serde_json::Value::Null))
    }

    fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

#[test]
fn c11_persistence() {
    let _g = serial();
    // Checkpoints: every model kind, bytes -> load -> bytes and file round trip.
    let (c, dev) = dev_pool();
    let vocab = Vocabulary::build(&c, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 64,
        model: Model3EDims::tiny(),
        ..TrainConfig::default()
    };
    let registry = Registry::builtin();
    let dir = tempfile::tempdir().unwrap();
    let mut ckpt_ok = true;
    for kind in registry.names() {
        let p = registry.train(kind, &c, &vocab, &cfg).unwrap().predictor;
        let bytes = p.checkpoint().unwrap().to_bytes().unwrap();
        let path = dir.path().join(format!("{kind}.ckpt"));
        p.checkpoint().unwrap().save(&path).unwrap();
        let on_disk = std::fs::read(&path).unwrap();
        let back = registry.load(&Checkpoint::load(&path).unwrap()).unwrap();
        let again = back.checkpoint().unwrap().to_bytes().unwrap();
        ckpt_ok &= bytes == on_disk && bytes == again && p.predict_proba(&dev[..50]).unwrap() == back.predict_proba(&dev[..50]).unwrap();
    }

    // Annotation log under SIGKILL.
    let items: Vec<DiagnosticItem> = dev.iter().take(20).map(|e| DiagnosticItem::from_example(e, &c).unwrap()).collect();
    let diag = dir.path().join("diagnostic.jsonl");
    write_diagnostic(&items, &diag).unwrap();
    let log = dir.path().join("annotations.jsonl");
    let config = dir.path().join("service.toml");
    std::fs::write(
        &config,
        format!(
            "listen = \"127.0.0.1:0\"\ndiagnostic = {:?}\nannotation_log = {:?}\n",
            diag.display().to_string(),
            log.display().to_string()
        ),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut acked: Vec<(String, String)> = Vec::new();
    let mut lost = 0;
    let trials = 50;
    for trial in 0..trials {
        let server = Server::start(&config);
        let annotator = format!("ann{trial}");
        let mut mine = 0;
        let k = rng.gen_range(1..6);
        for item in items.iter().take(k) {
            let body = serde_json::to_string(&rec(&annotator, 0, TalkMove::Wait, [])).unwrap();
            let body = body.replace("\"ex0\"", &format!("{:?}", item.example_id));
            let (status, _) = server.call("POST", "/annotations", &body);
            assert_eq!(status, 201);
            acked.push((annotator.clone(), item.example_id.clone()));
            mine += 1;
        }
        // One more write in flight when the process dies.
        let body = serde_json::to_string(&rec(&annotator, 0, TalkMove::None, [])).unwrap();
        let body = body.replace("\"ex0\"", &format!("{:?}", items[k].example_id));
        let _inflight = server.send("POST", "/annotations", &body);
        server.kill();

        let server = Server::start(&config);
        let (status, next) = server.call("GET", &format!("/diagnostic/next?annotator={annotator}"), "");
        assert_eq!(status, 200);
        let completed = next["completed"].as_u64().unwrap() as usize;
        if completed < mine {
            lost += mine - completed;
        }
        server.kill();
    }
    let text = std::fs::read_to_string(&log).unwrap();
    let persisted: HashSet<(String, String)> = text
        .lines()
        .filter_map(|l| serde_json::from_str::<AnnotationRecord>(l).ok())
        .map(|r| (r.annotator_id, r.example_id))
        .collect();
    let missing = acked.iter().filter(|k| !persisted.contains(*k)).count();
    verdict(
        11,
        "persistence",
        ckpt_ok && lost == 0 && missing == 0,
        &format!(
            "checkpoints bitwise stable for {} kinds: {ckpt_ok}; {trials} kill -9 trials, {} acked records, {missing} missing from log, {lost} missing after restart",
            registry.names().len(),
            acked.len()
        ),
    );
}
