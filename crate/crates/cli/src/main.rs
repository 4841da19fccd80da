mod gradcheck;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use ftmp_core::corpus::{
    generate_synthetic, load_corpus, split_corpus, Bucket, Corpus, SyntheticConfig, Vocabulary,
};
use ftmp_core::evaluation::{confusion, evaluate, facet_eval};
use ftmp_core::predictor::{input_vocabulary, Predictor, Registry};
use ftmp_core::study::{
    agreement_report, export_diagnostic, read_diagnostic, sample_diagnostic, write_diagnostic, AnnotationRecord,
};
use ftmp_core::training::{tune_window, tuning_csv, TrainConfig, Weighting};
use ftmp_core::windowing::{examples_for_bucket, window_from_context, ContextItem, Example, Origin, WindowConfig};
use ftmp_core::TalkMove;
use ftmp_service::{ServiceConfig, ServiceError};

#[derive(Parser)]
#[command(name = "ftmp", version, about = "Next teacher talk-move prediction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus and split it.
    GenSynthetic(GenSynthetic),
    /// Read a transcript JSONL file into a corpus directory.
    Ingest(Ingest),
    /// Assign transcripts to train/dev/test.
    Split(Split),
    /// Train a model and write a checkpoint.
    Train(Train),
    /// Score a checkpoint on one split.
    Evaluate(Evaluate),
    /// Train 3-E over the weighting/window grid and score each on dev.
    TuneWindow(TuneWindow),
    /// Write the confusion matrix of a checkpoint on one split.
    Confusion(Confusion),
    /// Score a checkpoint after binning moves into facets.
    FacetEval(FacetEval),
    /// Draw the class-balanced diagnostic set from the dev split.
    DiagnosticSample(DiagnosticSample),
    /// Compute annotator and model agreement over the diagnostic set.
    AgreementReport(AgreementReport),
    /// Run the HTTP service.
    Serve(Serve),
    /// Predict the next move for a context given as JSON.
    Predict(Predict),
    /// Compare analytic and finite-difference gradients.
    GradCheck(GradCheck),
}

#[derive(Args)]
struct GenSynthetic {
    /// JSON or TOML synthetic corpus config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    transcripts: Option<usize>,
    #[arg(long)]
    mean_length: Option<usize>,
    #[arg(long)]
    cue_strength: Option<f64>,
    /// uniform, or cycle for the deterministic move i -> i+1 chain.
    #[arg(long)]
    transitions: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Ingest {
    #[arg(long)]
    input: PathBuf,
    /// Fold the source-only labels (Marking, Context) into the canonical set.
    #[arg(long)]
    raw_labels: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Split {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write here instead of updating the corpus directory in place.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also dump every windowed example as JSONL.
    #[arg(long)]
    dump_examples: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    w: usize,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    corpus: PathBuf,
    /// JSON or TOML training config; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "3e")]
    model_kind: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    weighting: Option<Weighting>,
}

#[derive(Args)]
struct ModelOnSplit {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "dev")]
    split: Bucket,
}

#[derive(Args)]
struct Evaluate {
    #[command(flatten)]
    on: ModelOnSplit,
    /// Per-class CSV report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Row name in the printed table; defaults to the model kind.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct TuneWindow {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7")]
    windows: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Confusion {
    #[command(flatten)]
    on: ModelOnSplit,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct FacetEval {
    #[command(flatten)]
    on: ModelOnSplit,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    confusion_csv: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnosticSample {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    w: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AgreementReport {
    #[arg(long)]
    diagnostic: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// One or two annotator ids; the first is Annotator 1.
    #[arg(long = "annotator", required = true, num_args = 1)]
    annotators: Vec<String>,
    /// JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    markdown: Option<PathBuf>,
}

#[derive(Args)]
struct Serve {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct Predict {
    #[arg(long)]
    model: PathBuf,
    /// JSON list of context items, oldest first.
    #[arg(long)]
    context: PathBuf,
}

#[derive(Args)]
struct GradCheck {
    /// Tiny dimensions and every coordinate; otherwise default dimensions
    /// with sampled coordinates.
    #[arg(long)]
    tiny: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    coords: usize,
}

/// A bad flag or input, reported with exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<ftmp_core::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
        if let Some(e) = cause.downcast_ref::<ServiceError>() {
            return match e {
                ServiceError::Config(_) => 1,
                ServiceError::Core(c) if c.is_validation() => 1,
                _ => 2,
            };
        }
    }
    2
}

fn must_exist(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(usage(format!("{} does not exist", path.display())));
    }
    Ok(())
}

/// JSON or TOML by file extension.
fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    must_exist(path)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_split_corpus(dir: &Path) -> Result<Corpus> {
    must_exist(dir)?;
    let corpus = Corpus::load_dir(dir)?;
    if !corpus.is_split() {
        return Err(usage(format!("{} has no split.json; run `ftmp split` first", dir.display())));
    }
    Ok(corpus)
}

fn load_model(path: &Path) -> Result<Box<dyn Predictor>> {
    must_exist(path)?;
    Ok(Registry::builtin().load_file(path)?)
}

fn display_name(kind: &str) -> &str {
    match kind {
        "random" => "RB",
        "majority" => "Majority",
        "tmbm" => "TMBM",
        "tm-only-w" => "TM-only-w",
        "tm-only-z" => "TM-only-z",
        "3e" => "3-E",
        other => other,
    }
}

fn split_examples(p: &dyn Predictor, corpus: &Corpus, split: Bucket) -> Result<Vec<Example>> {
    let examples = examples_for_bucket(corpus, split, &input_vocabulary(p), WindowConfig::new(p.window())?);
    if examples.is_empty() {
        return Err(usage(format!("the {split:?} split has no examples")));
    }
    Ok(examples)
}

fn golds_and_preds(on: &ModelOnSplit) -> Result<(Box<dyn Predictor>, Vec<TalkMove>, Vec<TalkMove>)> {
    let model = load_model(&on.model)?;
    let corpus = load_split_corpus(&on.corpus)?;
    let examples = split_examples(model.as_ref(), &corpus, on.split)?;
    let preds = model.predict(&examples)?;
    Ok((model, examples.iter().map(|e| e.label).collect(), preds))
}

fn gen_synthetic(a: GenSynthetic) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_config::<SyntheticConfig>(p)?,
        None => SyntheticConfig {
            num_transcripts: 20,
            mean_length: 50,
            transition_matrix: SyntheticConfig::uniform(),
            lexical_cue_strength: 0.0,
            seed: a.seed,
            initial: None,
        },
    };
    if let Some(n) = a.transcripts {
        cfg.num_transcripts = n;
    }
    if let Some(n) = a.mean_length {
        cfg.mean_length = n;
    }
    if let Some(c) = a.cue_strength {
        cfg.lexical_cue_strength = c;
    }
    match a.transitions.as_deref() {
        None => {}
        Some("uniform") => cfg.transition_matrix = SyntheticConfig::uniform(),
        Some("cycle") => {
            let next: [TalkMove; 8] = std::array::from_fn(|i| TalkMove::ALL[(i + 1) % TalkMove::COUNT]);
            cfg.transition_matrix = SyntheticConfig::deterministic(next);
        }
        Some(other) => return Err(usage(format!("unknown transitions {other:?} (expected uniform or cycle)"))),
    }
    if a.config.is_none() || a.seed != 0 {
        cfg.seed = a.seed;
    }
    cfg.validate()?;
    let corpus = split_corpus(generate_synthetic(&cfg)?, cfg.seed)?;
    corpus.save_dir(&a.out)?;
    println!(
        "wrote {} transcripts, {} utterances to {}",
        corpus.transcripts.len(),
        corpus.num_utterances(),
        a.out.display()
    );
    Ok(())
}

fn ingest(a: Ingest) -> Result<()> {
    must_exist(&a.input)?;
    let corpus = load_corpus(&a.input, a.raw_labels)?;
    corpus.save_dir(&a.out)?;
    println!(
        "ingested {} transcripts, {} utterances into {}",
        corpus.transcripts.len(),
        corpus.num_utterances(),
        a.out.display()
    );
    Ok(())
}

fn split(a: Split) -> Result<()> {
    must_exist(&a.corpus)?;
    let w = WindowConfig::new(a.w)?;
    let mut corpus = Corpus::load_dir(&a.corpus)?;
    corpus.split.clear();
    let corpus = split_corpus(corpus, a.seed)?;
    let out = a.out.as_ref().unwrap_or(&a.corpus);
    corpus.save_dir(out)?;
    let count = |b| corpus.bucket(b).count();
    println!(
        "train {} / dev {} / test {} transcripts -> {}",
        count(Bucket::Train),
        count(Bucket::Dev),
        count(Bucket::Test),
        out.display()
    );
    if let Some(path) = &a.dump_examples {
        let vocab = Vocabulary::build(&corpus, 1)?;
        let mut s = String::new();
        for b in [Bucket::Train, Bucket::Dev, Bucket::Test] {
            for e in examples_for_bucket(&corpus, b, &vocab, w) {
                let line = serde_json::json!({ "split": b, "id": e.id(), "example": e });
                s.push_str(&line.to_string());
                s.push('\n');
            }
        }
        write(path, s)?;
    }
    Ok(())
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    })
}

fn train(a: Train) -> Result<()> {
    let registry = Registry::builtin();
    registry.get(&a.model_kind)?;
    let mut cfg = train_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(w) = a.weighting {
        cfg.weighting = w;
    }
    cfg.validate()?;
    let corpus = load_split_corpus(&a.corpus)?;
    let vocab = Vocabulary::build(&corpus, cfg.min_freq)?;
    let start = Instant::now();
    let trained = registry.train(&a.model_kind, &corpus, &vocab, &cfg)?;
    trained.predictor.checkpoint()?.save(&a.out)?;
    match &trained.history {
        Some(h) => {
            if let Some(path) = &a.history {
                write(path, h.to_csv())?;
            }
            let best = h.best_epoch;
            println!(
                "trained {} for {} epochs in {:.1}s; kept epoch {} (dev macro-F1 {:.2})",
                a.model_kind,
                h.train_loss.len(),
                start.elapsed().as_secs_f64(),
                best + 1,
                100.0 * h.dev_macro_f1.get(best).copied().unwrap_or(f64::NAN)
            );
        }
        None => println!("fitted {}", a.model_kind),
    }
    println!("checkpoint: {}", a.out.display());
    Ok(())
}

fn evaluate_cmd(a: Evaluate) -> Result<()> {
    let (model, golds, preds) = golds_and_preds(&a.on)?;
    let report = evaluate(&golds, &preds)?;
    if let Some(p) = &a.report {
        write(p, report.to_csv())?;
    }
    let name = a.name.unwrap_or_else(|| display_name(model.kind()).to_string());
    println!("{}", report.table_header());
    println!("{}", report.table_row(&name));
    println!("accuracy {:.2} on {} examples", 100.0 * report.accuracy, golds.len());
    Ok(())
}

fn tune(a: TuneWindow) -> Result<()> {
    let cfg = train_config(a.config.as_deref())?;
    cfg.validate()?;
    for &w in &a.windows {
        WindowConfig::new(w)?;
    }
    let corpus = load_split_corpus(&a.corpus)?;
    let vocab = Vocabulary::build(&corpus, cfg.min_freq)?;
    let rows = tune_window(&corpus, &vocab, &cfg, &a.windows)?;
    let csv = tuning_csv(&rows);
    write(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn confusion_cmd(a: Confusion) -> Result<()> {
    let (model, golds, preds) = golds_and_preds(&a.on)?;
    let m = confusion(&golds, &preds)?;
    if let Some(p) = &a.csv {
        write(p, m.to_csv())?;
    }
    if let Some(p) = &a.svg {
        write(p, m.to_svg(&format!("{} on {:?}", display_name(model.kind()), a.on.split)))?;
    }
    print!("{}", m.to_csv());
    Ok(())
}

fn facet_cmd(a: FacetEval) -> Result<()> {
    let (model, golds, preds) = golds_and_preds(&a.on)?;
    let moves = evaluate(&golds, &preds)?;
    let facets = facet_eval(&golds, &preds)?;
    if let Some(p) = &a.report {
        write(p, facets.to_csv())?;
    }
    if let Some(p) = &a.confusion_csv {
        write(p, facets.matrix.to_csv())?;
    }
    let name = display_name(model.kind());
    println!("{}", facets.table_header());
    println!("{}", facets.table_row(name));
    println!(
        "accuracy: talk moves {:.2}, facets {:.2}",
        100.0 * moves.accuracy,
        100.0 * facets.accuracy
    );
    Ok(())
}

fn diagnostic_sample(a: DiagnosticSample) -> Result<()> {
    let w = WindowConfig::new(a.w)?;
    let corpus = load_split_corpus(&a.corpus)?;
    let vocab = Vocabulary::build(&corpus, 1)?;
    let dev = examples_for_bucket(&corpus, Bucket::Dev, &vocab, w);
    let set = sample_diagnostic(&dev, a.seed)?;
    let items = export_diagnostic(&set, &corpus)?;
    write_diagnostic(&items, &a.out)?;
    println!("wrote {} diagnostic examples to {}", items.len(), a.out.display());
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            // An unterminated last line is an interrupted, unacknowledged write.
            Err(_) if i + 1 == text.lines().count() && !text.ends_with('\n') => {}
            Err(e) => return Err(usage(format!("{}:{}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

fn agreement(a: AgreementReport) -> Result<()> {
    if a.annotators.len() > 2 {
        return Err(usage("at most two --annotator ids"));
    }
    must_exist(&a.diagnostic)?;
    must_exist(&a.annotations)?;
    let model = load_model(&a.model)?;
    let items = read_diagnostic(&a.diagnostic)?;
    let vocab = input_vocabulary(model.as_ref());
    let examples = items.iter().map(|d| d.to_example(&vocab)).collect::<ftmp_core::Result<Vec<_>>>()?;
    let preds = model.predict(&examples)?;
    let records = read_records(&a.annotations)?;
    let of = |id: &str| -> Vec<AnnotationRecord> { records.iter().filter(|r| r.annotator_id == id).cloned().collect() };
    let ann1 = of(&a.annotators[0]);
    let ann2 = a.annotators.get(1).map(|id| of(id));
    let ids: Vec<String> = items.iter().map(|d| d.example_id.clone()).collect();
    let gold: Vec<TalkMove> = items.iter().map(|d| d.label).collect();
    let report = agreement_report(&ids, &gold, &preds, &ann1, ann2.as_deref())?;
    if let Some(p) = &a.out {
        write(p, serde_json::to_string_pretty(&report)?)?;
    }
    let md = report.to_markdown();
    if let Some(p) = &a.markdown {
        write(p, &md)?;
    }
    print!("{md}");
    Ok(())
}

fn serve(a: Serve) -> Result<()> {
    let cfg = ServiceConfig::load(&a.config)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(ftmp_service::serve(&cfg))?;
    Ok(())
}

fn predict(a: Predict) -> Result<()> {
    let model = load_model(&a.model)?;
    let items: Vec<ContextItem> = read_config(&a.context)?;
    let (window, truncated) = window_from_context(&items, &input_vocabulary(model.as_ref()), WindowConfig::new(model.window())?)?;
    let example = Example {
        window,
        label: TalkMove::None,
        origin: Origin {
            transcript_id: "cli".into(),
            position: 0,
        },
    };
    let ex = std::slice::from_ref(&example);
    let probs = model.predict_proba(ex)?[0];
    let label = model.predict(ex)?[0];
    if truncated {
        println!("(context truncated to the last {} items)", model.window());
    }
    println!("next move: {label}");
    for (m, p) in TalkMove::ALL.iter().zip(probs) {
        println!("{:<26} {p:.4}", m.name());
    }
    Ok(())
}

fn grad_check_cmd(a: GradCheck) -> Result<()> {
    if a.coords == 0 {
        return Err(usage("--coords must be at least 1"));
    }
    let setup = if a.tiny {
        gradcheck::Setup::tiny()
    } else {
        gradcheck::Setup::full(a.coords)
    };
    let start = Instant::now();
    let mut failed = Vec::new();
    for (name, report) in [
        ("3-E", gradcheck::check_3e(&setup, a.seed)?),
        ("TM-only", gradcheck::check_tmonly(&setup, a.seed)?),
    ] {
        println!(
            "{name}: {} coordinates, max relative error {:.3e} at {}[{}] -> {}",
            report.checked,
            report.max_rel_error,
            report.worst_param,
            report.worst_index,
            if report.passed { "ok" } else { "FAIL" }
        );
        if !report.passed {
            failed.push(name);
        }
    }
    println!("finished in {:.2}s", start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Ingest(a) => ingest(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::TuneWindow(a) => tune(a),
        Command::Confusion(a) => confusion_cmd(a),
        Command::FacetEval(a) => facet_cmd(a),
        Command::DiagnosticSample(a) => diagnostic_sample(a),
        Command::AgreementReport(a) => agreement(a),
        Command::Serve(a) => serve(a),
        Command::Predict(a) => predict(a),
        Command::GradCheck(a) => grad_check_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
