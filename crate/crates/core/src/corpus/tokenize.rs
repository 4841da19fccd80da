//! Penn-Treebank-style word tokenization.
//!
//! Text is first cut into sentences, then each sentence runs through the
//! same ordered regex rewrite chain as NLTK's `NLTKWordTokenizer`: quote
//! normalization, punctuation detachment, bracket padding, clitic and
//! contraction splitting. Case is preserved. The full rule list is in
//! `docs/tokenizer.md`; `tests/fixtures/tokenizer_golden.tsv` freezes it.

use std::sync::OnceLock;

use fancy_regex::Regex;

struct Rule {
    pattern: Regex,
    replacement: &'static str,
}

fn rule(pattern: &str, replacement: &'static str) -> Rule {
    Rule {
        pattern: Regex::new(pattern).expect("tokenizer rule must compile"),
        replacement,
    }
}

struct RuleSet {
    starting_quotes: Vec<Rule>,
    punctuation: Vec<Rule>,
    brackets: Rule,
    double_dash: Rule,
    ending_quotes: Vec<Rule>,
    contractions: Vec<Rule>,
}

fn rules() -> &'static RuleSet {
    static RULES: OnceLock<RuleSet> = OnceLock::new();
    RULES.get_or_init(|| RuleSet {
        starting_quotes: vec![
            rule("([«“‘„]|[`]+)", " ${1} "),
            rule(r#"^""#, "``"),
            rule("(``)", " ${1} "),
            rule(r#"([ \(\[{<])("|'{2})"#, "${1} `` "),
            rule(r"(?i)(?<!\w)(')(?!(?:re|ve|ll|m|t|s|d|n)\b)(?=\w)", "${1} "),
        ],
        punctuation: vec![
            rule(r#"([^\.])(\.)([\]\)}>"'»”’ ]*)\s*$"#, "${1} ${2} ${3} "),
            rule(r"([:,])([^\d])", " ${1} ${2}"),
            rule(r"([:,])$", " ${1} "),
            rule(r"\.{2,}", " ${0} "),
            rule(r"[;@#$%&]", " ${0} "),
            rule("[\u{2012}-\u{2015}]", " ${0} "),
            rule(r#"([^\.])(\.)([\]\)}>"']*)\s*$"#, "${1} ${2}${3} "),
            rule(r"[?!]", " ${0} "),
            rule(r"([^'])' ", "${1} ' "),
            rule(r"[*]", " ${0} "),
        ],
        brackets: rule(r"[\]\[\(\)\{\}<>]", " ${0} "),
        double_dash: rule("--", " -- "),
        ending_quotes: vec![
            rule("([»”’])", " ${1} "),
            rule("''", " '' "),
            rule("\"", " '' "),
            rule(r"\s+", " "),
            rule(r"([^' ])('[sS]|'[mM]|'[dD]|') ", "${1} ${2} "),
            rule(r"([^' ])('ll|'LL|'re|'RE|'ve|'VE|n't|N'T) ", "${1} ${2} "),
        ],
        contractions: vec![
            rule(r"(?i)\b(can)(not)\b", " ${1} ${2} "),
            rule(r"(?i)\b(d)('ye)\b", " ${1} ${2} "),
            rule(r"(?i)\b(gim)(me)\b", " ${1} ${2} "),
            rule(r"(?i)\b(gon)(na)\b", " ${1} ${2} "),
            rule(r"(?i)\b(got)(ta)\b", " ${1} ${2} "),
            rule(r"(?i)\b(lem)(me)\b", " ${1} ${2} "),
            rule(r"(?i)\b(more)('n)\b", " ${1} ${2} "),
            rule(r"(?i)\b(wan)(na)(?=\s)", " ${1} ${2} "),
            rule(r"(?i) ('t)(is)\b", " ${1} ${2} "),
            rule(r"(?i) ('t)(was)\b", " ${1} ${2} "),
        ],
    })
}

fn apply(rule: &Rule, text: String) -> String {
    match rule.pattern.replace_all(&text, rule.replacement) {
        std::borrow::Cow::Borrowed(_) => text,
        std::borrow::Cow::Owned(s) => s,
    }
}

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "st", "jr", "sr", "vs", "etc", "e.g", "i.e", "no", "mt",
];

fn is_abbreviation(chunk: &str) -> bool {
    let word = chunk.trim_end_matches('.');
    if word.contains('.') {
        return true;
    }
    let mut chars = word.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        if c.is_alphabetic() {
            return true;
        }
    }
    ABBREVIATIONS.contains(&word.to_lowercase().as_str())
}

fn ends_sentence(chunk: &str) -> bool {
    let core = chunk.trim_end_matches(['"', '\'', ')', ']', '}', '”', '’']);
    if core.ends_with(['!', '?']) {
        return true;
    }
    core.ends_with('.') && !core.ends_with("..") && !is_abbreviation(core)
}

fn starts_sentence(chunk: &str) -> bool {
    chunk
        .chars()
        .next()
        .is_some_and(|c| !c.is_lowercase() && !matches!(c, ',' | ';' | ':'))
}

/// Splits text into sentences at a whitespace gap that follows `.`, `!` or
/// `?` (optionally followed by closing quotes or brackets) and precedes a
/// chunk that does not start with a lowercase letter. A period after a
/// known abbreviation, a single letter, or a dotted acronym does not end a
/// sentence. Whitespace inside a sentence is normalized to single spaces.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chunks: Vec<&str> = text.split_whitespace().collect();
    let mut sentences = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for (i, chunk) in chunks.iter().enumerate() {
        current.push(chunk);
        let boundary = chunks
            .get(i + 1)
            .is_some_and(|next| ends_sentence(chunk) && starts_sentence(next));
        if boundary {
            sentences.push(current.join(" "));
            current.clear();
        }
    }
    if !current.is_empty() {
        sentences.push(current.join(" "));
    }
    sentences
}

/// Tokenizes a single sentence with the rewrite chain.
pub fn tokenize_sentence(sentence: &str) -> Vec<String> {
    let r = rules();
    let mut text = sentence.to_string();
    for rule in &r.starting_quotes {
        text = apply(rule, text);
    }
    for rule in &r.punctuation {
        text = apply(rule, text);
    }
    text = apply(&r.brackets, text);
    text = apply(&r.double_dash, text);
    text = format!(" {text} ");
    for rule in &r.ending_quotes {
        text = apply(rule, text);
    }
    for rule in &r.contractions {
        text = apply(rule, text);
    }
    text.split_whitespace().map(str::to_string).collect()
}

pub fn tokenize(text: &str) -> Vec<String> {
    split_sentences(text)
        .iter()
        .flat_map(|s| tokenize_sentence(s))
        .collect()
}
