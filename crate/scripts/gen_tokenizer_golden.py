"""Regenerates crates/core/tests/fixtures/tokenizer_golden.tsv.

Sentences are split with the same rule as `split_sentences` in
crates/core/src/corpus/tokenize.rs; each sentence is then tokenized with
NLTK's NLTKWordTokenizer (the tokenizer behind nltk.word_tokenize).
Requires `pip install nltk`; no model data is needed.
"""
import sys
from nltk.tokenize import NLTKWordTokenizer

ABBREVIATIONS = {"mr", "mrs", "ms", "dr", "prof", "st", "jr", "sr", "vs", "etc", "e.g", "i.e", "no", "mt"}


def is_abbreviation(chunk):
    word = chunk.rstrip(".")
    if "." in word:
        return True
    if len(word) == 1 and word.isalpha():
        return True
    return word.lower() in ABBREVIATIONS


def ends_sentence(chunk):
    core = chunk.rstrip("\"')]}”’")
    if core.endswith(("!", "?")):
        return True
    return core.endswith(".") and not core.endswith("..") and not is_abbreviation(core)


def starts_sentence(chunk):
    c = chunk[0]
    return not c.islower() and c not in ",;:"


def split_sentences(text):
    chunks = text.split()
    out, cur = [], []
    for i, chunk in enumerate(chunks):
        cur.append(chunk)
        if i + 1 < len(chunks) and ends_sentence(chunk) and starts_sentence(chunks[i + 1]):
            out.append(" ".join(cur))
            cur = []
    if cur:
        out.append(" ".join(cur))
    return out


def main():
    tok = NLTKWordTokenizer()
    inputs = [line.rstrip("\n") for line in open(sys.argv[1], encoding="utf-8") if line.strip()]
    with open(sys.argv[2], "w", encoding="utf-8") as f:
        for text in inputs:
            tokens = [t for s in split_sentences(text) for t in tok.tokenize(s)]
            f.write(text + "\t" + " ".join(tokens) + "\n")


if __name__ == "__main__":
    main()
