"""Builds data/pos.tsv: the most frequent UD tag of every corpus token.

Tags come from spaCy's small English model. A spaCy token counts only when
the twintower tokenizer would produce exactly one token from it.

usage: python make_pos_table.py data/corpus.txt data/pos.tsv
"""

import re
import sys
from collections import Counter, defaultdict

import en_core_web_sm

WORD = re.compile(r"[^\W_]+(?:'[^\W_]+)*|\S", re.UNICODE)


def main(corpus, out):
    nlp = en_core_web_sm.load(disable=["parser", "ner"])
    counts = defaultdict(Counter)
    with open(corpus, encoding="utf-8") as f:
        lines = [line.strip() for line in f if line.strip()]
    for doc in nlp.pipe(lines, batch_size=256):
        for tok in doc:
            pieces = WORD.findall(tok.text)
            if len(pieces) == 1 and tok.pos_ not in ("SPACE", ""):
                counts[pieces[0].lower()][tok.pos_] += 1
    with open(out, "w", encoding="utf-8") as f:
        f.write("# token<TAB>most frequent UD tag (spaCy en_core_web_sm)\n")
        for token in sorted(counts):
            tag, _ = max(counts[token].items(), key=lambda kv: (kv[1], kv[0]))
            f.write(f"{token}\t{tag}\n")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
