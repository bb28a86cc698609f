"""Tokenization, vocabulary and bag-of-words vectors."""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3
N_RESERVED = len(RESERVED)

DEFAULT_MAX_LEN = 64

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def normalize(text: str) -> list[str]:
    """Lowercase, replace ASCII punctuation with spaces and split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


@dataclass(frozen=True)
class Vocabulary:
    """Bidirectional term <-> id map. Ids 0..3 are the reserved tokens."""

    terms: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.terms[:N_RESERVED]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        index = {t: i for i, t in enumerate(self.terms)}
        if len(index) != len(self.terms):
            raise ValueError("duplicate terms in vocabulary")
        if len(self.terms) <= N_RESERVED:
            raise ValueError("vocabulary needs at least one real term")
        object.__setattr__(self, "index", index)

    @property
    def v(self) -> int:
        return len(self.terms)

    def __len__(self) -> int:
        return len(self.terms)

    def __contains__(self, term: str) -> bool:
        return term in self.index

    def id(self, term: str) -> int:
        return self.index.get(term, UNK_ID)

    def term(self, tid: int) -> str:
        return self.terms[tid]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.terms), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocabulary:
    """Build a vocabulary from raw documents.

    Terms with corpus frequency >= ``min_freq`` are kept, ordered by
    frequency descending and then lexicographically, after the four
    reserved tokens.
    """
    counts: Counter[str] = Counter()
    n_docs = 0
    for doc in corpus:
        n_docs += 1
        counts.update(normalize(doc))
    if n_docs == 0:
        raise ValueError("empty corpus")
    kept = [t for t, c in counts.items() if c >= min_freq and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(RESERVED + tuple(kept))


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)


def tokenize(text: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> TokenSeq:
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    ids = [CLS_ID]
    ids.extend(vocab.id(t) for t in normalize(text)[: max_len - 1])
    return TokenSeq(tuple(ids))


def detokenize(seq: TokenSeq, vocab: Vocabulary) -> str:
    return " ".join(vocab.term(i) for i in seq.ids if i != CLS_ID)


def bow(seq: TokenSeq | Sequence[int]) -> frozenset[int]:
    """Binary bag-of-words: the distinct non-reserved ids of a sequence."""
    ids = seq.ids if isinstance(seq, TokenSeq) else seq
    return frozenset(i for i in ids if i >= N_RESERVED)


def term_ids(text: str, vocab: Vocabulary) -> list[int]:
    """All in-vocabulary term ids of ``text``, without truncation or CLS."""
    return [vocab.index[t] for t in normalize(text) if t in vocab.index]


def read_tsv(path, n_fields: int) -> list[tuple[str, ...]]:
    """Read a UTF-8 TSV file, one record per line, exactly ``n_fields`` columns."""
    rows = []
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != n_fields:
                raise ValueError(f"{path}:{lineno}: expected {n_fields} fields, got {len(parts)}")
            rows.append(tuple(parts))
    return rows


def write_tsv(path, rows: Iterable[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write("\t".join(row) + "\n")


def read_corpus(path) -> list[tuple[str, str]]:
    """Corpus file: ``id<TAB>text`` per line."""
    return [(r[0], r[1]) for r in read_tsv(path, 2)]
