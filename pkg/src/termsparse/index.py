"""Weighted inverted index, exact top-k retrieval and BM25."""

from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .sparse import SparseVector
from .textcore import Vocabulary, normalize

INDEX_MAGIC = b"SPIX"
INDEX_VERSION = 1


@dataclass(frozen=True)
class ScoredHit:
    doc: str
    score: float


@dataclass
class InvertedIndex:
    """Posting lists keyed by term id.

    Each posting list is a pair ``(doc_ids, weights)``: ascending int64 doc
    ids and float32 weights. Scoring promotes weights to float64.
    ``doc_lengths`` is only set for BM25 indexes.
    """

    v: int
    doc_table: list[str] = field(default_factory=list)
    postings: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    doc_lengths: np.ndarray | None = None

    @property
    def doc_count(self) -> int:
        return len(self.doc_table)

    @property
    def avgdl(self) -> float:
        if self.doc_lengths is None or self.doc_lengths.size == 0:
            return 0.0
        return float(self.doc_lengths.mean())

    def posting(self, term: int) -> list[tuple[str, float]]:
        if term not in self.postings:
            return []
        docs, w = self.postings[term]
        return [(self.doc_table[d], float(x)) for d, x in zip(docs.tolist(), w.tolist())]

    def df(self, term: int) -> int:
        return int(self.postings[term][0].size) if term in self.postings else 0

    def __eq__(self, other):
        if not isinstance(other, InvertedIndex):
            return NotImplemented
        if (self.v, self.doc_table) != (other.v, other.doc_table) or set(self.postings) != set(other.postings):
            return False
        if (self.doc_lengths is None) != (other.doc_lengths is None):
            return False
        if self.doc_lengths is not None and not np.array_equal(self.doc_lengths, other.doc_lengths):
            return False
        for t, (d, w) in self.postings.items():
            od, ow = other.postings[t]
            if not (np.array_equal(d, od) and w.tobytes() == ow.tobytes()):
                return False
        return True


class IndexBuilder:
    """Accumulates documents in batches and merges them into posting lists."""

    def __init__(self, v: int, batch_size: int = 4096):
        self.v = v
        self.batch_size = batch_size
        self.doc_table: list[str] = []
        self._seen: set[str] = set()
        self._pending: list[tuple[int, SparseVector]] = []
        self._chunks: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {}

    def add(self, doc: str, vec: SparseVector) -> None:
        if doc in self._seen:
            raise ValueError(f"duplicate document id {doc!r}")
        if vec.dim != self.v:
            raise ValueError(f"document {doc!r} has dimension {vec.dim}, index expects {self.v}")
        self._seen.add(doc)
        self._pending.append((len(self.doc_table), vec))
        self.doc_table.append(doc)
        if len(self._pending) >= self.batch_size:
            self._flush()

    def _flush(self) -> None:
        if not self._pending:
            return
        terms = np.concatenate([v.ids for _, v in self._pending])
        docs = np.concatenate([np.full(v.nnz, d, dtype=np.int64) for d, v in self._pending])
        weights = np.concatenate([v.weights for _, v in self._pending]).astype(np.float32)
        order = np.lexsort((docs, terms))
        terms, docs, weights = terms[order], docs[order], weights[order]
        bounds = np.flatnonzero(np.diff(terms)) + 1
        for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, terms.size]):
            if hi > lo:
                self._chunks.setdefault(int(terms[lo]), []).append((docs[lo:hi], weights[lo:hi]))
        self._pending.clear()

    def finish(self) -> InvertedIndex:
        self._flush()
        postings = {}
        for t in sorted(self._chunks):
            parts = self._chunks[t]
            postings[t] = (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
        return InvertedIndex(self.v, list(self.doc_table), postings)


def build_index(docs: Iterable[tuple[str, SparseVector]], v: int | None = None, batch_size: int = 4096) -> InvertedIndex:
    """Build an index from ``(external id, vector)`` pairs.

    ``v`` may be omitted when at least one document is given.
    """
    it = iter(docs)
    builder = None
    if v is not None:
        builder = IndexBuilder(v, batch_size)
    for doc, vec in it:
        if builder is None:
            builder = IndexBuilder(vec.dim, batch_size)
        builder.add(doc, vec)
    if builder is None:
        return InvertedIndex(0)
    return builder.finish()


def _top_k(cands: np.ndarray, scores: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((cands, -scores))[:k]
    return cands[order], scores[order]


def search(idx: InvertedIndex, q: SparseVector, k: int) -> list[ScoredHit]:
    """Exact top-k dot-product retrieval, accumulating term at a time.

    Query terms are visited in ascending id order; ties break on the
    internal doc id. Documents sharing no term with ``q`` are never returned.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    acc = np.zeros(idx.doc_count)
    touched = np.zeros(idx.doc_count, dtype=bool)
    for t, qw in zip(q.ids.tolist(), q.weights.tolist()):
        plist = idx.postings.get(t)
        if plist is None:
            continue
        docs, w = plist
        acc[docs] += qw * w.astype(np.float64)
        touched[docs] = True
    cands = np.flatnonzero(touched)
    cands, scores = _top_k(cands, acc[cands], k)
    return [ScoredHit(idx.doc_table[d], float(s)) for d, s in zip(cands.tolist(), scores.tolist())]


def brute_force_search(docs: Sequence[tuple[str, SparseVector]], q: SparseVector, k: int) -> list[ScoredHit]:
    """Reference scorer: full dot product against every stored vector.

    Same ordering contract as :func:`search`. It works on the vectors as
    given, so it agrees bit-for-bit with the index only when document weights
    are exactly representable in float32.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    qd = q.as_dict()
    qterms = sorted(qd)
    scored = []
    for pos, (doc, vec) in enumerate(docs):
        dv = vec.as_dict()
        score, hit = 0.0, False
        for t in qterms:
            if t in dv:
                score += qd[t] * dv[t]
                hit = True
        if hit:
            scored.append((-score, pos, doc, score))
    scored.sort()
    return [ScoredHit(doc, score) for _, _, doc, score in scored[:k]]


def quantize_impacts(idx: InvertedIndex, bits: int = 8) -> InvertedIndex:
    """Copy of ``idx`` with weights mapped to integer impacts in ``[1, 2**bits - 1]``.

    Lossy; scores change scale and may tie. Not used by default.
    """
    levels = 2**bits - 1
    top = max((float(w.max()) for _, w in idx.postings.values()), default=0.0)
    if top <= 0:
        return InvertedIndex(idx.v, list(idx.doc_table), dict(idx.postings), idx.doc_lengths)
    postings = {
        t: (d.copy(), np.clip(np.rint(w.astype(np.float64) / top * levels), 1, levels).astype(np.float32))
        for t, (d, w) in idx.postings.items()
    }
    return InvertedIndex(idx.v, list(idx.doc_table), postings, idx.doc_lengths)


# --------------------------------------------------------------------------
# BM25
# --------------------------------------------------------------------------


def bm25_index(corpus: Iterable[tuple[str, str]], vocab: Vocabulary) -> InvertedIndex:
    """Raw term-frequency postings plus document lengths.

    Document length counts every normalized term, in vocabulary or not.
    """
    builder = IndexBuilder(vocab.v)
    lengths = []
    for doc, text in corpus:
        terms = normalize(text)
        lengths.append(float(len(terms)))
        tf = Counter(vocab.index[t] for t in terms if t in vocab.index)
        builder.add(doc, SparseVector.from_pairs(tf, vocab.v))
    if not lengths:
        raise ValueError("empty corpus")
    idx = builder.finish()
    idx.doc_lengths = np.array(lengths)
    return idx


def bm25_idf(n_docs: int, df: int) -> float:
    return math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))


def bm25_search(idx: InvertedIndex, query_terms: Iterable[int], k: int, k1: float = 1.2, b: float = 0.75) -> list[ScoredHit]:
    """Okapi BM25 over distinct query terms, same ordering contract as :func:`search`."""
    if k1 <= 0 or not 0.0 <= b <= 1.0:
        raise ValueError("need k1 > 0 and 0 <= b <= 1")
    if k < 1:
        raise ValueError("k must be >= 1")
    if idx.doc_lengths is None:
        raise ValueError("index has no document lengths; build it with bm25_index")
    N = idx.doc_count
    avgdl = idx.avgdl
    norm = k1 * (1.0 - b + b * idx.doc_lengths / avgdl) if avgdl > 0 else np.full(N, k1)
    acc = np.zeros(N)
    touched = np.zeros(N, dtype=bool)
    for t in sorted(set(query_terms)):
        plist = idx.postings.get(t)
        if plist is None:
            continue
        docs, tf = plist
        tf = tf.astype(np.float64)
        idf = bm25_idf(N, docs.size)
        acc[docs] += idf * tf * (k1 + 1.0) / (tf + norm[docs])
        touched[docs] = True
    cands = np.flatnonzero(touched)
    cands, scores = _top_k(cands, acc[cands], k)
    return [ScoredHit(idx.doc_table[d], float(s)) for d, s in zip(cands.tolist(), scores.tolist())]


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def _varint(n: int, out: bytearray) -> None:
    while n >= 0x80:
        out.append((n & 0x7F) | 0x80)
        n >>= 7
    out.append(n)


def _read_varint(data: bytes, off: int) -> tuple[int, int]:
    shift = result = 0
    while True:
        if off >= len(data):
            raise ValueError("bad index file: truncated varint")
        byte = data[off]
        off += 1
        result |= (byte & 0x7F) << shift
        if byte < 0x80:
            return result, off
        shift += 7


def save_index(idx: InvertedIndex, path) -> None:
    """Write ``idx`` in the little-endian SPIX format.

    magic, u32 version, u64 v, u64 doc_count, doc table (u32 length + UTF-8
    per id), u8 flags (bit 0: f64 doc lengths follow), u32 block count, then
    per term: u32 term id, u32 length, varint doc-id deltas, f32 weights.
    """
    out = bytearray(INDEX_MAGIC)
    out += struct.pack("<IQQ", INDEX_VERSION, idx.v, idx.doc_count)
    for doc in idx.doc_table:
        raw = doc.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
    has_lengths = idx.doc_lengths is not None
    out += struct.pack("<B", 1 if has_lengths else 0)
    if has_lengths:
        out += np.asarray(idx.doc_lengths, dtype="<f8").tobytes()
    out += struct.pack("<I", len(idx.postings))
    for t in sorted(idx.postings):
        docs, w = idx.postings[t]
        out += struct.pack("<II", t, docs.size)
        prev = 0
        for d in docs.tolist():
            _varint(d - prev, out)
            prev = d
        out += np.asarray(w, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_index(path) -> InvertedIndex:
    data = open(path, "rb").read()
    try:
        return _parse_index(data)
    except (struct.error, UnicodeDecodeError, IndexError, ValueError) as exc:
        if str(exc).startswith("bad index file"):
            raise
        raise ValueError(f"bad index file: {exc}") from exc


def _parse_index(data: bytes) -> InvertedIndex:
    if data[:4] != INDEX_MAGIC:
        raise ValueError("bad index file: magic")
    version, v, n_docs = struct.unpack_from("<IQQ", data, 4)
    if version != INDEX_VERSION:
        raise ValueError(f"bad index file: version {version}")
    off = 24
    table = []
    for _ in range(n_docs):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + n > len(data):
            raise ValueError("bad index file: truncated doc table")
        table.append(data[off : off + n].decode("utf-8"))
        off += n
    (flags,) = struct.unpack_from("<B", data, off)
    off += 1
    lengths = None
    if flags & 1:
        if off + 8 * n_docs > len(data):
            raise ValueError("bad index file: truncated lengths")
        lengths = np.frombuffer(data, dtype="<f8", count=n_docs, offset=off).astype(np.float64)
        off += 8 * n_docs
    (n_blocks,) = struct.unpack_from("<I", data, off)
    off += 4
    postings = {}
    for _ in range(n_blocks):
        t, n = struct.unpack_from("<II", data, off)
        off += 8
        docs = np.empty(n, dtype=np.int64)
        prev = 0
        for i in range(n):
            delta, off = _read_varint(data, off)
            prev += delta
            docs[i] = prev
        if off + 4 * n > len(data):
            raise ValueError("bad index file: truncated weights")
        w = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float32)
        off += 4 * n
        if t >= v or (n and docs[-1] >= n_docs):
            raise ValueError("bad index file: id out of range")
        postings[t] = (docs, w)
    if off != len(data):
        raise ValueError("bad index file: trailing bytes")
    return InvertedIndex(v, table, postings, lengths)
