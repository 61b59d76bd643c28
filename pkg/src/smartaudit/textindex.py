"""Retrieval substrate: tokenizer, BM25 inverted index, exhaustive cosine
vector index, reciprocal rank fusion, and the hybrid search built on them.

Every ranked result is ordered (score desc, doc_id asc) so that runs are
reproducible and snapshot tests are stable. Corpora here are thousands of
documents at most, so the vector side is an exact exhaustive scan.
"""

from __future__ import annotations

import base64
import math
import re
from typing import Iterable, Optional, Sequence

import numpy as np

# Unicode alphanumerics, underscore excluded.
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

STOPWORDS = frozenset(
    "a an and are as at be by for from has have in is it its of on or "
    "that the this to was were will with".split()
)

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_RRF_K0 = 60
MIN_CANDIDATE_DEPTH = 50

RankedList = list[tuple[str, float]]


def tokenize(text: str, drop_stopwords: bool = False) -> list[str]:
    """Lowercase and split on every non-alphanumeric code point."""
    tokens = _TOKEN_RE.findall(text.lower())
    if drop_stopwords:
        tokens = [t for t in tokens if t not in STOPWORDS]
    return tokens


def rank_sorted(entries: Iterable[tuple[str, float]], k: Optional[int] = None) -> RankedList:
    """Order (score desc, doc_id asc) and truncate to k."""
    ordered = sorted(entries, key=lambda e: (-e[1], e[0]))
    return ordered if k is None else ordered[:k]


class Bm25Index:
    """Inverted index with BM25 scoring.

    idf(t) = ln((N - df + 0.5) / (df + 0.5) + 1), which keeps scores >= 0.
    Deletions are tombstoned; `rebuild()` compacts the structures.
    """

    def __init__(self, k1: float = DEFAULT_K1, b: float = DEFAULT_B):
        self.k1 = k1
        self.b = b
        self.postings: dict[str, list[tuple[str, int]]] = {}
        self.doc_lengths: dict[str, int] = {}
        self._total_length = 0
        self._tombstones: set[str] = set()

    @property
    def doc_count(self) -> int:
        return len(self.doc_lengths) - len(self._tombstones)

    @property
    def avg_doc_length(self) -> float:
        n = self.doc_count
        if n == 0:
            return 0.0
        live_total = self._total_length - sum(self.doc_lengths[d] for d in self._tombstones)
        return live_total / n

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.doc_lengths and doc_id not in self._tombstones

    def doc_ids(self) -> list[str]:
        return [d for d in self.doc_lengths if d not in self._tombstones]

    def add(self, doc_id: str, text: str) -> None:
        if doc_id in self.doc_lengths:
            raise ValueError(f"doc already indexed: {doc_id}")
        tokens = tokenize(text)
        counts: dict[str, int] = {}
        for t in tokens:
            counts[t] = counts.get(t, 0) + 1
        for term, tf in counts.items():
            # copy-on-extend keeps posting lists safe to share across clones
            self.postings[term] = self.postings.get(term, []) + [(doc_id, tf)]
        self.doc_lengths[doc_id] = len(tokens)
        self._total_length += len(tokens)

    def clone(self) -> "Bm25Index":
        """Cheap snapshot: shares posting lists, which are never mutated."""
        twin = Bm25Index(self.k1, self.b)
        twin.postings = dict(self.postings)
        twin.doc_lengths = dict(self.doc_lengths)
        twin._total_length = self._total_length
        twin._tombstones = set(self._tombstones)
        return twin

    def to_payload(self) -> dict:
        if self._tombstones:
            self.rebuild()
        return {
            "k1": self.k1,
            "b": self.b,
            "postings": {t: [[d, tf] for d, tf in entries]
                         for t, entries in self.postings.items()},
            "doc_lengths": self.doc_lengths,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "Bm25Index":
        idx = cls(payload["k1"], payload["b"])
        idx.postings = {t: [(d, int(tf)) for d, tf in entries]
                        for t, entries in payload["postings"].items()}
        idx.doc_lengths = {d: int(n) for d, n in payload["doc_lengths"].items()}
        idx._total_length = sum(idx.doc_lengths.values())
        return idx

    def remove(self, doc_id: str) -> None:
        if doc_id not in self:
            raise KeyError(doc_id)
        self._tombstones.add(doc_id)

    def rebuild(self) -> None:
        """Compact away tombstoned docs."""
        for term in list(self.postings):
            kept = [(d, tf) for d, tf in self.postings[term] if d not in self._tombstones]
            if kept:
                self.postings[term] = kept
            else:
                del self.postings[term]
        for doc_id in self._tombstones:
            self._total_length -= self.doc_lengths.pop(doc_id)
        self._tombstones.clear()

    def idf(self, term: str) -> float:
        entries = self.postings.get(term, ())
        df = sum(1 for d, _ in entries if d not in self._tombstones)
        if df == 0:
            return 0.0
        n = self.doc_count
        return math.log((n - df + 0.5) / (df + 0.5) + 1.0)

    def _term_score(self, term: str, tf: int, doc_len: int, avg_len: float) -> float:
        if tf == 0:
            return 0.0
        norm = self.k1 * (1.0 - self.b + self.b * doc_len / avg_len) if avg_len > 0 else self.k1
        return self.idf(term) * tf * (self.k1 + 1.0) / (tf + norm)

    def score(self, query: Sequence[str], doc_id: str) -> float:
        """BM25 score of one document; duplicate query terms count once."""
        if doc_id not in self:
            raise KeyError(f"unknown doc_id: {doc_id}")
        avg_len = self.avg_doc_length
        doc_len = self.doc_lengths[doc_id]
        total = 0.0
        for term in dict.fromkeys(query):
            tf = 0
            for d, f in self.postings.get(term, ()):
                if d == doc_id:
                    tf = f
                    break
            total += self._term_score(term, tf, doc_len, avg_len)
        return total

    def search(self, query: Sequence[str], k: int,
               allowed: Optional[set[str]] = None) -> RankedList:
        """Top-k docs with positive score, ordered (score desc, doc_id asc).

        `allowed` restricts the candidate set; corpus statistics (idf,
        average length) always come from the full index, so filtering
        commutes with scoring.
        """
        if k <= 0 or self.doc_count == 0:
            return []
        avg_len = self.avg_doc_length
        scores: dict[str, float] = {}
        for term in dict.fromkeys(query):
            idf = self.idf(term)
            if idf == 0.0:
                continue
            for doc_id, tf in self.postings.get(term, ()):
                if doc_id in self._tombstones:
                    continue
                if allowed is not None and doc_id not in allowed:
                    continue
                doc_len = self.doc_lengths[doc_id]
                norm = self.k1 * (1.0 - self.b + self.b * doc_len / avg_len)
                scores[doc_id] = scores.get(doc_id, 0.0) + idf * tf * (self.k1 + 1.0) / (tf + norm)
        positive = [(d, s) for d, s in scores.items() if s > 0.0]
        return rank_sorted(positive, k)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine undefined for zero vector")
    return float(np.dot(u, v) / (nu * nv))


class VectorIndex:
    """Exhaustive-scan cosine index over unit-norm vectors of fixed dimension."""

    __slots__ = ("dimension", "entries")

    def __init__(self, dimension: int):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.entries: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.entries

    def add(self, doc_id: str, vector: np.ndarray) -> None:
        vec = np.asarray(vector, dtype=np.float64)
        if vec.shape != (self.dimension,):
            raise ValueError(f"dimension mismatch: expected {self.dimension}, got {vec.shape}")
        norm = float(np.linalg.norm(vec))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"vector for {doc_id} is not unit-norm (|v|={norm})")
        self.entries[doc_id] = vec

    def remove(self, doc_id: str) -> None:
        del self.entries[doc_id]

    def get(self, doc_id: str) -> Optional[np.ndarray]:
        return self.entries.get(doc_id)

    def clone(self) -> "VectorIndex":
        twin = VectorIndex(self.dimension)
        twin.entries = dict(self.entries)
        return twin

    def to_payload(self) -> dict:
        return {
            "dimension": self.dimension,
            "vectors": {d: base64.b64encode(v.astype("<f8").tobytes()).decode("ascii")
                        for d, v in self.entries.items()},
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "VectorIndex":
        idx = cls(int(payload["dimension"]))
        for doc_id, blob in payload["vectors"].items():
            vec = np.frombuffer(base64.b64decode(blob), dtype="<f8").astype(np.float64)
            idx.entries[doc_id] = vec
        return idx

    def search(self, query_vec: np.ndarray, k: int,
               allowed: Optional[set[str]] = None) -> RankedList:
        """Top-k by cosine among docs with positive similarity.

        `allowed` restricts the candidate set (pre-ranking filter).
        """
        q = np.asarray(query_vec, dtype=np.float64)
        if q.shape != (self.dimension,):
            raise ValueError(f"dimension mismatch: expected {self.dimension}, got {q.shape}")
        if k <= 0 or not self.entries:
            return []
        scored = []
        for doc_id, vec in self.entries.items():
            if allowed is not None and doc_id not in allowed:
                continue
            sim = float(np.dot(vec, q))
            if sim > 0.0:
                scored.append((doc_id, sim))
        return rank_sorted(scored, k)


def rrf_fuse(lists: Sequence[RankedList], k0: int = DEFAULT_RRF_K0,
             k: Optional[int] = None) -> RankedList:
    """Reciprocal rank fusion: score(d) = sum over lists of 1/(k0 + rank(d)).

    Ranks start at 1; a doc absent from a list contributes nothing for it.
    """
    if len(lists) < 2:
        raise ValueError("rrf_fuse needs at least two ranked lists")
    fused: dict[str, float] = {}
    for ranked in lists:
        for rank, (doc_id, _score) in enumerate(ranked, start=1):
            fused[doc_id] = fused.get(doc_id, 0.0) + 1.0 / (k0 + rank)
    return rank_sorted(fused.items(), k)


def candidate_depth(k: int) -> int:
    return max(4 * k, MIN_CANDIDATE_DEPTH)


def hybrid_search(bm25: Bm25Index, vec: VectorIndex, query_text: str,
                  query_vec: np.ndarray, k: int, k0: int = DEFAULT_RRF_K0) -> RankedList:
    """Fuse the lexical and semantic channels with RRF.

    Both channels are fetched to depth max(4k, 50) so fusion error stays
    bounded at small k, then the fused list is truncated to k.
    """
    if k <= 0:
        return []
    depth = candidate_depth(k)
    lexical = bm25.search(tokenize(query_text), depth)
    semantic = vec.search(query_vec, depth)
    return rrf_fuse([lexical, semantic], k0=k0, k=k)
