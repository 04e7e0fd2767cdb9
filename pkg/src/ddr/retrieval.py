"""Exact dense search, a BM25 baseline, run files and ranking metrics."""

from __future__ import annotations

import hashlib
import math
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .corpus import Document, Qrels, Vocabulary, tokenize
from .encoder import encode_many, normalize_similarity, split_model

RunFile = dict[str, list[tuple[str, float]]]


class RetrievalError(ValueError):
    pass


def model_checksum(model) -> str:
    backbone, rem = split_model(model)
    h = hashlib.sha256()
    for ps in [backbone.params] + ([rem.params] if rem is not None else []):
        for name, t in ps.items():
            h.update(name.encode())
            h.update(t.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


def corpus_checksum(docs: Sequence[Document]) -> str:
    h = hashlib.sha256()
    for d in docs:
        h.update(d.doc_id.encode())
        h.update(b"\0")
        h.update(d.text.encode())
        h.update(b"\n")
    return h.hexdigest()


@dataclass
class EmbeddingIndex:
    doc_ids: list[str]
    embeddings: torch.Tensor
    similarity_kind: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.embeddings.dim() != 2 or self.embeddings.shape[0] != len(self.doc_ids):
            raise RetrievalError("embedding rows do not match doc ids")
        if not torch.isfinite(self.embeddings).all():
            raise RetrievalError("index contains non-finite embeddings")
        self.similarity_kind = normalize_similarity(self.similarity_kind)
        # Rank of each doc id in ascending string order; used to break score ties.
        order = sorted(range(len(self.doc_ids)), key=self.doc_ids.__getitem__)
        self._id_rank = np.empty(len(order), dtype=np.int64)
        self._id_rank[order] = np.arange(len(order))

    def __len__(self) -> int:
        return len(self.doc_ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def build_index(
    model,
    docs: Sequence[Document],
    vocab: Vocabulary,
    similarity_kind: str | None = None,
    batch_size: int = 64,
    workers: int = 1,
) -> EmbeddingIndex:
    """Encode every document; chunks may be encoded on several threads, rows keep corpus order."""
    if not docs:
        raise RetrievalError("cannot index an empty corpus")
    backbone, _ = split_model(model)
    cfg = backbone.config
    if len(vocab) > cfg.vocab_size:
        raise RetrievalError(f"vocabulary of {len(vocab)} tokens exceeds model vocab_size {cfg.vocab_size}")
    seqs = [tokenize(d.text, vocab, cfg.max_len) for d in docs]
    chunks = [seqs[i : i + batch_size] for i in range(0, len(seqs), batch_size)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: encode_many(model, c, batch_size), chunks))
    else:
        parts = [encode_many(model, c, batch_size) for c in chunks]
    kind = similarity_kind or cfg.similarity_kind
    meta = {"model_checksum": model_checksum(model), "corpus_checksum": corpus_checksum(docs)}
    return EmbeddingIndex([d.doc_id for d in docs], torch.cat(parts), kind, meta)


def _rank(scores: np.ndarray, id_rank: np.ndarray, k: int) -> np.ndarray:
    """Indices of the top ``k`` scores; ties go to the smaller doc id."""
    return np.lexsort((id_rank, -scores))[:k]


def _scores(index: EmbeddingIndex, queries: torch.Tensor) -> np.ndarray:
    if queries.shape[-1] != index.dim:
        raise RetrievalError(f"query dim {queries.shape[-1]} does not match index dim {index.dim}")
    q = queries.to(index.embeddings.dtype)
    docs = index.embeddings
    if index.similarity_kind == "cosine":
        qn, dn = q.norm(dim=-1, keepdim=True), docs.norm(dim=-1, keepdim=True)
        if (qn == 0).any() or (dn == 0).any():
            raise RetrievalError("cosine similarity is undefined for a zero vector")
        q, docs = q / qn, docs / dn
    return (q @ docs.T).numpy()


def search(index: EmbeddingIndex, query: torch.Tensor, k: int) -> list[tuple[str, float]]:
    """Exact top-``k`` by similarity; returns every document when ``k`` exceeds the corpus."""
    if k < 1:
        raise RetrievalError("k must be >= 1")
    query = torch.as_tensor(query)
    scores = _scores(index, query.reshape(1, -1))[0]
    top = _rank(scores, index._id_rank, k)
    return [(index.doc_ids[i], float(scores[i])) for i in top]


def search_many(index: EmbeddingIndex, query_ids: Sequence[str], queries: torch.Tensor, k: int) -> RunFile:
    """Row-by-row so each query's scores match :func:`search` bitwise."""
    if len(query_ids) != queries.shape[0]:
        raise RetrievalError("query ids and query embeddings differ in length")
    return {qid: search(index, queries[row], k) for row, qid in enumerate(query_ids)}


# --------------------------------------------------------------------------- BM25


class BM25Index:
    """Okapi BM25 over whitespace tokens with idf = ln(1 + (N - df + 0.5) / (df + 0.5))."""

    def __init__(self, docs: Sequence[Document], k1: float = 0.9, b: float = 0.4):
        if not docs:
            raise RetrievalError("cannot index an empty corpus")
        self.k1, self.b = k1, b
        self.doc_ids = [d.doc_id for d in docs]
        order = sorted(range(len(docs)), key=self.doc_ids.__getitem__)
        self._id_rank = np.empty(len(order), dtype=np.int64)
        self._id_rank[order] = np.arange(len(order))
        self.doc_len = np.array([len(d.text.lower().split()) for d in docs], dtype=np.float64)
        self.avgdl = float(self.doc_len.mean()) if self.doc_len.sum() else 1.0
        postings: dict[str, list[tuple[int, int]]] = defaultdict(list)
        for i, d in enumerate(docs):
            for term, tf in Counter(d.text.lower().split()).items():
                postings[term].append((i, tf))
        self.postings = {
            t: (np.array([p[0] for p in ps]), np.array([p[1] for p in ps], dtype=np.float64))
            for t, ps in postings.items()
        }

    def idf(self, term: str) -> float:
        n = len(self.doc_ids)
        df = len(self.postings[term][0]) if term in self.postings else 0
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def scores(self, query_tokens: Iterable[str]) -> np.ndarray:
        out = np.zeros(len(self.doc_ids))
        norm = self.k1 * (1.0 - self.b + self.b * self.doc_len / self.avgdl)
        for term in query_tokens:
            term = term.lower()
            if term not in self.postings:
                continue
            idx, tf = self.postings[term]
            out[idx] += self.idf(term) * tf * (self.k1 + 1.0) / (tf + norm[idx])
        return out

    def search(self, query_tokens: Iterable[str], k: int) -> list[tuple[str, float]]:
        if k < 1:
            raise RetrievalError("k must be >= 1")
        scores = self.scores(query_tokens)
        return [(self.doc_ids[i], float(scores[i])) for i in _rank(scores, self._id_rank, k)]


def bm25_search(
    corpus: Sequence[Document] | BM25Index,
    query_tokens: Iterable[str],
    k: int,
    k1: float = 0.9,
    b: float = 0.4,
) -> list[tuple[str, float]]:
    index = corpus if isinstance(corpus, BM25Index) else BM25Index(corpus, k1, b)
    return index.search(query_tokens, k)


# --------------------------------------------------------------------------- metrics


def _ranked(entries: Sequence[tuple[str, float]]) -> list[str]:
    return [d for d, _ in sorted(entries, key=lambda e: (-e[1], e[0]))]


def _judged(qrels: Qrels) -> dict[str, dict[str, int]]:
    return {q: rels for q, rels in qrels.items() if any(g > 0 for g in rels.values())}


def ndcg_per_query(run: RunFile, qrels: Qrels, k: int = 10) -> dict[str, float]:
    if k < 1:
        raise RetrievalError("k must be >= 1")
    out = {}
    for qid, rels in _judged(qrels).items():
        ranked = _ranked(run.get(qid, []))[:k]
        dcg = sum(rels.get(d, 0) / math.log2(i + 2) for i, d in enumerate(ranked))
        ideal = sorted((g for g in rels.values() if g > 0), reverse=True)[:k]
        idcg = sum(g / math.log2(i + 2) for i, g in enumerate(ideal))
        out[qid] = dcg / idcg
    return out


def recall_per_query(run: RunFile, qrels: Qrels, k: int = 100) -> dict[str, float]:
    if k < 1:
        raise RetrievalError("k must be >= 1")
    out = {}
    for qid, rels in _judged(qrels).items():
        relevant = {d for d, g in rels.items() if g > 0}
        top = set(_ranked(run.get(qid, []))[:k])
        out[qid] = len(relevant & top) / len(relevant)
    return out


def _mean(values: Mapping[str, float]) -> float:
    return sum(values.values()) / len(values) if values else 0.0


def ndcg_at_k(run: RunFile, qrels: Qrels, k: int = 10) -> float:
    """Mean linear-gain NDCG@k over queries with at least one relevant document.

    Judged queries absent from the run score zero.
    """
    return _mean(ndcg_per_query(run, qrels, k))


def recall_at_k(run: RunFile, qrels: Qrels, k: int = 100) -> float:
    return _mean(recall_per_query(run, qrels, k))


# --------------------------------------------------------------------------- run files


def write_run(run: RunFile, path: str | Path, tag: str = "ddr") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, entries in run.items():
            for rank, (did, score) in enumerate(entries, 1):
                fh.write(f"{qid} Q0 {did} {rank} {score:.6f} {tag}\n")


def read_run(path: str | Path) -> RunFile:
    run: RunFile = {}
    seen: dict[str, set[str]] = defaultdict(set)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise RetrievalError(f"{path}:{lineno}: expected 'qid Q0 docid rank score tag'")
            qid, _, did, _, score, _ = parts
            if did in seen[qid]:
                raise RetrievalError(f"{path}:{lineno}: duplicate doc {did!r} for query {qid!r}")
            seen[qid].add(did)
            run.setdefault(qid, []).append((did, float(score)))
    return run
