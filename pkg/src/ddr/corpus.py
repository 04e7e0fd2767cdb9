"""Documents, queries, qrels, the toy tokenizer, and the synthetic domain-shift benchmark."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .encoder import CLS_ID, MASK_ID, PAD_ID, SEP_ID, UNK_ID, TokenSequence

SPECIAL_TOKENS = {"[PAD]": PAD_ID, "[UNK]": UNK_ID, "[MASK]": MASK_ID, "[CLS]": CLS_ID, "[SEP]": SEP_ID}


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str

    def __post_init__(self):
        if not self.text:
            raise CorpusError(f"document {self.doc_id!r} has empty text")


@dataclass(frozen=True)
class Query:
    query_id: str
    text: str

    def __post_init__(self):
        if not self.text:
            raise CorpusError(f"query {self.query_id!r} has empty text")


Qrels = dict[str, dict[str, int]]


class Vocabulary:
    def __init__(self, words: Iterable[str] = ()):
        self.token_to_id: dict[str, int] = dict(SPECIAL_TOKENS)
        self.id_to_token: list[str] = sorted(SPECIAL_TOKENS, key=SPECIAL_TOKENS.get)
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        word = word.lower()
        if word not in self.token_to_id:
            self.token_to_id[word] = len(self.id_to_token)
            self.id_to_token.append(word)
        return self.token_to_id[word]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.token_to_id

    def get(self, word: str) -> int:
        if word in SPECIAL_TOKENS:
            return SPECIAL_TOKENS[word]
        return self.token_to_id.get(word.lower(), UNK_ID)

    @property
    def mask_id(self) -> int:
        return MASK_ID

    def to_list(self) -> list[str]:
        return list(self.id_to_token)

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> "Vocabulary":
        specials = sorted(SPECIAL_TOKENS, key=SPECIAL_TOKENS.get)
        if list(tokens[: len(specials)]) != specials:
            raise CorpusError("vocabulary file does not start with the reserved tokens")
        return cls(tokens[len(specials) :])


def tokenize(text: str, vocab: Vocabulary | Mapping[str, int], max_len: int) -> TokenSequence:
    """Lowercased whitespace split wrapped in [CLS] ... [SEP], cut to ``max_len``."""
    if max_len < 2:
        raise CorpusError("max_len must leave room for [CLS] and [SEP]")
    lookup = vocab.get if isinstance(vocab, Vocabulary) else (lambda w: vocab.get(w.lower(), UNK_ID))
    body = [lookup(w) for w in text.lower().split()][: max_len - 2]
    return TokenSequence((CLS_ID, *body, SEP_ID))


# --------------------------------------------------------------------------- file formats


def _check_unique(ids: Iterable[str], what: str) -> None:
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            raise CorpusError(f"duplicate {what} id {i!r}")
        seen.add(i)


def load_corpus(path: str | Path) -> list[Document]:
    docs = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                doc = Document(str(obj["doc_id"]), str(obj["text"]))
            except (json.JSONDecodeError, KeyError, TypeError, CorpusError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed corpus line ({exc})") from None
            if doc.doc_id in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate doc id {doc.doc_id!r}")
            seen.add(doc.doc_id)
            docs.append(doc)
    return docs


def save_corpus(docs: Sequence[Document], path: str | Path) -> None:
    _check_unique((d.doc_id for d in docs), "doc")
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps({"doc_id": d.doc_id, "text": d.text}, ensure_ascii=False) + "\n")


def load_queries(path: str | Path) -> list[Query]:
    queries = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise CorpusError(f"{path}:{lineno}: expected 'qid<TAB>text'")
            if parts[0] in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate query id {parts[0]!r}")
            seen.add(parts[0])
            queries.append(Query(parts[0], parts[1]))
    return queries


def save_queries(queries: Sequence[Query], path: str | Path) -> None:
    _check_unique((q.query_id for q in queries), "query")
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(f"{q.query_id}\t{q.text}\n")


def load_qrels(
    path: str | Path,
    doc_ids: Iterable[str] | None = None,
    query_ids: Iterable[str] | None = None,
) -> Qrels:
    """TREC qrels ``qid 0 docid grade``; optional id sets enable referential checks."""
    known_docs = set(doc_ids) if doc_ids is not None else None
    known_queries = set(query_ids) if query_ids is not None else None
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise CorpusError(f"{path}:{lineno}: expected 'qid 0 docid grade'")
            qid, _, did, grade = parts
            try:
                g = int(grade)
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: grade {grade!r} is not an integer") from None
            if g < 0:
                raise CorpusError(f"{path}:{lineno}: negative grade")
            if known_docs is not None and did not in known_docs:
                raise CorpusError(f"{path}:{lineno}: unknown doc id {did!r}")
            if known_queries is not None and qid not in known_queries:
                raise CorpusError(f"{path}:{lineno}: unknown query id {qid!r}")
            qrels.setdefault(qid, {})[did] = g
    return qrels


def save_qrels(qrels: Qrels, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in qrels:
            for did, grade in qrels[qid].items():
                fh.write(f"{qid} 0 {did} {grade}\n")


# --------------------------------------------------------------------------- synthetic benchmark


@dataclass(frozen=True)
class DomainSpec:
    """Generative recipe for one domain.

    Each domain owns a token set (a Zipf-weighted background vocabulary) and a
    set of topics. A document mixes words of one topic with background words;
    topic words come in pairs of interchangeable surface forms, so matching a
    query to its document partly depends on knowing the domain's word usage.
    """

    name: str
    vocab_size: int = 400
    overlap: float = 1.0
    zipf_exponent: float = 1.0
    num_topics: int = 12
    concepts_per_topic: int = 8
    topic_weight: float = 0.5
    doc_len: tuple[int, int] = (20, 36)
    num_docs: int = 800
    num_queries: int = 200
    query_len: tuple[int, int] = (3, 6)
    # Probability that a query mentions a concept by the surface form the document did not use.
    alternate_form_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise CorpusError("overlap must lie in [0, 1]")
        for name in ("vocab_size", "num_topics", "concepts_per_topic", "num_docs", "num_queries"):
            if getattr(self, name) < 1:
                raise CorpusError(f"{name} must be >= 1")
        if 2 * self.num_topics * self.concepts_per_topic > self.vocab_size - self.vocab_size // 4:
            raise CorpusError("topic vocabulary does not fit in the domain token set")
        lo, hi = self.doc_len
        if not 1 <= lo <= hi:
            raise CorpusError("bad doc_len range")
        lo, hi = self.query_len
        if not 1 <= lo <= hi:
            raise CorpusError("bad query_len range")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DomainSpec":
        data = dict(data)
        for key in ("doc_len", "query_len"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class DomainData:
    name: str
    words: list[str]
    docs: list[Document]
    queries: list[Query]
    qrels: Qrels


@dataclass
class Benchmark:
    vocab: Vocabulary
    source: DomainData
    source_dev: DomainData
    targets: list[DomainData]

    def domain(self, name: str) -> DomainData:
        for d in [self.source, self.source_dev, *self.targets]:
            if d.name == name:
                return d
        raise KeyError(name)


def teacher_score(query_text: str, doc_text: str) -> float:
    """Fraction of distinct query terms present in the document."""
    q = set(query_text.lower().split())
    if not q:
        return 0.0
    d = set(doc_text.lower().split())
    return len(q & d) / len(q)


def shared_count(size: int, overlap: float) -> int:
    """Number of shared tokens giving Jaccard ``overlap`` between two sets of ``size``."""
    return int(round(2 * size * overlap / (1 + overlap)))


class _DomainSampler:
    def __init__(self, spec: DomainSpec, words: list[str], rng: np.random.Generator):
        self.spec = spec
        self.words = words
        n = len(words)
        order = rng.permutation(n)
        ranks = np.empty(n, dtype=np.int64)
        ranks[order] = np.arange(n)
        weights = 1.0 / np.power(ranks + 1.0, spec.zipf_exponent)
        self.background = weights / weights.sum()
        # Topic vocabulary comes from the less frequent half of the domain words.
        rare = order[n // 4 :]
        need = spec.num_topics * spec.concepts_per_topic * 2
        picked = rng.choice(rare, size=need, replace=False)
        self.topics = picked.reshape(spec.num_topics, spec.concepts_per_topic, 2)

    def document(self, rng: np.random.Generator) -> tuple[int, list[int], list[int]]:
        """Returns (topic, token indices, concept index per token or -1)."""
        spec = self.spec
        topic = int(rng.integers(spec.num_topics))
        length = int(rng.integers(spec.doc_len[0], spec.doc_len[1] + 1))
        # Each document leans on a handful of the topic's concepts.
        focus = rng.choice(spec.concepts_per_topic, size=max(2, spec.concepts_per_topic // 3), replace=False)
        tokens, concepts = [], []
        for _ in range(length):
            if rng.random() < spec.topic_weight:
                c = int(rng.choice(focus))
                form = int(rng.integers(2))
                tokens.append(int(self.topics[topic, c, form]))
                concepts.append(c)
            else:
                tokens.append(int(rng.choice(len(self.words), p=self.background)))
                concepts.append(-1)
        return topic, tokens, concepts

    def query(self, rng: np.random.Generator, topic: int, tokens: list[int], concepts: list[int]) -> list[int]:
        spec = self.spec
        length = int(rng.integers(spec.query_len[0], spec.query_len[1] + 1))
        distinct = sorted(set(zip(tokens, concepts)))
        salience = np.array([-math.log(self.background[t]) for t, _ in distinct])
        salience = salience + np.array([2.0 if c >= 0 else 0.0 for _, c in distinct])
        probs = np.exp(salience - salience.max())
        probs /= probs.sum()
        length = min(length, len(distinct))
        chosen = rng.choice(len(distinct), size=length, replace=False, p=probs)
        out = []
        for i in sorted(chosen):
            tok, c = distinct[i]
            if c >= 0 and rng.random() < spec.alternate_form_prob:
                pair = self.topics[topic, c]
                tok = int(pair[1] if pair[0] == tok else pair[0])
            out.append(tok)
        return out


def _make_domain(
    spec: DomainSpec,
    words: list[str],
    rng: np.random.Generator,
    id_prefix: str,
) -> tuple[DomainData, _DomainSampler]:
    sampler = _DomainSampler(spec, words, rng)
    docs, meta = [], []
    for i in range(spec.num_docs):
        topic, toks, concepts = sampler.document(rng)
        docs.append(Document(f"{id_prefix}-d{i}", " ".join(words[t] for t in toks)))
        meta.append((topic, toks, concepts))
    queries, qrels = [], {}
    rel_docs = rng.choice(spec.num_docs, size=spec.num_queries, replace=spec.num_queries > spec.num_docs)
    for j, di in enumerate(rel_docs):
        topic, toks, concepts = meta[int(di)]
        qtoks = sampler.query(rng, topic, toks, concepts)
        qid = f"{id_prefix}-q{j}"
        queries.append(Query(qid, " ".join(words[t] for t in qtoks)))
        qrels[qid] = {docs[int(di)].doc_id: 1}
    data = DomainData(spec.name, words, docs, queries, qrels)
    return data, sampler


def generate_synthetic_benchmark(
    source_spec: DomainSpec,
    target_specs: Sequence[DomainSpec],
    seed: int = 0,
    dev_queries: int = 100,
) -> Benchmark:
    """Sample a labelled source domain plus unlabelled target domains.

    Target domain ``i`` shares a Jaccard fraction ``overlap`` of its token set
    with the source; the remainder is fresh vocabulary. Target qrels exist for
    evaluation only.
    """
    rng = np.random.default_rng(seed)
    n_src = source_spec.vocab_size
    source_words = [f"s{i}" for i in range(n_src)]
    target_words = []
    for t, spec in enumerate(target_specs):
        if spec.vocab_size != n_src:
            raise CorpusError("target domains must have the same token-set size as the source")
        k = shared_count(n_src, spec.overlap)
        shared = sorted(rng.choice(n_src, size=k, replace=False).tolist())
        fresh = [f"t{t}x{i}" for i in range(n_src - k)]
        target_words.append([source_words[i] for i in shared] + fresh)

    vocab = Vocabulary(source_words)
    for ws in target_words:
        for w in ws:
            vocab.add(w)

    src_spec = DomainSpec.from_dict({**source_spec.to_dict(), "num_queries": source_spec.num_queries + dev_queries})
    source, _ = _make_domain(src_spec, source_words, rng, "src")
    dev_q = source.queries[source_spec.num_queries :]
    source.queries = source.queries[: source_spec.num_queries]
    dev_qrels = {q.query_id: source.qrels.pop(q.query_id) for q in dev_q}
    source_dev = DomainData(source.name + "-dev", source_words, source.docs, dev_q, dev_qrels)

    targets = []
    for t, (spec, ws) in enumerate(zip(target_specs, target_words)):
        data, _ = _make_domain(spec, ws, rng, f"tgt{t}")
        targets.append(data)
    return Benchmark(vocab, source, source_dev, targets)


def token_set(domain: DomainData) -> set[str]:
    out: set[str] = set()
    for d in domain.docs:
        out.update(d.text.split())
    return out


def jaccard(a: set, b: set) -> float:
    return len(a & b) / len(a | b) if a or b else 1.0


# --------------------------------------------------------------------------- bundle persistence


def save_benchmark(bench: Benchmark, out_dir: str | Path) -> Path:
    """Layout: ``vocab.txt``, ``source/``, ``source_dev/``, ``targets/<name>/``; each domain
    directory holds ``corpus.jsonl``, ``queries.tsv`` and ``qrels.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "vocab.txt").write_text("\n".join(bench.vocab.to_list()) + "\n", encoding="utf-8")
    dirs = [("source", bench.source), ("source_dev", bench.source_dev)]
    dirs += [(f"targets/{t.name}", t) for t in bench.targets]
    for rel, domain in dirs:
        d = out / rel
        d.mkdir(parents=True, exist_ok=True)
        save_corpus(domain.docs, d / "corpus.jsonl")
        save_queries(domain.queries, d / "queries.tsv")
        save_qrels(domain.qrels, d / "qrels.txt")
    return out


def load_domain(path: str | Path, name: str | None = None) -> DomainData:
    path = Path(path)
    docs = load_corpus(path / "corpus.jsonl")
    queries = load_queries(path / "queries.tsv")
    qrels = load_qrels(path / "qrels.txt", (d.doc_id for d in docs), (q.query_id for q in queries))
    words = sorted({w for d in docs for w in d.text.lower().split()})
    return DomainData(name or path.name, words, docs, queries, qrels)


def load_benchmark(path: str | Path) -> Benchmark:
    path = Path(path)
    vocab = Vocabulary.from_list((path / "vocab.txt").read_text(encoding="utf-8").split())
    source = load_domain(path / "source", "source")
    dev = load_domain(path / "source_dev", "source-dev")
    targets = [load_domain(p) for p in sorted((path / "targets").iterdir()) if p.is_dir()]
    return Benchmark(vocab, source, dev, targets)
