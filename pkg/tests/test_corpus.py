import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddr.corpus import (
    CorpusError,
    Document,
    DomainSpec,
    Vocabulary,
    generate_synthetic_benchmark,
    jaccard,
    load_benchmark,
    load_corpus,
    load_qrels,
    load_queries,
    save_benchmark,
    teacher_score,
    token_set,
    tokenize,
)
from ddr.encoder import CLS_ID, SEP_ID, UNK_ID

SMALL = dict(num_docs=150, num_queries=40)


def _bench(overlap=0.3, seed=0, n_targets=2):
    src = DomainSpec("source", **SMALL)
    tgts = [DomainSpec(f"t{i}", overlap=overlap, **SMALL) for i in range(n_targets)]
    return generate_synthetic_benchmark(src, tgts, seed=seed, dev_queries=20)


# ---------------------------------------------------------------------- tokenizer


def test_tokenize_lookup():
    assert tokenize("a b a", {"a": 5, "b": 6}, 10).ids == (CLS_ID, 5, 6, 5, SEP_ID)


def test_tokenize_unknown_and_case():
    vocab = Vocabulary(["hello"])
    ids = tokenize("HELLO mystery", vocab, 10).ids
    assert ids == (CLS_ID, vocab.get("hello"), UNK_ID, SEP_ID)


def test_tokenize_truncates():
    seq = tokenize(" ".join(["x"] * 50), {"x": 9}, 8)
    assert len(seq.ids) == 8 and seq.ids[-1] == SEP_ID and seq.ids[0] == CLS_ID


def test_tokenize_empty_text():
    assert tokenize("", {}, 5).ids == (CLS_ID, SEP_ID)


def test_vocabulary_reserved_and_dense():
    v = Vocabulary(["b", "a", "b"])
    lst = v.to_list()
    assert lst[:5] == ["[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]"]
    assert [v.get(w) for w in lst] == list(range(len(lst)))
    assert Vocabulary.from_list(lst).to_list() == lst
    with pytest.raises(CorpusError):
        Vocabulary.from_list(["a", "b"])


# ---------------------------------------------------------------------- file formats


def test_load_corpus_line(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps({"doc_id": "d1", "text": "hello world"}) + "\n")
    assert load_corpus(p) == [Document("d1", "hello world")]


def test_load_corpus_errors(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"doc_id": "d1", "text": "x"}\nnot json\n')
    with pytest.raises(CorpusError, match=":2"):
        load_corpus(p)
    p.write_text('{"doc_id": "d1", "text": "x"}\n{"doc_id": "d1", "text": "y"}\n')
    with pytest.raises(CorpusError, match="duplicate"):
        load_corpus(p)
    p.write_text('{"doc_id": "d1", "text": ""}\n')
    with pytest.raises(CorpusError, match=":1"):
        load_corpus(p)


def test_load_queries(tmp_path):
    p = tmp_path / "q.tsv"
    p.write_text("q1\tfirst query\nq2\tsecond\n")
    assert [(q.query_id, q.text) for q in load_queries(p)] == [("q1", "first query"), ("q2", "second")]
    p.write_text("q1 no tab here\n")
    with pytest.raises(CorpusError, match=":1"):
        load_queries(p)
    p.write_text("q1\ta\nq1\tb\n")
    with pytest.raises(CorpusError):
        load_queries(p)


def test_load_qrels(tmp_path):
    p = tmp_path / "qrels"
    p.write_text("q1 0 d1 1\n")
    assert load_qrels(p) == {"q1": {"d1": 1}}
    with pytest.raises(CorpusError, match="d1"):
        load_qrels(p, doc_ids=["d2"])
    p.write_text("q1 0 d1\n")
    with pytest.raises(CorpusError, match=":1"):
        load_qrels(p)


# ---------------------------------------------------------------------- generator


def test_generation_is_reproducible():
    a, b = _bench(seed=4), _bench(seed=4)
    assert a.vocab.to_list() == b.vocab.to_list()
    for da, db in zip([a.source, *a.targets], [b.source, *b.targets]):
        assert da.docs == db.docs and da.queries == db.queries and da.qrels == db.qrels
    assert _bench(seed=5).source.docs != a.source.docs


def test_every_query_judged_and_resolvable():
    bench = _bench()
    for domain in [bench.source, bench.source_dev, *bench.targets]:
        ids = {d.doc_id for d in domain.docs}
        assert {q.query_id for q in domain.queries} == set(domain.qrels)
        for rels in domain.qrels.values():
            assert any(g > 0 for g in rels.values())
            assert set(rels) <= ids


def test_query_sets_disjoint():
    bench = _bench()
    sets = [{q.query_id for q in d.queries} for d in [bench.source, bench.source_dev, *bench.targets]]
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            assert not sets[i] & sets[j]


def test_full_overlap_shares_token_set():
    bench = _bench(overlap=1.0, n_targets=1)
    assert set(bench.targets[0].words) == set(bench.source.words)


def test_overlap_jaccard_measured():
    bench = _bench(overlap=0.2, n_targets=1)
    assert abs(jaccard(set(bench.source.words), set(bench.targets[0].words)) - 0.2) <= 0.05
    assert abs(jaccard(token_set(bench.source), token_set(bench.targets[0])) - 0.2) <= 0.05


def test_overlap_monotone():
    levels = [0.0, 0.2, 0.5, 0.8, 1.0]
    means = []
    for ov in levels:
        vals = [jaccard(token_set(b.source), token_set(b.targets[0])) for b in (_bench(ov, s, 1) for s in range(3))]
        means.append(sum(vals) / len(vals))
    assert all(x < y for x, y in zip(means, means[1:]))


def test_vocab_covers_all_text():
    bench = _bench()
    for domain in [bench.source, *bench.targets]:
        for text in [d.text for d in domain.docs] + [q.text for q in domain.queries]:
            assert UNK_ID not in tokenize(text, bench.vocab, 1000).ids


def test_teacher_is_pure_and_bounded():
    assert teacher_score("a b", "a c") == teacher_score("a b", "a c") == 0.5
    assert teacher_score("a", "a a a") == 1.0
    assert teacher_score("x", "a") == 0.0


def test_relevant_doc_scores_higher_with_teacher_on_average():
    bench = _bench()
    src = bench.source
    by_id = {d.doc_id: d for d in src.docs}
    rel, other = 0.0, 0.0
    for i, q in enumerate(src.queries):
        did = next(iter(src.qrels[q.query_id]))
        rel += teacher_score(q.text, by_id[did].text)
        other += teacher_score(q.text, src.docs[(i * 7) % len(src.docs)].text)
    assert rel > other


def test_spec_validation():
    with pytest.raises(CorpusError):
        DomainSpec("x", overlap=1.5)
    with pytest.raises(CorpusError):
        DomainSpec("x", num_docs=0)
    with pytest.raises(CorpusError):
        DomainSpec("x", doc_len=(5, 2))


def test_benchmark_round_trip(tmp_path):
    bench = _bench()
    save_benchmark(bench, tmp_path / "b")
    loaded = load_benchmark(tmp_path / "b")
    assert loaded.vocab.to_list() == bench.vocab.to_list()
    assert loaded.source.docs == bench.source.docs
    assert [t.queries for t in loaded.targets] == [t.queries for t in bench.targets]
    assert loaded.targets[1].qrels == bench.targets[1].qrels


@settings(max_examples=10, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 1000))
def test_declared_overlap_matches_jaccard(overlap, seed):
    src = DomainSpec("s", num_docs=5, num_queries=2)
    tgt = DomainSpec("t", overlap=overlap, num_docs=5, num_queries=2)
    bench = generate_synthetic_benchmark(src, [tgt], seed=seed, dev_queries=1)
    assert abs(jaccard(set(bench.source.words), set(bench.targets[0].words)) - overlap) < 0.01
