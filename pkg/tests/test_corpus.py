"""Corpus generator, chunker, and retriever tests. Retrieval ranking is
checked against a Counter-based cosine oracle written independently of the
index implementation."""

import math
from collections import Counter

import pytest

from acc.corpus import (Corpus, CorpusConfig, Document, QAInstance,
                        RetrievalIndex, chunk, generate_corpus, load_corpus,
                        parse_pairs, retrieve_topk, save_corpus)
from acc.errors import ConfigError, DataError, UsageError

SMALL = CorpusConfig(n_docs=60, pairs_per_doc=4, doc_len=32, key_alphabet=40,
                     value_alphabet=20, n_instances=120)


def naive_ranking(query, docs):
    """Independent cosine ranking: Counter arithmetic, ties by doc_id."""
    qc = Counter(query)
    qn = math.sqrt(sum(v * v for v in qc.values()))
    scored = []
    for d in docs:
        dc = Counter(d.tokens)
        dot = sum(qc[t] * dc[t] for t in qc)
        dn = math.sqrt(sum(v * v for v in dc.values()))
        scored.append((-dot / (dn * qn), d.doc_id))
    scored.sort()
    return [doc_id for _, doc_id in scored]


# ----------------------------------------------------------- generation

def test_every_answer_recoverable_by_scan():
    corpus = generate_corpus(SMALL, seed=11)
    by_id = corpus.docs_by_id()
    for inst in corpus.instances:
        pairs = parse_pairs(by_id[inst.gold_docs[0]])
        hits = [v for kkey, v in pairs if kkey == inst.query]
        assert len(hits) == 1
        assert hits[0] == inst.answer


def test_same_seed_bitwise_identical():
    a = generate_corpus(SMALL, seed=3)
    b = generate_corpus(SMALL, seed=3)
    assert a == b


def test_different_seed_differs():
    a = generate_corpus(SMALL, seed=3)
    b = generate_corpus(SMALL, seed=4)
    assert a.documents != b.documents


def test_single_pair_docs_are_all_easy():
    cfg = CorpusConfig(n_docs=20, pairs_per_doc=1, doc_len=8, key_alphabet=30,
                       value_alphabet=10, n_instances=40)
    corpus = generate_corpus(cfg, seed=5)
    assert all(i.difficulty.pair_position == 0 for i in corpus.instances)
    assert all(i.difficulty.label == "easy" for i in corpus.instances)


def test_document_lengths_and_alphabet():
    corpus = generate_corpus(SMALL, seed=7)
    for d in corpus.documents:
        assert len(d.tokens) == SMALL.doc_len
        assert all(0 <= t < SMALL.token_limit for t in d.tokens)


def test_doc_identities_unique():
    corpus = generate_corpus(SMALL, seed=9)
    idents = {parse_pairs(d)[0][0][:2] for d in corpus.documents}
    assert len(idents) == SMALL.n_docs


def test_difficulty_mix_present():
    corpus = generate_corpus(SMALL, seed=1)
    labels = {i.difficulty.label for i in corpus.instances}
    assert labels == {"easy", "hard"}


def test_splits_partition_and_dev_membership():
    corpus = generate_corpus(SMALL, seed=2)
    assert {i.split for i in corpus.instances} <= {
        "train", "dev-seen", "dev-unseen", "test"}
    for inst in corpus.split("dev-seen"):
        assert inst.gold_docs[0] in corpus.pretrain_doc_ids
    for inst in corpus.split("dev-unseen"):
        assert inst.gold_docs[0] not in corpus.pretrain_doc_ids
    dev = corpus.split("dev-seen", "dev-unseen")
    assert len(dev) == len(corpus.split("dev-seen")) + len(corpus.split("dev-unseen"))


def test_train_instances_use_pretraining_docs_only():
    corpus = generate_corpus(SMALL, seed=2)
    for inst in corpus.split("train"):
        assert inst.gold_docs[0] in corpus.pretrain_doc_ids


def test_infeasible_configs_rejected():
    with pytest.raises(ConfigError):
        CorpusConfig(pairs_per_doc=8, doc_len=32)  # pairs do not fit
    with pytest.raises(ConfigError):
        CorpusConfig(key_alphabet=6, pairs_per_doc=8)  # slots not unique
    with pytest.raises(ConfigError):
        CorpusConfig(n_docs=5000, key_alphabet=40)  # identities not unique
    with pytest.raises(ConfigError):
        CorpusConfig(key_alphabet=150, value_alphabet=64)  # alphabet overflow
    with pytest.raises(ConfigError):
        CorpusConfig(doc_len=256)


def test_document_invariant_enforced():
    with pytest.raises(DataError):
        Document(0, ())
    with pytest.raises(DataError):
        Document(0, tuple(range(129)))


# ----------------------------------------------------------- chunking

def test_chunk_exact_blocks():
    docs = chunk(range(256), block=128)
    assert [len(d.tokens) for d in docs] == [128, 128]


def test_chunk_short_tail_kept():
    docs = chunk(range(130), block=128)
    assert [len(d.tokens) for d in docs] == [128, 2]


def test_chunk_partition_property():
    stream = list(range(300))
    docs = chunk(stream, block=64)
    rebuilt = [t for d in docs for t in d.tokens]
    assert rebuilt == stream


def test_chunk_block_validation():
    with pytest.raises(UsageError):
        chunk(range(10), block=0)


# ----------------------------------------------------------- retrieval

def test_unique_key_doc_ranked_first_vs_oracle():
    corpus = generate_corpus(SMALL, seed=13)
    index = RetrievalIndex(corpus.documents, vocab_size=SMALL.token_limit)
    for inst in corpus.instances[:40]:
        got = retrieve_topk(inst.query, index, 5)
        want = naive_ranking(inst.query, corpus.documents)[:5]
        assert got == want
        assert got[0] == inst.gold_docs[0]


def test_topk_clamps_to_corpus_size():
    docs = [Document(i, (10 + i, 11)) for i in range(4)]
    index = RetrievalIndex(docs, vocab_size=32)
    assert len(retrieve_topk([10], index, 99)) == 4


def test_tie_breaks_by_ascending_doc_id():
    docs = [Document(5, (10, 11)), Document(3, (10, 11)), Document(9, (12, 13))]
    index = RetrievalIndex(docs, vocab_size=32)
    assert retrieve_topk([10, 11], index, 3) == [3, 5, 9]


def test_retrieval_validation_errors():
    with pytest.raises(DataError):
        RetrievalIndex([], vocab_size=32)
    docs = [Document(0, (10,))]
    index = RetrievalIndex(docs, vocab_size=32)
    with pytest.raises(UsageError):
        retrieve_topk([10], index, 0)
    with pytest.raises(UsageError):
        retrieve_topk([], index, 1)


def test_recall_at_5_on_default_config():
    corpus = generate_corpus(CorpusConfig(), seed=1)
    cfg = corpus.config
    index = RetrievalIndex(corpus.documents, vocab_size=cfg.token_limit)
    hits = sum(inst.gold_docs[0] in retrieve_topk(inst.query, index, 5)
               for inst in corpus.instances)
    assert hits / len(corpus.instances) >= 0.95
    # spot-check the fast path against the independent oracle at full scale
    for inst in corpus.instances[:10]:
        assert retrieve_topk(inst.query, index, 5) == \
            naive_ranking(inst.query, corpus.documents)[:5]


# ----------------------------------------------------------- files

def test_save_load_roundtrip(tmp_path):
    corpus = generate_corpus(SMALL, seed=21)
    save_corpus(tmp_path / "c", corpus)
    loaded = load_corpus(tmp_path / "c")
    assert loaded == corpus


def test_load_missing_dir_raises(tmp_path):
    with pytest.raises(DataError):
        load_corpus(tmp_path / "nope")
