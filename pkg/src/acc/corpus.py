"""Synthetic key-value QA corpus, chunking, and a deterministic retriever.

Every document carries a unique two-token identity (group, member) repeated
in each of its pairs, plus a per-pair slot token drawn from a disjoint
alphabet region. A query is the triple (group, member, slot); its two-token
value answers it. Count-vector cosine then ranks the gold document strictly
above any other: the gold doc overlaps the query on all three tokens with the
identity tokens repeated per pair, while a competitor can share at most one
identity token plus one slot. That margin is what makes the toy retriever
reliable without a learned index.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .decoder import N_SPECIALS, PAD, SEP
from .errors import ConfigError, DataError, UsageError
from .numerics import SeedStreams

PAIR_STRIDE = 6  # group, member, slot, value0, value1, SEP

SPLITS = ("train", "dev-seen", "dev-unseen", "test")


@dataclass(frozen=True)
class Difficulty:
    pair_position: int
    distractor_pairs: int
    label: str  # "easy" iff the asked pair sits first in its document


@dataclass(frozen=True)
class Document:
    doc_id: int
    tokens: tuple[int, ...]

    def __post_init__(self):
        if not 1 <= len(self.tokens) <= 128:
            raise DataError(f"document {self.doc_id} length {len(self.tokens)} "
                            "outside [1, 128]")


@dataclass(frozen=True)
class QAInstance:
    instance_id: int
    query: tuple[int, ...]
    answer: tuple[int, ...]
    gold_docs: tuple[int, ...]
    difficulty: Difficulty
    split: str


@dataclass(frozen=True)
class CorpusConfig:
    n_docs: int = 2000
    pairs_per_doc: int = 8
    doc_len: int = 128
    key_alphabet: int = 120
    value_alphabet: int = 64
    n_instances: int = 1000
    easy_fraction: float = 0.5
    pretrain_doc_fraction: float = 0.5
    token_base: int = N_SPECIALS
    token_limit: int = 192  # exclusive; stays below the compression block

    def __post_init__(self):
        if self.pairs_per_doc < 1 or self.n_docs < 1 or self.n_instances < 1:
            raise ConfigError("counts must be positive")
        if not PAIR_STRIDE <= self.pairs_per_doc * PAIR_STRIDE <= self.doc_len:
            raise ConfigError(f"{self.pairs_per_doc} pairs need "
                              f"{self.pairs_per_doc * PAIR_STRIDE} tokens, "
                              f"doc_len is {self.doc_len}")
        if self.doc_len > 128:
            raise ConfigError("doc_len capped at 128")
        if self.key_alphabet - self.key_alphabet // 2 < self.pairs_per_doc:
            raise ConfigError("slot region too small for unique slots")
        if self.n_docs > (self.key_alphabet // 2) ** 2:
            raise ConfigError("identity region too small for unique doc identities")
        if self.value_alphabet < 1:
            raise ConfigError("value alphabet must be positive")
        span = self.key_alphabet + self.value_alphabet
        if self.token_base + span > self.token_limit:
            raise ConfigError(f"alphabets span {span} ids, only "
                              f"{self.token_limit - self.token_base} available")
        if not 0.0 <= self.easy_fraction <= 1.0:
            raise ConfigError("easy_fraction must be in [0, 1]")
        if not 0.0 < self.pretrain_doc_fraction <= 1.0:
            raise ConfigError("pretrain_doc_fraction must be in (0, 1]")

    @property
    def identity_ids(self) -> range:
        return range(self.token_base, self.token_base + self.key_alphabet // 2)

    @property
    def slot_ids(self) -> range:
        return range(self.token_base + self.key_alphabet // 2,
                     self.token_base + self.key_alphabet)

    @property
    def value_ids(self) -> range:
        start = self.token_base + self.key_alphabet
        return range(start, start + self.value_alphabet)


@dataclass(frozen=True)
class Corpus:
    config: CorpusConfig
    seed: int
    documents: tuple[Document, ...]
    instances: tuple[QAInstance, ...]
    pretrain_doc_ids: frozenset[int]

    def docs_by_id(self) -> dict[int, Document]:
        return {d.doc_id: d for d in self.documents}

    def split(self, *names: str) -> list[QAInstance]:
        return [i for i in self.instances if i.split in names]


def parse_pairs(doc: Document) -> list[tuple[tuple[int, int, int], tuple[int, int]]]:
    """Fixed-stride parse of a generated document into (key triple, value)."""
    out = []
    toks = doc.tokens
    for start in range(0, len(toks) - PAIR_STRIDE + 1, PAIR_STRIDE):
        chunk_ = toks[start:start + PAIR_STRIDE]
        if chunk_[-1] != SEP:
            break  # reached padding
        out.append(((chunk_[0], chunk_[1], chunk_[2]), (chunk_[3], chunk_[4])))
    return out


def generate_corpus(config: CorpusConfig, seed: int) -> Corpus:
    streams = SeedStreams(seed)
    doc_rng = streams.stream("corpus-docs")
    inst_rng = streams.stream("corpus-instances")
    split_rng = streams.stream("corpus-splits")

    idents = np.array(config.identity_ids)
    slot_pool = np.array(config.slot_ids)
    values = np.array(config.value_ids)
    a = len(idents)

    identity = doc_rng.choice(a * a, size=config.n_docs, replace=False)
    documents: list[Document] = []
    for doc_id, ident in enumerate(identity):
        group, member = idents[ident // a], idents[ident % a]
        slots = doc_rng.permutation(slot_pool)[: config.pairs_per_doc]
        toks: list[int] = []
        for slot in slots:
            v = values[doc_rng.integers(0, len(values), size=2)]
            toks += [int(group), int(member), int(slot), int(v[0]), int(v[1]), SEP]
        toks += [PAD] * (config.doc_len - len(toks))
        documents.append(Document(doc_id, tuple(toks)))

    n_pre = max(1, round(config.n_docs * config.pretrain_doc_fraction))
    pretrain_ids = frozenset(
        int(i) for i in split_rng.permutation(config.n_docs)[:n_pre])
    pre_list = sorted(pretrain_ids)

    instances: list[QAInstance] = []
    for iid in range(config.n_instances):
        u = split_rng.random()
        if u < 0.70:
            split = "train"
            doc = documents[pre_list[int(inst_rng.integers(len(pre_list)))]]
        else:
            doc = documents[int(inst_rng.integers(config.n_docs))]
            if u < 0.85:
                split = "dev-seen" if doc.doc_id in pretrain_ids else "dev-unseen"
            else:
                split = "test"
        pairs = parse_pairs(doc)
        if config.pairs_per_doc == 1 or inst_rng.random() < config.easy_fraction:
            pos = 0
        else:
            pos = 1 + int(inst_rng.integers(config.pairs_per_doc - 1))
        key, value = pairs[pos]
        diff = Difficulty(pair_position=pos,
                          distractor_pairs=config.pairs_per_doc - 1,
                          label="easy" if pos == 0 else "hard")
        instances.append(QAInstance(iid, key, value, (doc.doc_id,), diff, split))

    return Corpus(config, seed, tuple(documents), tuple(instances), pretrain_ids)


def chunk(stream, block: int = 128) -> list[Document]:
    """Split a token stream into disjoint consecutive blocks; a short final
    block is kept if it has at least one token."""
    if block < 1:
        raise UsageError("block must be >= 1")
    toks = list(stream)
    return [Document(i, tuple(toks[s:s + block]))
            for i, s in enumerate(range(0, len(toks), block))]


# ------------------------------------------------------------- retrieval

class RetrievalIndex:
    """Token-count vectors per document; cosine ranking, doc_id tie-break."""

    def __init__(self, documents, vocab_size: int):
        docs = list(documents)
        if not docs:
            raise DataError("cannot index an empty corpus")
        self.vocab_size = vocab_size
        self.doc_ids = np.array([d.doc_id for d in docs], dtype=np.int64)
        counts = np.zeros((len(docs), vocab_size), dtype=np.float64)
        for row, d in enumerate(docs):
            np.add.at(counts[row], np.array(d.tokens, dtype=np.int64), 1.0)
        self.counts = counts
        self.norms = np.linalg.norm(counts, axis=1)


def retrieve_topk(query, index: RetrievalIndex, k: int) -> list[int]:
    if k < 1:
        raise UsageError("k must be >= 1")
    q = np.zeros(index.vocab_size, dtype=np.float64)
    np.add.at(q, np.array(list(query), dtype=np.int64), 1.0)
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise UsageError("query has no tokens")
    scores = (index.counts @ q) / (index.norms * qn)
    order = np.lexsort((index.doc_ids, -scores))
    return [int(index.doc_ids[i]) for i in order[: min(k, len(order))]]


# ------------------------------------------------------------- files

def save_corpus(out_dir, corpus: Corpus) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "corpus.tsv", "w") as fh:
        for d in corpus.documents:
            fh.write(f"{d.doc_id}\t{' '.join(map(str, d.tokens))}\n")
    with open(out / "qa.jsonl", "w") as fh:
        for inst in corpus.instances:
            fh.write(json.dumps({
                "instance_id": inst.instance_id,
                "query": list(inst.query),
                "answer": list(inst.answer),
                "gold_docs": list(inst.gold_docs),
                "difficulty": asdict(inst.difficulty),
                "split": inst.split,
            }) + "\n")
    with open(out / "meta.json", "w") as fh:
        json.dump({"config": asdict(corpus.config), "seed": corpus.seed,
                   "pretrain_doc_ids": sorted(corpus.pretrain_doc_ids)},
                  fh, indent=2)


def load_corpus(out_dir) -> Corpus:
    out = Path(out_dir)
    try:
        meta = json.loads((out / "meta.json").read_text())
        config = CorpusConfig(**meta["config"])
        documents = []
        for line in (out / "corpus.tsv").read_text().splitlines():
            doc_id, ids = line.split("\t")
            documents.append(Document(int(doc_id),
                                      tuple(int(t) for t in ids.split())))
        instances = []
        for line in (out / "qa.jsonl").read_text().splitlines():
            rec = json.loads(line)
            instances.append(QAInstance(
                rec["instance_id"], tuple(rec["query"]), tuple(rec["answer"]),
                tuple(rec["gold_docs"]), Difficulty(**rec["difficulty"]),
                rec["split"]))
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"corpus directory {out} unreadable: {e}") from e
    return Corpus(config, meta["seed"], tuple(documents), tuple(instances),
                  frozenset(meta["pretrain_doc_ids"]))
