"""Session fixtures: a trained corpus/decoder/compressor/selector stack.

Training the stack takes minutes, so artifacts are cached on disk under
tests/_artifacts keyed by a hash of the build recipe; rerunning with the same
recipe loads the files instead of retraining. ACC_TEST_CACHE=0 builds into a
throwaway directory.
"""

import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path

import pytest

from acc.compressor import (CompressionConfig, Compressor, read_compressed,
                            train_compressor, write_compressed)
from acc.corpus import (CorpusConfig, RetrievalIndex, generate_corpus,
                        load_corpus, save_corpus)
from acc.decoder import (AdapterWeights, Decoder, DecoderConfig,
                         pretrain_decoder)
from acc.numerics.checkpoint import read_checkpoint, write_checkpoint
from acc.selector import (SelectorConfig, read_decisions, synthesize_decisions,
                          train_selector, write_decisions)

RECIPE_VERSION = 1
SEEDS = (0, 1, 2)

CORPUS_CFG = CorpusConfig(n_docs=80, pairs_per_doc=8, doc_len=64,
                          key_alphabet=40, value_alphabet=24, n_instances=320,
                          token_limit=96)
CORPUS_SEED = 1
DECODER_CFG = DecoderConfig(vocab_size=128, d_model=96, n_layers=3, n_heads=6,
                            max_positions=256, comp_base=96, comp_count=32)
DECODER_SEED = 7
DECODER_TRAIN = dict(steps=12000, lr=1e-3, batch=6, fresh_weight=0.7,
                     eval_every=1000, target_match=0.90)
TOP_K = 2
SCHEDULES = {"g0": (32,), "g1": (1, 32)}
COMP_TRAIN = dict(pretrain_steps=1500, finetune_steps=3000, lr=1e-3)
SELECTOR_CFG = SelectorConfig(encoder_layers=2, encoder_heads=4,
                              projection_dim=32)
SELECTOR_TRAIN = dict(epochs=40, lr=1e-3, batch=8)


def _recipe_hash() -> str:
    recipe = {
        "version": RECIPE_VERSION,
        "corpus": asdict(CORPUS_CFG), "corpus_seed": CORPUS_SEED,
        "decoder": asdict(DECODER_CFG), "decoder_seed": DECODER_SEED,
        "decoder_train": DECODER_TRAIN,
        "top_k": TOP_K, "schedules": {k: list(v) for k, v in SCHEDULES.items()},
        "comp_train": COMP_TRAIN,
        "selector": asdict(SELECTOR_CFG), "selector_train": SELECTOR_TRAIN,
    }
    blob = json.dumps(recipe, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:10]


@pytest.fixture(scope="session")
def artifact_dir(tmp_path_factory) -> Path:
    if os.environ.get("ACC_TEST_CACHE", "1") == "0":
        return tmp_path_factory.mktemp("artifacts")
    d = Path(__file__).parent / "_artifacts" / _recipe_hash()
    d.mkdir(parents=True, exist_ok=True)
    return d


@pytest.fixture(scope="session")
def fixture_corpus(artifact_dir):
    dest = artifact_dir / "corpus"
    if not dest.exists():
        save_corpus(dest, generate_corpus(CORPUS_CFG, CORPUS_SEED))
    return load_corpus(dest)


@pytest.fixture(scope="session")
def base_decoder(artifact_dir, fixture_corpus):
    dest = artifact_dir / "decoder.accw"
    if not dest.exists():
        corpus = fixture_corpus
        index = RetrievalIndex(corpus.documents, DECODER_CFG.vocab_size)
        from acc.corpus import retrieve_topk
        decoder, _ = pretrain_decoder(
            DECODER_CFG, corpus.documents, corpus.instances,
            seed=DECODER_SEED,
            eval_instances=corpus.split("dev-seen", "dev-unseen"),
            eval_context_fn=lambda i: retrieve_topk(i.query, index, TOP_K),
            alphabets=corpus.config,
            log_path=artifact_dir / "decoder.log.jsonl",
            **DECODER_TRAIN)
        write_checkpoint(dest, decoder.to_entries())
    decoder = Decoder.from_entries(read_checkpoint(dest))
    decoder.freeze()
    return decoder


def comp_config(name: str) -> CompressionConfig:
    return CompressionConfig(tau=4, granularities=SCHEDULES[name], top_k=TOP_K)


def _adapters(artifact_dir, corpus, decoder, name: str, seed: int):
    dest = artifact_dir / f"{name}-adapters-s{seed}.accw"
    if not dest.exists():
        cfg = comp_config(name)
        pre, _ = train_compressor("pretrain", decoder, corpus, cfg, seed=seed,
                                  steps=COMP_TRAIN["pretrain_steps"],
                                  lr=COMP_TRAIN["lr"])
        fin, _ = train_compressor("finetune", decoder, corpus, cfg, seed=seed,
                                  steps=COMP_TRAIN["finetune_steps"],
                                  lr=COMP_TRAIN["lr"], adapters=pre)
        write_checkpoint(dest, fin.to_entries())
    return AdapterWeights.from_entries(decoder.config, read_checkpoint(dest))


def _embeddings(artifact_dir, corpus, decoder, name: str, seed: int):
    dest = artifact_dir / f"{name}-embeddings-s{seed}.acce"
    if not dest.exists():
        adapters = _adapters(artifact_dir, corpus, decoder, name, seed)
        comp = Compressor(decoder, adapters, comp_config(name))
        write_compressed(dest, [comp.compress(d) for d in corpus.documents],
                         decoder.config.d_model)
    return read_compressed(dest)


def _decisions(artifact_dir, corpus, decoder, name: str, seed: int, part: str):
    dest = artifact_dir / f"{name}-decisions-{part}-s{seed}.accd"
    if not dest.exists():
        compressed = _embeddings(artifact_dir, corpus, decoder, name, seed)
        index = RetrievalIndex(corpus.documents, decoder.config.vocab_size)
        splits = ("train",) if part == "train" else ("dev-seen", "dev-unseen")
        tuples = synthesize_decisions(decoder, compressed,
                                      corpus.split(*splits), index,
                                      SCHEDULES[name], top_k=TOP_K)
        write_decisions(dest, tuples, SCHEDULES[name], decoder.config.d_model)
    return read_decisions(dest)[0]


def _selector(artifact_dir, corpus, decoder, name: str, seed: int):
    dest = artifact_dir / f"{name}-selector-s{seed}.accw"
    if not dest.exists():
        train = _decisions(artifact_dir, corpus, decoder, name, seed, "train")
        dev = _decisions(artifact_dir, corpus, decoder, name, seed, "dev")
        selector, _ = train_selector("rl", train, dev, SELECTOR_CFG,
                                     SCHEDULES[name],
                                     decoder.config.d_model, seed=seed,
                                     **SELECTOR_TRAIN)
        write_checkpoint(dest, selector.to_entries())
    from acc.selector import Selector
    return Selector.from_entries(read_checkpoint(dest))


@pytest.fixture(scope="session")
def trained_stack(artifact_dir, fixture_corpus, base_decoder):
    """Factory: trained_stack(name, seed) -> dict of artifacts, built lazily."""
    def build(name: str, seed: int, *, selector=False):
        out = {
            "schedule": SCHEDULES[name],
            "config": comp_config(name),
            "adapters": _adapters(artifact_dir, fixture_corpus, base_decoder,
                                  name, seed),
            "compressed": _embeddings(artifact_dir, fixture_corpus,
                                      base_decoder, name, seed),
        }
        if selector:
            out["selector"] = _selector(artifact_dir, fixture_corpus,
                                        base_decoder, name, seed)
        return out
    return build
