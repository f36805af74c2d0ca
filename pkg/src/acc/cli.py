"""Command-line umbrella.

Stages write their artifacts into the workspace given by --out under fixed
names, and later stages find them there, so a full run is a plain sequence:

    acc gen-corpus --out ws
    acc pretrain-decoder --out ws
    acc pretrain --out ws
    acc finetune --out ws
    acc compress --out ws
    acc synth-decisions --out ws
    acc train-selector --out ws
    acc bench --out ws

Every artifact path and hyperparameter can be overridden through the flat
`key = value` config file (see docs/CONFIG.md).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as cfgmod
from .bench import evaluate_modes, run_bench
from .compressor import (CompressionConfig, Compressor, read_compressed,
                         train_compressor, write_compressed)
from .corpus import (CorpusConfig, RetrievalIndex, generate_corpus,
                     load_corpus, retrieve_topk, save_corpus)
from .decoder import AdapterWeights, Decoder, DecoderConfig, pretrain_decoder
from .errors import (CapacityError, CheckpointError, ConfigError, DataError,
                     GranularityError, UsageError)

_CLI_ERRORS = (CapacityError, CheckpointError, ConfigError, DataError,
               GranularityError, UsageError)
from .numerics.checkpoint import read_checkpoint, write_checkpoint
from .selector import (Selector, SelectorConfig, read_decisions,
                       synthesize_decisions, train_selector, write_decisions)


def _corpus_config(cfg) -> CorpusConfig:
    return CorpusConfig(
        n_docs=cfgmod.get_int(cfg, "corpus.docs", 2000),
        pairs_per_doc=cfgmod.get_int(cfg, "corpus.pairs", 8),
        doc_len=cfgmod.get_int(cfg, "corpus.doc_len", 128),
        key_alphabet=cfgmod.get_int(cfg, "corpus.key_alphabet", 120),
        value_alphabet=cfgmod.get_int(cfg, "corpus.value_alphabet", 64),
        n_instances=cfgmod.get_int(cfg, "corpus.instances", 1000),
        easy_fraction=cfgmod.get_float(cfg, "corpus.easy_fraction", 0.5),
        pretrain_doc_fraction=cfgmod.get_float(cfg, "corpus.pretrain_fraction", 0.5),
        token_base=cfgmod.get_int(cfg, "corpus.token_base", 7),
        token_limit=cfgmod.get_int(cfg, "corpus.token_limit", 192))


def _decoder_config(cfg) -> DecoderConfig:
    return DecoderConfig(
        vocab_size=cfgmod.get_int(cfg, "decoder.vocab", 256),
        d_model=cfgmod.get_int(cfg, "decoder.d_model", 64),
        n_layers=cfgmod.get_int(cfg, "decoder.layers", 2),
        n_heads=cfgmod.get_int(cfg, "decoder.heads", 4),
        max_positions=cfgmod.get_int(cfg, "decoder.max_positions", 768),
        comp_base=cfgmod.get_int(cfg, "decoder.comp_base", 192),
        comp_count=cfgmod.get_int(cfg, "decoder.comp_count", 64),
        local_heads=cfgmod.get_int(cfg, "decoder.local_heads", -1))


def _compression_config(cfg) -> CompressionConfig:
    return CompressionConfig(
        tau=cfgmod.get_int(cfg, "compressor.tau", 4),
        granularities=cfgmod.get_ints(cfg, "compressor.granularities", (1, 32)),
        task_mix=cfgmod.get_floats(cfg, "compressor.task_mix", (0.5, 0.5)),
        distill_temperature=cfgmod.get_float(cfg, "compressor.temperature", 1.0),
        top_k=cfgmod.get_int(cfg, "compressor.top_k", 5),
        granularity_scope=cfgmod.get_str(cfg, "compressor.scope", "concat"))


def _selector_config(cfg) -> SelectorConfig:
    return SelectorConfig(
        encoder_layers=cfgmod.get_int(cfg, "selector.encoder_layers", 4),
        encoder_heads=cfgmod.get_int(cfg, "selector.heads", 4),
        projection_dim=cfgmod.get_int(cfg, "selector.projection", 64),
        mlp_layers=cfgmod.get_int(cfg, "selector.mlp_layers", 2),
        use_segment_embeddings=cfgmod.get_bool(cfg, "selector.segment_embeddings", True),
        use_granularity_feature=cfgmod.get_bool(cfg, "selector.granularity_feature", True),
        decision_threshold=cfgmod.get_float(cfg, "selector.threshold", 0.5),
        cap_instruction=cfgmod.get_int(cfg, "selector.cap_instruction", 32),
        cap_context=cfgmod.get_int(cfg, "selector.cap_context", 64))


def _path(cfg, key: str, default: Path) -> Path:
    return Path(cfgmod.get_str(cfg, key, str(default)))


def _write_log(path: Path, log: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in log:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _require(kind: str, path: Path) -> Path:
    if not path.exists():
        raise DataError(f"missing {kind}: {path} (run the producing stage or "
                        f"point paths.* config keys at it)")
    return path


# ------------------------------------------------------------- commands

def cmd_gen_corpus(args, cfg, seed: int, out: Path) -> int:
    if args.docs is not None:
        cfg = {**cfg, "corpus.docs": str(args.docs)}
    if args.pairs is not None:
        cfg = {**cfg, "corpus.pairs": str(args.pairs)}
    corpus = generate_corpus(_corpus_config(cfg), seed)
    dest = _path(cfg, "paths.corpus", out / "corpus")
    save_corpus(dest, corpus)
    n_test = len(corpus.split("test"))
    print(f"corpus -> {dest}  ({len(corpus.documents)} docs, "
          f"{len(corpus.instances)} instances, {n_test} test)")
    return 0


def cmd_pretrain_decoder(args, cfg, seed: int, out: Path) -> int:
    corpus = load_corpus(_require("corpus", _path(cfg, "paths.corpus", out / "corpus")))
    dcfg = _decoder_config(cfg)
    dev = corpus.split("dev-seen", "dev-unseen")
    index = RetrievalIndex(corpus.documents, dcfg.vocab_size)
    eval_k = cfgmod.get_int(cfg, "decoder.eval_top_k", 2)
    decoder, log = pretrain_decoder(
        dcfg, corpus.documents, corpus.instances,
        seed=seed,
        steps=cfgmod.get_int(cfg, "decoder.steps", 4000),
        lr=cfgmod.get_float(cfg, "decoder.lr", 1e-3),
        batch=cfgmod.get_int(cfg, "decoder.batch", 4),
        qa_weight=cfgmod.get_float(cfg, "decoder.qa_weight", 0.75),
        eval_every=cfgmod.get_int(cfg, "decoder.eval_every", 250),
        target_match=cfgmod.get_float(cfg, "decoder.target_match", 0.95),
        eval_instances=dev or None,
        eval_context_fn=lambda inst: retrieve_topk(inst.query, index, eval_k),
        alphabets=corpus.config,
        fresh_weight=cfgmod.get_float(cfg, "decoder.fresh_weight", 0.5))
    dest = _path(cfg, "paths.decoder", out / "decoder.accw")
    write_checkpoint(dest, decoder.to_entries())
    _write_log(dest.with_suffix(".log.jsonl"), log)
    final = [row for row in log if "eval_match" in row]
    note = f", dev match {final[-1]['eval_match']:.3f}" if final else ""
    print(f"decoder -> {dest}  (checksum {decoder.checksum()[:12]}{note})")
    return 0


def _load_decoder(cfg, out: Path) -> Decoder:
    path = _require("decoder checkpoint",
                    _path(cfg, "paths.decoder", out / "decoder.accw"))
    return Decoder.from_entries(read_checkpoint(path))


def cmd_pretrain(args, cfg, seed: int, out: Path) -> int:
    corpus = load_corpus(_require("corpus", _path(cfg, "paths.corpus", out / "corpus")))
    decoder = _load_decoder(cfg, out)
    adapters, log = train_compressor(
        "pretrain", decoder, corpus, _compression_config(cfg), seed=seed,
        steps=cfgmod.get_int(cfg, "compressor.pretrain_steps", 3000),
        lr=cfgmod.get_float(cfg, "compressor.lr", 1e-3))
    dest = _path(cfg, "paths.adapters_pretrained", out / "adapters-pretrained.accw")
    write_checkpoint(dest, adapters.to_entries())
    _write_log(dest.with_suffix(".log.jsonl"), log)
    print(f"pretrained adapters -> {dest}  (version {adapters.version_hash()})")
    return 0


def cmd_finetune(args, cfg, seed: int, out: Path) -> int:
    corpus = load_corpus(_require("corpus", _path(cfg, "paths.corpus", out / "corpus")))
    decoder = _load_decoder(cfg, out)
    if args.from_scratch:
        adapters = None
    else:
        src = _require("pretrained adapters",
                       _path(cfg, "paths.adapters_pretrained",
                             out / "adapters-pretrained.accw"))
        adapters = AdapterWeights.from_entries(decoder.config,
                                               read_checkpoint(src))
    adapters, log = train_compressor(
        "finetune", decoder, corpus, _compression_config(cfg), seed=seed,
        steps=cfgmod.get_int(cfg, "compressor.finetune_steps", 2000),
        lr=cfgmod.get_float(cfg, "compressor.lr", 1e-3),
        adapters=adapters, from_scratch=args.from_scratch)
    dest = _path(cfg, "paths.adapters", out / "adapters.accw")
    write_checkpoint(dest, adapters.to_entries())
    _write_log(dest.with_suffix(".log.jsonl"), log)
    print(f"adapters -> {dest}  (version {adapters.version_hash()})")
    return 0


def cmd_compress(args, cfg, seed: int, out: Path) -> int:
    corpus = load_corpus(_require("corpus", _path(cfg, "paths.corpus", out / "corpus")))
    decoder = _load_decoder(cfg, out)
    adapters_path = _require("adapters",
                             _path(cfg, "paths.adapters", out / "adapters.accw"))
    adapters = AdapterWeights.from_entries(decoder.config,
                                           read_checkpoint(adapters_path))
    compressor = Compressor(decoder, adapters, _compression_config(cfg))
    sequences = [compressor.compress(doc) for doc in corpus.documents]
    dest = _path(cfg, "paths.embeddings", out / "embeddings.acce")
    write_compressed(dest, sequences, decoder.config.d_model)
    rows = sum(s.embeddings.shape[0] for s in sequences)
    print(f"embeddings -> {dest}  ({len(sequences)} docs, {rows} rows)")
    return 0


def cmd_synth_decisions(args, cfg, seed: int, out: Path) -> int:
    corpus = load_corpus(_require("corpus", _path(cfg, "paths.corpus", out / "corpus")))
    decoder = _load_decoder(cfg, out)
    compressed = read_compressed(_require(
        "compressed embeddings", _path(cfg, "paths.embeddings", out / "embeddings.acce")))
    schedule = cfgmod.get_ints(cfg, "selector.granularities",
                               cfgmod.get_ints(cfg, "compressor.granularities", (1, 32)))
    index = RetrievalIndex(corpus.documents, decoder.config.vocab_size)
    top_k = cfgmod.get_int(cfg, "compressor.top_k", 5)
    max_new = cfgmod.get_int(cfg, "bench.max_new", 8)
    scope = cfgmod.get_str(cfg, "compressor.scope", "concat")
    splits = {"train": ("train",), "dev": ("dev-seen", "dev-unseen")}
    for name, split_names in splits.items():
        tuples = synthesize_decisions(
            decoder, compressed, corpus.split(*split_names), index, schedule,
            top_k=top_k, scope=scope, max_new=max_new)
        dest = _path(cfg, f"paths.decisions_{name}",
                     out / f"decisions-{name}.accd")
        write_decisions(dest, tuples, schedule, decoder.config.d_model)
        pos = sum(t.label for t in tuples)
        print(f"{name} decisions -> {dest}  ({len(tuples)} tuples, "
              f"{pos} positive)")
    return 0


def cmd_train_selector(args, cfg, seed: int, out: Path) -> int:
    train_path = _require("training decisions",
                          _path(cfg, "paths.decisions_train",
                                out / "decisions-train.accd"))
    dev_path = _require("dev decisions",
                        _path(cfg, "paths.decisions_dev",
                              out / "decisions-dev.accd"))
    train_tuples, schedule = read_decisions(train_path)
    dev_tuples, dev_schedule = read_decisions(dev_path)
    if schedule != dev_schedule:
        raise DataError(f"decision files disagree on the schedule: "
                        f"{schedule} vs {dev_schedule}")
    d_model = train_tuples[0].hidden.shape[1]
    method = args.method or cfgmod.get_str(cfg, "selector.method", "rl")
    selector, log = train_selector(
        method, train_tuples, dev_tuples, _selector_config(cfg), schedule,
        d_model, seed=seed,
        epochs=cfgmod.get_int(cfg, "selector.epochs", 50),
        lr=cfgmod.get_float(cfg, "selector.lr", 1e-3),
        batch=cfgmod.get_int(cfg, "selector.batch", 8),
        use_baseline=cfgmod.get_bool(cfg, "selector.baseline", False))
    dest = _path(cfg, "paths.selector", out / "selector.accw")
    write_checkpoint(dest, selector.to_entries())
    _write_log(dest.with_suffix(".log.jsonl"), log)
    print(f"selector -> {dest}  (method {method}, best dev sequence accuracy "
          f"{log[-1]['best_test_sequence_accuracy']:.3f})")
    return 0


def _bench_cfg(cfg, out: Path) -> dict[str, str]:
    merged = dict(cfg)
    merged.setdefault("bench.corpus", str(_path(cfg, "paths.corpus", out / "corpus")))
    merged.setdefault("bench.decoder", str(_path(cfg, "paths.decoder", out / "decoder.accw")))
    merged.setdefault("bench.embeddings", str(_path(cfg, "paths.embeddings", out / "embeddings.acce")))
    merged.setdefault("bench.selector", str(_path(cfg, "paths.selector", out / "selector.accw")))
    return merged


def cmd_eval(args, cfg, seed: int, out: Path) -> int:
    merged = _bench_cfg(cfg, out)
    corpus = load_corpus(_require("corpus", Path(merged["bench.corpus"])))
    decoder = Decoder.from_entries(read_checkpoint(
        _require("decoder checkpoint", Path(merged["bench.decoder"]))))
    compressed = read_compressed(_require(
        "compressed embeddings", Path(merged["bench.embeddings"])))
    selector = Selector.from_entries(read_checkpoint(
        _require("selector checkpoint", Path(merged["bench.selector"]))))
    schedule = (tuple(int(b) for b in args.granularities.split(","))
                if args.granularities else
                cfgmod.get_ints(merged, "bench.granularities", selector.schedule))
    modes = {"adaptive": ["adaptive"], "oracle": ["oracle"],
             "fixed": [f"fixed-{b}" for b in schedule] + ["fixed-full"],
             "raw": ["raw-rag"], "closed-book": ["no-retrieval"]}[args.mode]
    records = evaluate_modes(
        decoder, selector, corpus, compressed, schedule=schedule,
        top_k=args.topk, modes=modes,
        max_new=cfgmod.get_int(merged, "bench.max_new", 8),
        split=cfgmod.get_str(merged, "bench.split", "test"),
        warmup=cfgmod.get_int(merged, "bench.warmup", 2),
        repeats=cfgmod.get_int(merged, "bench.repeats", 5),
        scope=cfgmod.get_str(merged, "bench.granularity_scope", "concat"))
    report = out if out.suffix in (".jsonl", ".json") else out / "report.jsonl"
    report.parent.mkdir(parents=True, exist_ok=True)
    with open(report, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    matched = sum(r["matched"] for r in records)
    print(f"report -> {report}  ({len(records)} records, "
          f"{100.0 * matched / len(records):.2f}% matched)")
    return 0


def cmd_bench(args, cfg, seed: int, out: Path) -> int:
    merged = _bench_cfg(cfg, out)
    if args.no_figures:
        merged["bench.figures"] = "false"
    dest = out / "bench"
    report = run_bench(merged, dest)
    print(report.summary_text)
    print(f"report -> {dest / 'report.jsonl'}  ({len(report.records)} records)")
    return 0


def main(argv=None) -> int:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="flat key = value config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, default=Path("runs"),
                        help="workspace directory for artifacts")

    parser = argparse.ArgumentParser(
        prog="acc",
        description="adaptive context compression: training and benchmark stages")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[common],
                       help="generate the synthetic key-value QA corpus")
    p.add_argument("--docs", type=int, default=None)
    p.add_argument("--pairs", type=int, default=None)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain-decoder", parents=[common],
                       help="train the frozen-base decoder on the corpus")
    p.set_defaults(func=cmd_pretrain_decoder)

    p = sub.add_parser("pretrain", parents=[common],
                       help="compressor stage 1: auto-encoding + continuation")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common],
                       help="compressor stage 2: self-distillation")
    p.add_argument("--from-scratch", action="store_true",
                   help="ablation: skip the pretrained adapter initialization")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("compress", parents=[common],
                       help="materialize compressed embeddings for every doc")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("synth-decisions", parents=[common],
                       help="label decision tuples for selector training")
    p.set_defaults(func=cmd_synth_decisions)

    p = sub.add_parser("train-selector", parents=[common],
                       help="train the halting selector on decision tuples")
    p.add_argument("--method", choices=("rl", "supervised"), default=None)
    p.set_defaults(func=cmd_train_selector)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate one inference mode on the test split")
    p.add_argument("--mode", required=True,
                   choices=("adaptive", "oracle", "fixed", "raw", "closed-book"))
    p.add_argument("--granularities", default=None,
                   help="comma-separated schedule, e.g. 1,32")
    p.add_argument("--topk", type=int, default=5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common],
                       help="run every mode and write report + summary + figures")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_bench)

    args = parser.parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config) if args.config else {}
        seed = args.seed if args.seed != 0 else cfgmod.get_int(cfg, "seed", 0)
        return args.func(args, cfg, seed, args.out)
    except _CLI_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
