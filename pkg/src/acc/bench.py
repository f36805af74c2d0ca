"""Benchmark harness over the inference modes.

Evaluates {no-retrieval, raw-rag, fixed-b per schedule entry, fixed-full,
adaptive, oracle} on the test split, one JSON-lines record per (instance,
mode), plus an aligned text summary whose every number is recomputable from
the records. Wall-clock fields are informational; the deterministic
prefill-position proxy is the cost figure the numbers stand on.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .compressor import check_schedule, read_compressed
from .corpus import Corpus, RetrievalIndex, load_corpus, retrieve_topk
from .decoder import Decoder, render_prompt
from .errors import DataError, UsageError
from .metrics import cumulative_curve, match_metric, resilience_boost
from .numerics.checkpoint import read_checkpoint
from .pipeline import (adaptive_answer, closed_book_answer, fixed_answer,
                       oracle_answer, raw_text_answer)
from .selector import Selector
from . import config as cfgmod

WALL_FIELDS = ("ftit_wall_ms", "selector_wall_ms")


@dataclass
class EvalReport:
    records: list[dict]
    aggregates: dict
    summary_text: str
    meta: dict


def measure_ftit(invoke, *, warmup: int = 2, repeats: int = 5):
    """Median wall time to first token (ms) and the deterministic
    prefill-position proxy for one pipeline invocation."""
    if repeats < 1:
        raise UsageError("need at least one measured repeat")
    for _ in range(warmup):
        invoke()
    walls = []
    outcomes = []
    for _ in range(repeats):
        tokens, trace = invoke()
        walls.append(trace.wall_to_first_token_s * 1e3)
        outcomes.append((tuple(tokens), trace.prefill_positions))
    if len(set(outcomes)) != 1:
        raise DataError("pipeline invocation was not deterministic across repeats")
    return float(np.median(walls)), outcomes[0][1], tokens, trace


def mode_names(schedule) -> list[str]:
    return (["no-retrieval", "raw-rag"]
            + [f"fixed-{b}" for b in schedule]
            + ["fixed-full", "adaptive", "oracle"])


def evaluate_modes(decoder: Decoder, selector: Selector, corpus: Corpus,
                   compressed: dict, *, schedule=None, top_k: int = 5,
                   max_new: int = 8, split: str = "test", warmup: int = 2,
                   repeats: int = 5, scope: str = "concat",
                   modes=None) -> list[dict]:
    """One record per (instance, mode); instances come from the given split."""
    schedule = check_schedule(selector.schedule if schedule is None else schedule)
    wanted = mode_names(schedule) if modes is None else list(modes)
    unknown = set(wanted) - set(mode_names(schedule))
    if unknown:
        raise UsageError(f"unknown modes {sorted(unknown)}")
    if "adaptive" in wanted and schedule != selector.schedule:
        raise UsageError(f"benchmark schedule {schedule} differs from the "
                         f"selector's training schedule {selector.schedule}")
    instances = corpus.split(split)
    if not instances:
        raise DataError(f"no instances in split {split!r}")
    docs_by_id = corpus.docs_by_id()
    index = RetrievalIndex(corpus.documents, decoder.config.vocab_size)
    records: list[dict] = []
    for inst in instances:
        doc_ids = retrieve_topk(inst.query, index, top_k)
        runners = {
            "no-retrieval": lambda: closed_book_answer(
                decoder, inst.query, max_new=max_new),
            "raw-rag": lambda: raw_text_answer(
                decoder, inst.query, doc_ids, docs_by_id, max_new=max_new),
            "fixed-full": lambda: fixed_answer(
                decoder, inst.query, doc_ids, compressed, None,
                max_new=max_new),
            "adaptive": lambda: adaptive_answer(
                decoder, selector, inst.query, doc_ids, compressed,
                max_new=max_new, scope=scope),
            "oracle": lambda: oracle_answer(
                decoder, inst.query, doc_ids, compressed, schedule,
                inst.answer, max_new=max_new),
        }
        for b in schedule:
            runners[f"fixed-{b}"] = (
                lambda b=b: fixed_answer(decoder, inst.query, doc_ids,
                                         compressed, b, max_new=max_new))
        for mode in wanted:
            wall_ms, proxy, tokens, trace = measure_ftit(
                runners[mode], warmup=warmup, repeats=repeats)
            records.append({
                "instance_id": inst.instance_id,
                "mode": mode,
                "matched": bool(match_metric(inst.answer, tokens)),
                "context_embeddings": trace.context_count,
                "prefill_positions": proxy,
                "stop_granularity": trace.chosen,
                "fallback": bool(trace.fallback),
                "difficulty": inst.difficulty.label,
                "pair_position": inst.difficulty.pair_position,
                "distractor_pairs": inst.difficulty.distractor_pairs,
                "split": inst.split,
                "ftit_wall_ms": wall_ms,
                "selector_wall_ms": trace.selector_wall_s * 1e3,
            })
    return records


def aggregate(records: list[dict]) -> dict:
    """Per-mode aggregates, all recomputable from the records exactly."""
    if not records:
        raise UsageError("nothing to aggregate")
    by_mode: dict[str, list[dict]] = {}
    for r in records:
        by_mode.setdefault(r["mode"], []).append(r)
    out: dict[str, dict] = {}
    for mode, rows in by_mode.items():
        n = len(rows)
        agg = {
            "n": n,
            "match_pct": 100.0 * sum(r["matched"] for r in rows) / n,
            "mean_prefill_positions": sum(r["prefill_positions"] for r in rows) / n,
            "mean_context_embeddings": sum(r["context_embeddings"] for r in rows) / n,
            "mean_ftit_wall_ms": sum(r["ftit_wall_ms"] for r in rows) / n,
            "by_difficulty": {},
        }
        for label in sorted({r["difficulty"] for r in rows}):
            sub = [r for r in rows if r["difficulty"] == label]
            agg["by_difficulty"][label] = {
                "n": len(sub),
                "match_pct": 100.0 * sum(r["matched"] for r in sub) / len(sub),
            }
        if mode == "adaptive":
            agg["fallback_rate"] = sum(r["fallback"] for r in rows) / n
            stopped = [r for r in rows if not r["fallback"]]
            if stopped:
                agg["mean_context_embeddings_excl_fallback"] = (
                    sum(r["context_embeddings"] for r in stopped) / len(stopped))
            total_wall = sum(r["ftit_wall_ms"] for r in rows)
            if total_wall > 0:
                agg["selector_share"] = (
                    sum(r["selector_wall_ms"] for r in rows) / total_wall)
            for label in agg["by_difficulty"]:
                sub = [r for r in rows if r["difficulty"] == label]
                withstop = [r["stop_granularity"] for r in sub
                            if r["stop_granularity"] is not None]
                if withstop:
                    agg["by_difficulty"][label]["mean_stop_granularity"] = (
                        sum(withstop) / len(withstop))
        out[mode] = agg
    return out


def fixed_match_by_instance(records: list[dict]) -> list[dict]:
    """Per instance, {granularity: matched} over the fixed-b modes."""
    rows: dict[int, dict[int, bool]] = {}
    for r in records:
        if r["mode"].startswith("fixed-") and r["mode"] != "fixed-full":
            b = int(r["mode"].split("-", 1)[1])
            rows.setdefault(r["instance_id"], {})[b] = r["matched"]
    return [rows[k] for k in sorted(rows)]


def rates_against_closed_book(records: list[dict]) -> dict[str, dict]:
    """Resilience/boost of every retrieval mode relative to no-retrieval."""
    base = {r["instance_id"]: r["matched"] for r in records
            if r["mode"] == "no-retrieval"}
    if not base:
        return {}
    ids = sorted(base)
    out = {}
    for mode in sorted({r["mode"] for r in records} - {"no-retrieval"}):
        aug = {r["instance_id"]: r["matched"] for r in records
               if r["mode"] == mode}
        if set(aug) != set(base):
            continue
        rates = resilience_boost([base[i] for i in ids], [aug[i] for i in ids])
        out[mode] = {"resilience": rates.resilience, "boost": rates.boost}
    return out


def render_summary(aggregates: dict, records: list[dict], schedule) -> str:
    """Aligned text: one (M, FTIT) row per mode, then the extras."""
    order = [m for m in mode_names(schedule) if m in aggregates]
    lines = [f"{'mode':<14} {'M%':>7} {'FTIT(pos)':>10} {'FTIT(ms)':>9} "
             f"{'ctx':>8}"]
    for mode in order:
        a = aggregates[mode]
        lines.append(f"{mode:<14} {a['match_pct']:>7.2f} "
                     f"{a['mean_prefill_positions']:>10.2f} "
                     f"{a['mean_ftit_wall_ms']:>9.3f} "
                     f"{a['mean_context_embeddings']:>8.2f}")
    adaptive = aggregates.get("adaptive")
    if adaptive:
        lines.append("")
        lines.append(f"adaptive fallback rate: {adaptive['fallback_rate']:.3f}")
        if "mean_context_embeddings_excl_fallback" in adaptive:
            lines.append("adaptive ctx excl fallback: "
                         f"{adaptive['mean_context_embeddings_excl_fallback']:.2f}")
        if "selector_share" in adaptive:
            lines.append(f"selector share of first-token wall time: "
                         f"{adaptive['selector_share']:.3f}")
    per_instance = fixed_match_by_instance(records)
    if per_instance:
        curve = cumulative_curve(per_instance, list(schedule))
        pieces = "  ".join(f"b={b}: {curve[b]:.3f}" for b in sorted(curve))
        lines.append("")
        lines.append(f"cumulative match over fixed budgets: {pieces}")
    rates = rates_against_closed_book(records)
    if rates:
        lines.append("")
        lines.append(f"{'vs no-retrieval':<14} {'resilience':>11} {'boost':>7}")
        for mode, r in rates.items():
            res = "undef" if r["resilience"] is None else f"{r['resilience']:.3f}"
            boo = "undef" if r["boost"] is None else f"{r['boost']:.3f}"
            lines.append(f"{mode:<14} {res:>11} {boo:>7}")
    lines.append("")
    lines.append("difficulty breakdown (match %):")
    labels = sorted({r["difficulty"] for r in records})
    for mode in order:
        cells = []
        for label in labels:
            sub = aggregates[mode]["by_difficulty"].get(label)
            cells.append(f"{label}={sub['match_pct']:.2f}" if sub else f"{label}=-")
        lines.append(f"  {mode:<12} " + "  ".join(cells))
    return "\n".join(lines) + "\n"


def _sha256_artifact(path: Path) -> str:
    """Content hash of a file, or of a directory's files in sorted order."""
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) \
        if path.is_dir() else [path]
    for p in files:
        h.update(p.name.encode())
        with open(p, "rb") as fh:
            for block in iter(lambda: fh.read(1 << 20), b""):
                h.update(block)
    return h.hexdigest()[:16]


def run_bench(cfg: dict[str, str], out_dir) -> EvalReport:
    """Full benchmark from materialized artifacts; writes report.jsonl,
    summary.txt, meta.json, and figures under out_dir."""
    out_dir = Path(out_dir)
    artifacts = {
        "corpus": Path(cfgmod.get_str(cfg, "bench.corpus")),
        "decoder": Path(cfgmod.get_str(cfg, "bench.decoder")),
        "embeddings": Path(cfgmod.get_str(cfg, "bench.embeddings")),
        "selector": Path(cfgmod.get_str(cfg, "bench.selector")),
    }
    missing = [f"{name}: {path}" for name, path in artifacts.items()
               if not path.exists()]
    if missing:
        raise DataError("missing artifacts: " + "; ".join(missing))

    corpus = load_corpus(artifacts["corpus"])
    decoder = Decoder.from_entries(read_checkpoint(artifacts["decoder"]))
    compressed = read_compressed(artifacts["embeddings"])
    selector = Selector.from_entries(read_checkpoint(artifacts["selector"]))
    schedule = cfgmod.get_ints(cfg, "bench.granularities", selector.schedule)

    t0 = time.perf_counter()
    records = evaluate_modes(
        decoder, selector, corpus, compressed,
        schedule=schedule,
        top_k=cfgmod.get_int(cfg, "bench.top_k", 5),
        max_new=cfgmod.get_int(cfg, "bench.max_new", 8),
        split=cfgmod.get_str(cfg, "bench.split", "test"),
        warmup=cfgmod.get_int(cfg, "bench.warmup", 2),
        repeats=cfgmod.get_int(cfg, "bench.repeats", 5),
        scope=cfgmod.get_str(cfg, "bench.granularity_scope", "concat"))
    aggregates = aggregate(records)
    summary = render_summary(aggregates, records, schedule)
    meta = {
        "config_hash": cfgmod.config_hash(cfg),
        "config": dict(sorted(cfg.items())),
        "corpus_seed": corpus.seed,
        "schedule": list(schedule),
        "n_records": len(records),
        "artifact_hashes": {k: _sha256_artifact(v) for k, v in artifacts.items()},
        "wall_total_s": time.perf_counter() - t0,
    }

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.jsonl", "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    (out_dir / "summary.txt").write_text(summary, encoding="utf-8")
    with open(out_dir / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    if cfgmod.get_bool(cfg, "bench.figures", True):
        from .figures import render_figures
        render_figures(records, schedule, out_dir)
    return EvalReport(records, aggregates, summary, meta)


def strip_wall_fields(records: list[dict]) -> list[dict]:
    """Records minus the nondeterministic wall-clock fields."""
    return [{k: v for k, v in r.items() if k not in WALL_FIELDS}
            for r in records]
