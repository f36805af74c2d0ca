"""Adaptive accumulate-and-verify inference over compressed context.

The loop assembles query embeddings plus a growing prefix of the concatenated
context embeddings, asks the halting selector whether the prefix suffices,
and generates on the first "sufficient"; exhausting the schedule falls back
to the full context. Fixed-granularity, oracle, closed-book, and raw-text
reference modes share the same trace shape so the benchmark can account for
cost uniformly.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from .compressor import check_schedule
from .decoder import ANSWER, Decoder, render_prompt, strip_pad
from .errors import DataError, ShapeError, UsageError
from .metrics import match_metric
from .selector import DecisionTuple, Selector


@dataclass
class AssembledInput:
    """Decoder input rows: query embeddings then a context-embedding prefix."""

    rows: np.ndarray  # (n, d_model)
    boundary: int     # index of the first context row

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise ShapeError(f"assembled input must be (n, d), got {self.rows.shape}")
        if not 0 <= self.boundary <= self.rows.shape[0]:
            raise ShapeError(f"boundary {self.boundary} outside 0..{self.rows.shape[0]}")

    @property
    def query_rows(self) -> np.ndarray:
        return self.rows[: self.boundary]

    @property
    def context_rows(self) -> np.ndarray:
        return self.rows[self.boundary:]


@dataclass
class SelectionTrace:
    steps: list[tuple[int, float | None, int]]  # (b, stop probability, action)
    chosen: int | None                          # granularity consumed; None = fallback
    fallback: bool
    context_count: int                          # context embeddings in the final input
    prefill_positions: int                      # query + context rows pushed through the decoder
    wall_to_first_token_s: float
    input: AssembledInput
    selector_wall_s: float = 0.0                # time inside selector forwards


def _context_parts(doc_ids, compressed) -> list[np.ndarray]:
    parts = []
    for did in doc_ids:
        seq = compressed.get(did)
        if seq is None:
            raise DataError(f"no compressed embeddings for doc {did}")
        parts.append(seq.embeddings)
    if not parts:
        raise UsageError("no documents to assemble")
    return parts


def assemble_context(doc_ids, compressed) -> np.ndarray:
    """Concatenate per-document embedding blocks in retrieval-rank order."""
    parts = _context_parts(doc_ids, compressed)
    return np.concatenate(parts) if len(parts) > 1 else parts[0].copy()


def _clip_schedule(schedule, limit: int):
    if schedule[-1] <= limit:
        return schedule
    clipped = tuple(sorted({min(b, limit) for b in schedule}))
    warnings.warn(f"granularity schedule {schedule} clipped to {clipped}: "
                  f"only {limit} context embeddings available")
    return clipped


def _finish(eng, cache, table, max_new, t0):
    """Push the answer-start token, time the first generated token, decode."""
    logits, _, cache = eng.prefill(cache, table[[ANSWER]])
    wall = time.perf_counter() - t0
    return eng.greedy(cache, logits, max_new), wall


def adaptive_answer(decoder: Decoder, selector: Selector, query, doc_ids,
                    compressed, *, schedule=None, max_new: int = 8,
                    threshold: float | None = None, scope: str = "concat"
                    ) -> tuple[list[int], SelectionTrace]:
    """Accumulate context embeddings along the granularity schedule until the
    selector calls the input sufficient; generate from the full context if it
    never does. The prefill cache carries over between steps, so each context
    row is processed once."""
    if schedule is None:
        sched = selector.schedule
    else:
        if not tuple(schedule):
            raise UsageError("granularity schedule must be nonempty")
        sched = check_schedule(schedule)
        if sched != selector.schedule:
            raise UsageError(f"schedule {sched} differs from the selector's "
                             f"training schedule {selector.schedule}")
    if scope not in ("concat", "per_doc"):
        raise UsageError(f"unknown granularity scope {scope!r}")
    thr = selector.config.decision_threshold if threshold is None else threshold
    parts = _context_parts(doc_ids, compressed)
    e_c = np.concatenate(parts) if len(parts) > 1 else parts[0]
    limit = max(p.shape[0] for p in parts) if scope == "per_doc" else e_c.shape[0]
    sched = _clip_schedule(sched, limit)
    prompt = render_prompt(query)
    table = decoder.params["tok_embed"].data
    e_q = table[prompt]
    eng = decoder.engine()

    t0 = time.perf_counter()
    cache = eng.new_cache()
    _, prompt_hidden, cache = eng.prefill(cache, e_q)
    positions = len(prompt)
    steps: list[tuple[int, float | None, int]] = []
    chosen: int | None = None
    selector_wall = 0.0

    if scope == "concat":
        ctx_hidden = np.zeros((0, decoder.config.d_model), dtype=prompt_hidden.dtype)
        consumed = 0
        for b in sched:
            new_rows = e_c[consumed:b]
            if new_rows.shape[0]:
                _, h, cache = eng.prefill(cache, new_rows)
                ctx_hidden = np.concatenate([ctx_hidden, h])
                consumed = b
                positions += new_rows.shape[0]
            s0 = time.perf_counter()
            prob = selector.forward(_decision(prompt, prompt_hidden, b, ctx_hidden))
            selector_wall += time.perf_counter() - s0
            action = int(prob >= thr)
            steps.append((b, prob, action))
            if action:
                chosen = b
                break
        if chosen is None and consumed < e_c.shape[0]:
            rest = e_c[consumed:]
            _, _, cache = eng.prefill(cache, rest)
            consumed = e_c.shape[0]
            positions += rest.shape[0]
        ctx_rows = e_c[:consumed]
    else:
        base = cache
        cache = None
        for b in sched:
            rows = np.concatenate([p[: min(b, p.shape[0])] for p in parts])
            trial = base.fork()
            _, h, trial = eng.prefill(trial, rows)
            positions += rows.shape[0]
            s0 = time.perf_counter()
            prob = selector.forward(_decision(prompt, prompt_hidden, b, h))
            selector_wall += time.perf_counter() - s0
            action = int(prob >= thr)
            steps.append((b, prob, action))
            if action:
                chosen, cache, ctx_rows = b, trial, rows
                break
        if chosen is None:
            ctx_rows = np.concatenate(parts)
            cache = base.fork()
            _, _, cache = eng.prefill(cache, ctx_rows)
            positions += ctx_rows.shape[0]

    tokens, wall = _finish(eng, cache, table, max_new, t0)
    trace = SelectionTrace(
        steps=steps, chosen=chosen, fallback=chosen is None,
        context_count=int(ctx_rows.shape[0]), prefill_positions=positions,
        wall_to_first_token_s=wall,
        input=AssembledInput(np.concatenate([e_q, ctx_rows]), len(prompt)),
        selector_wall_s=selector_wall)
    return tokens, trace


def _decision(prompt, prompt_hidden, b, ctx_hidden) -> DecisionTuple:
    segs = np.array([0] * len(prompt) + [1] * ctx_hidden.shape[0], dtype=np.uint8)
    return DecisionTuple(0, b, 0, np.concatenate([prompt_hidden, ctx_hidden]), segs)


def fixed_answer(decoder: Decoder, query, doc_ids, compressed,
                 b: int | None, *, max_new: int = 8
                 ) -> tuple[list[int], SelectionTrace]:
    """Generate from a fixed context-embedding budget; b=None takes all."""
    parts = _context_parts(doc_ids, compressed)
    e_c = np.concatenate(parts) if len(parts) > 1 else parts[0]
    total = e_c.shape[0]
    if b is None:
        b_eff = total
    else:
        if int(b) < 1:
            raise UsageError("granularity must retrieve at least one embedding")
        (b_eff,) = _clip_schedule((int(b),), total)
    prompt = render_prompt(query)
    table = decoder.params["tok_embed"].data
    e_q = table[prompt]
    eng = decoder.engine()

    t0 = time.perf_counter()
    cache = eng.new_cache()
    _, _, cache = eng.prefill(cache, e_q)
    ctx_rows = e_c[:b_eff]
    _, _, cache = eng.prefill(cache, ctx_rows)
    tokens, wall = _finish(eng, cache, table, max_new, t0)
    trace = SelectionTrace(
        steps=[], chosen=b_eff, fallback=False, context_count=b_eff,
        prefill_positions=len(prompt) + b_eff, wall_to_first_token_s=wall,
        input=AssembledInput(np.concatenate([e_q, ctx_rows]), len(prompt)))
    return tokens, trace


def oracle_answer(decoder: Decoder, query, doc_ids, compressed, schedule,
                  gold_answer, *, max_new: int = 8
                  ) -> tuple[list[int], SelectionTrace]:
    """Perfect-selector reference: generate at every granularity in turn and
    keep the smallest whose output matches the gold answer; fall back to the
    full context when none does. Cost fields charge only the kept attempt."""
    sched = check_schedule(schedule)
    parts = _context_parts(doc_ids, compressed)
    e_c = np.concatenate(parts) if len(parts) > 1 else parts[0]
    total = e_c.shape[0]
    sched = _clip_schedule(sched, total)
    prompt = render_prompt(query)
    table = decoder.params["tok_embed"].data
    e_q = table[prompt]
    eng = decoder.engine()

    t0 = time.perf_counter()
    base = eng.new_cache()
    _, _, base = eng.prefill(base, e_q)
    steps: list[tuple[int, float | None, int]] = []
    for b in sched:
        cache = base.fork()
        _, _, cache = eng.prefill(cache, e_c[:b])
        tokens, wall = _finish(eng, cache, table, max_new, t0)
        matched = match_metric(gold_answer, tokens)
        steps.append((b, None, int(matched)))
        if matched:
            trace = SelectionTrace(
                steps=steps, chosen=b, fallback=False, context_count=b,
                prefill_positions=len(prompt) + b, wall_to_first_token_s=wall,
                input=AssembledInput(np.concatenate([e_q, e_c[:b]]), len(prompt)))
            return tokens, trace
    cache = base.fork()
    _, _, cache = eng.prefill(cache, e_c)
    tokens, wall = _finish(eng, cache, table, max_new, t0)
    trace = SelectionTrace(
        steps=steps, chosen=None, fallback=True, context_count=total,
        prefill_positions=len(prompt) + total, wall_to_first_token_s=wall,
        input=AssembledInput(np.concatenate([e_q, e_c]), len(prompt)))
    return tokens, trace


def closed_book_answer(decoder: Decoder, query, *, max_new: int = 8
                       ) -> tuple[list[int], SelectionTrace]:
    """No-retrieval baseline: the prompt alone."""
    prompt = render_prompt(query)
    table = decoder.params["tok_embed"].data
    e_q = table[prompt]
    eng = decoder.engine()
    t0 = time.perf_counter()
    cache = eng.new_cache()
    _, _, cache = eng.prefill(cache, e_q)
    tokens, wall = _finish(eng, cache, table, max_new, t0)
    trace = SelectionTrace(
        steps=[], chosen=None, fallback=False, context_count=0,
        prefill_positions=len(prompt), wall_to_first_token_s=wall,
        input=AssembledInput(e_q.copy(), len(prompt)))
    return tokens, trace


def raw_text_answer(decoder: Decoder, query, doc_ids, docs_by_id, *,
                    max_new: int = 8) -> tuple[list[int], SelectionTrace]:
    """Uncompressed baseline: retrieved documents as plain token embeddings,
    padding stripped, concatenated in rank order."""
    ctx_tokens: list[int] = []
    for did in doc_ids:
        doc = docs_by_id.get(did)
        if doc is None:
            raise DataError(f"no document with id {did}")
        ctx_tokens.extend(strip_pad(doc.tokens))
    prompt = render_prompt(query)
    table = decoder.params["tok_embed"].data
    e_q = table[prompt]
    ctx_rows = table[ctx_tokens] if ctx_tokens else np.zeros((0, e_q.shape[1]), e_q.dtype)
    eng = decoder.engine()
    t0 = time.perf_counter()
    cache = eng.new_cache()
    _, _, cache = eng.prefill(cache, e_q)
    if ctx_rows.shape[0]:
        _, _, cache = eng.prefill(cache, ctx_rows)
    tokens, wall = _finish(eng, cache, table, max_new, t0)
    trace = SelectionTrace(
        steps=[], chosen=None, fallback=False,
        context_count=int(ctx_rows.shape[0]),
        prefill_positions=len(prompt) + int(ctx_rows.shape[0]),
        wall_to_first_token_s=wall,
        input=AssembledInput(np.concatenate([e_q, ctx_rows]), len(prompt)))
    return tokens, trace
