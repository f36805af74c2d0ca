"""Evaluation metrics.

Match is containment, not exact equality: a verbose generation that carries
the reference answer anywhere inside it counts. Resilience/boost compare a
no-retrieval baseline against an augmented run over the same instances.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import UsageError


def match_metric(reference, generated) -> bool:
    """True iff the reference token sequence occurs contiguously in the
    generation. Insensitive to anything after the matched span."""
    ref = list(reference)
    gen = list(generated)
    if not ref:
        raise UsageError("reference answer must be nonempty")
    n = len(ref)
    return any(gen[i:i + n] == ref for i in range(len(gen) - n + 1))


@dataclass(frozen=True)
class RagRates:
    """Outcome-table rates; a rate is None when its denominator is zero."""
    resilience: float | None
    boost: float | None
    retained: int      # baseline correct, augmented correct
    lost: int          # baseline correct, augmented wrong
    gained: int        # baseline wrong, augmented correct
    still_wrong: int   # baseline wrong, augmented wrong


def resilience_boost(baseline, augmented) -> RagRates:
    """baseline/augmented: aligned per-instance correctness flags."""
    base = [bool(x) for x in baseline]
    aug = [bool(x) for x in augmented]
    if len(base) != len(aug):
        raise UsageError("outcome lists must cover the same instances")
    retained = sum(1 for b, a in zip(base, aug) if b and a)
    lost = sum(1 for b, a in zip(base, aug) if b and not a)
    gained = sum(1 for b, a in zip(base, aug) if not b and a)
    still = sum(1 for b, a in zip(base, aug) if not b and not a)
    res = retained / (retained + lost) if (retained + lost) else None
    boo = gained / (gained + still) if (gained + still) else None
    return RagRates(res, boo, retained, lost, gained, still)


def cumulative_curve(per_instance: list[dict], schedule: list[int]) -> dict[int, float]:
    """per_instance: one {granularity: matched} mapping per instance.

    Returns cumulative Match per granularity: the fraction of instances
    matched at any granularity up to and including that one. Nondecreasing
    in the schedule order by construction.
    """
    if not per_instance:
        raise UsageError("cumulative curve needs at least one instance")
    order = sorted(schedule)
    out: dict[int, float] = {}
    for i, b in enumerate(order):
        upto = order[: i + 1]
        hits = sum(1 for row in per_instance if any(row.get(x, False) for x in upto))
        out[b] = hits / len(per_instance)
    return out
