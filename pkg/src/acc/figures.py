"""Figure rendering for benchmark reports.

Three PNGs next to the report: quality against prefill cost per mode, the
cumulative-match curve over fixed budgets, and where the adaptive run stops
by difficulty.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .bench import aggregate, fixed_match_by_instance, mode_names
from .metrics import cumulative_curve


def render_figures(records: list[dict], schedule, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [_match_vs_cost(records, schedule, out_dir / "match_vs_cost.png")]
    per_instance = fixed_match_by_instance(records)
    if per_instance:
        written.append(_cumulative(per_instance, schedule, records,
                                   out_dir / "cumulative_match.png"))
    adaptive = [r for r in records if r["mode"] == "adaptive"]
    if adaptive:
        written.append(_adaptive_stops(adaptive, schedule,
                                       out_dir / "adaptive_stops.png"))
    return written


def _match_vs_cost(records, schedule, path: Path) -> Path:
    aggs = aggregate(records)
    fig, ax = plt.subplots(figsize=(6, 4))
    for mode in mode_names(schedule):
        if mode not in aggs:
            continue
        a = aggs[mode]
        ax.scatter(a["mean_prefill_positions"], a["match_pct"], s=36)
        ax.annotate(mode, (a["mean_prefill_positions"], a["match_pct"]),
                    textcoords="offset points", xytext=(5, 4), fontsize=8)
    ax.set_xlabel("mean prefill positions (first-token cost proxy)")
    ax.set_ylabel("match %")
    ax.set_title("quality vs first-token cost")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _cumulative(per_instance, schedule, records, path: Path) -> Path:
    curve = cumulative_curve(per_instance, list(schedule))
    xs = sorted(curve)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, [100.0 * curve[b] for b in xs], marker="o",
            label="cumulative fixed-budget match")
    adaptive = [r for r in records if r["mode"] == "adaptive"]
    if adaptive:
        pct = 100.0 * sum(r["matched"] for r in adaptive) / len(adaptive)
        ax.axhline(pct, linestyle="--", color="tab:orange",
                   label="adaptive match")
    ax.set_xscale("log", base=2)
    ax.set_xticks(xs)
    ax.set_xticklabels([str(b) for b in xs])
    ax.set_xlabel("granularity b")
    ax.set_ylabel("match %")
    ax.set_title("cumulative match over granularities")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _adaptive_stops(adaptive, schedule, path: Path) -> Path:
    buckets = [str(b) for b in schedule] + ["fallback"]
    labels = sorted({r["difficulty"] for r in adaptive})
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / max(1, len(labels))
    for i, label in enumerate(labels):
        sub = [r for r in adaptive if r["difficulty"] == label]
        counts = []
        for bucket in buckets:
            if bucket == "fallback":
                counts.append(sum(r["fallback"] for r in sub))
            else:
                counts.append(sum(1 for r in sub
                                  if r["stop_granularity"] == int(bucket)))
        xs = [j + i * width for j in range(len(buckets))]
        ax.bar(xs, counts, width=width, label=label)
    ax.set_xticks([j + width * (len(labels) - 1) / 2 for j in range(len(buckets))])
    ax.set_xticklabels(buckets)
    ax.set_xlabel("stop granularity")
    ax.set_ylabel("instances")
    ax.set_title("where the adaptive loop stops, by difficulty")
    ax.legend(fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
