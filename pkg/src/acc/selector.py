"""Halting selector over decoder hidden states.

Decision tuples pair the decoder's last-layer hidden rows (instruction rows
then context rows, tagged by segment id) with a granularity and a
label: did generation at that context prefix match the reference answer. A
small bidirectional encoder pools the two segments, appends the normalized
granularity, and emits a stop probability. Training is REINFORCE over
stop/continue trajectories with a +1/-1 terminal reward; a supervised BCE
path exists as the ablation arm.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .compressor import CompressedSequence, check_schedule
from .corpus import RetrievalIndex, retrieve_topk
from .decoder import ANSWER, Decoder, render_prompt
from .errors import (CheckpointError, ConfigError, DataError, ShapeError,
                     UsageError)
from .metrics import match_metric
from .numerics import Adam, SeedStreams, Tensor, tensor
from .numerics.tensor import (add, add_bias, bce_with_logits, concat_cols,
                              concat_rows, embedding, gelu, logsigmoid,
                              matmul, mean_rows, mul, neg, rmsnorm, scale,
                              sigmoid, slice_cols, slice_rows, softmax,
                              sum_all, transpose)


@dataclass(frozen=True)
class SelectorConfig:
    encoder_layers: int = 4
    encoder_heads: int = 4
    projection_dim: int = 64
    mlp_layers: int = 2
    use_segment_embeddings: bool = True
    use_granularity_feature: bool = True
    decision_threshold: float = 0.5
    cap_instruction: int = 32
    cap_context: int = 64

    def __post_init__(self):
        if self.projection_dim % self.encoder_heads:
            raise ConfigError("projection_dim must divide evenly into heads")
        if not 0.0 < self.decision_threshold < 1.0:
            raise ConfigError("decision_threshold must be in (0, 1)")
        if self.mlp_layers < 1 or self.encoder_layers < 1:
            raise ConfigError("layer counts must be positive")
        if self.cap_instruction < 1 or self.cap_context < 1:
            raise ConfigError("row caps must be positive")


@dataclass
class DecisionTuple:
    instance_id: int
    b: int
    label: int
    hidden: np.ndarray       # (n, d_model) float32
    segment_ids: np.ndarray  # (n,) uint8: 0 instruction rows, 1 context rows

    def __post_init__(self):
        self.hidden = np.asarray(self.hidden, dtype=np.float32)
        self.segment_ids = np.asarray(self.segment_ids, dtype=np.uint8)
        n = self.hidden.shape[0]
        if self.hidden.ndim != 2 or n == 0 or self.segment_ids.shape != (n,):
            raise ShapeError(f"decision rows {self.hidden.shape} vs segment "
                             f"ids {self.segment_ids.shape}")
        if not set(np.unique(self.segment_ids)) <= {0, 1}:
            raise DataError("segment ids must be 0 or 1")
        if np.any(np.diff(self.segment_ids.astype(np.int8)) < 0):
            raise DataError("instruction rows must precede context rows")
        if self.label not in (0, 1):
            raise DataError(f"label must be 0/1, got {self.label}")


@dataclass
class Trajectory:
    tuples: list[DecisionTuple]
    actions: list[int]
    log_probs: list[Tensor]  # graph tensors, shape (1, 1) each
    reward: int
    stopped: bool

    @property
    def stop_index(self) -> int | None:
        return len(self.actions) - 1 if self.stopped else None


class Selector:
    """Config + named weights + the granularity schedule it was built for."""

    def __init__(self, config: SelectorConfig, params: dict[str, Tensor],
                 schedule, d_model: int):
        self.config = config
        self.params = params
        self.schedule = check_schedule(schedule)
        self.d_model = int(d_model)

    @classmethod
    def init(cls, config: SelectorConfig, streams: SeedStreams, d_model: int,
             schedule, dtype=np.float32) -> "Selector":
        rng = streams.stream("selector-init")
        p_dim, d = config.projection_dim, int(d_model)
        hidden = 4 * p_dim

        def normal(shape, std):
            return tensor(rng.normal(0.0, std, size=shape),
                          requires_grad=True, dtype=dtype)

        p: dict[str, Tensor] = {"proj": normal((d, p_dim), d ** -0.5)}
        p["seg_embed"] = normal((2, p_dim), 0.02)
        p["pos_embed"] = normal(
            (config.cap_instruction + config.cap_context, p_dim), 0.02)
        for i in range(config.encoder_layers):
            p[f"enc.{i}.attn.norm_g"] = tensor(np.ones(p_dim),
                                               requires_grad=True, dtype=dtype)
            for w in ("wq", "wk", "wv", "wo"):
                p[f"enc.{i}.attn.{w}"] = normal((p_dim, p_dim), p_dim ** -0.5)
            p[f"enc.{i}.mlp.norm_g"] = tensor(np.ones(p_dim),
                                              requires_grad=True, dtype=dtype)
            p[f"enc.{i}.mlp.w1"] = normal((p_dim, hidden), p_dim ** -0.5)
            p[f"enc.{i}.mlp.w2"] = normal((hidden, p_dim), hidden ** -0.5)
        p["final.norm_g"] = tensor(np.ones(p_dim), requires_grad=True,
                                   dtype=dtype)
        feat = 2 * p_dim + (1 if config.use_granularity_feature else 0)
        widths = [feat] + [p_dim] * (config.mlp_layers - 1) + [1]
        for j in range(config.mlp_layers):
            p[f"mlp.{j}.w"] = normal((widths[j], widths[j + 1]),
                                     widths[j] ** -0.5)
            p[f"mlp.{j}.b"] = tensor(np.zeros(widths[j + 1]),
                                     requires_grad=True, dtype=dtype)
        return cls(config, p, schedule, d)

    @property
    def dtype(self):
        return self.params["proj"].data.dtype

    def _capped_rows(self, tup: DecisionTuple) -> tuple[np.ndarray, int]:
        """Apply the row caps; returns (rows, instruction row count)."""
        cfg = self.config
        instr = tup.hidden[tup.segment_ids == 0][-cfg.cap_instruction:]
        ctx = tup.hidden[tup.segment_ids == 1][-cfg.cap_context:]
        if len(instr) == 0 or len(ctx) == 0:
            raise DataError("decision tuple needs rows in both segments")
        return np.concatenate([instr, ctx]), len(instr)

    def logit(self, tup: DecisionTuple) -> Tensor:
        """Stop logit, shape (1, 1); the graph reaches all selector params."""
        rows, n_i = self._capped_rows(tup)
        n = rows.shape[0]
        cfg = self.config
        x = matmul(Tensor(rows.astype(self.dtype)), self.params["proj"])
        if cfg.use_segment_embeddings:
            seg = np.array([0] * n_i + [1] * (n - n_i), dtype=np.int64)
            x = add(x, embedding(self.params["seg_embed"], seg))
        x = add(x, slice_rows(self.params["pos_embed"], 0, n))
        nh = cfg.encoder_heads
        hd = cfg.projection_dim // nh
        inv = float(hd) ** -0.5
        for i in range(cfg.encoder_layers):
            xn = rmsnorm(x, self.params[f"enc.{i}.attn.norm_g"])
            q = matmul(xn, self.params[f"enc.{i}.attn.wq"])
            k = matmul(xn, self.params[f"enc.{i}.attn.wk"])
            v = matmul(xn, self.params[f"enc.{i}.attn.wv"])
            heads = []
            for h in range(nh):
                qh = slice_cols(q, h * hd, (h + 1) * hd)
                kh = slice_cols(k, h * hd, (h + 1) * hd)
                vh = slice_cols(v, h * hd, (h + 1) * hd)
                att = softmax(scale(matmul(qh, transpose(kh)), inv), axis=-1)
                heads.append(matmul(att, vh))
            x = add(x, matmul(concat_cols(heads),
                              self.params[f"enc.{i}.attn.wo"]))
            xn2 = rmsnorm(x, self.params[f"enc.{i}.mlp.norm_g"])
            x = add(x, matmul(gelu(matmul(xn2, self.params[f"enc.{i}.mlp.w1"])),
                              self.params[f"enc.{i}.mlp.w2"]))
        x = rmsnorm(x, self.params["final.norm_g"])
        pooled = [mean_rows(slice_rows(x, 0, n_i)),
                  mean_rows(slice_rows(x, n_i, n))]
        if cfg.use_granularity_feature:
            pooled.append(Tensor(np.array([[tup.b / self.schedule[-1]]],
                                          dtype=self.dtype)))
        h = concat_cols(pooled)
        for j in range(cfg.mlp_layers):
            h = add_bias(matmul(h, self.params[f"mlp.{j}.w"]),
                         self.params[f"mlp.{j}.b"])
            if j < cfg.mlp_layers - 1:
                h = gelu(h)
        return h

    def forward(self, tup: DecisionTuple) -> float:
        """Sufficiency probability in (0, 1)."""
        return float(sigmoid(self.logit(tup)).data[0, 0])

    def decide(self, tup: DecisionTuple) -> bool:
        return self.forward(tup) >= self.config.decision_threshold

    def clone_state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            t.data = state[k].copy()

    # -- serialization

    def to_entries(self) -> dict[str, np.ndarray]:
        cfg = self.config
        out = {"selconf.encoder_layers": cfg.encoder_layers,
               "selconf.encoder_heads": cfg.encoder_heads,
               "selconf.projection_dim": cfg.projection_dim,
               "selconf.mlp_layers": cfg.mlp_layers,
               "selconf.use_segment_embeddings": int(cfg.use_segment_embeddings),
               "selconf.use_granularity_feature": int(cfg.use_granularity_feature),
               "selconf.decision_threshold": cfg.decision_threshold,
               "selconf.cap_instruction": cfg.cap_instruction,
               "selconf.cap_context": cfg.cap_context,
               "selconf.d_model": self.d_model}
        out = {k: np.asarray(float(v), dtype=np.float64) for k, v in out.items()}
        out["selconf.schedule"] = np.asarray(self.schedule, dtype=np.float64)
        for k, t in self.params.items():
            out[f"selector.{k}"] = t.data
        return out

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray]) -> "Selector":
        g = lambda k: entries[f"selconf.{k}"]
        cfg = SelectorConfig(
            encoder_layers=int(g("encoder_layers")),
            encoder_heads=int(g("encoder_heads")),
            projection_dim=int(g("projection_dim")),
            mlp_layers=int(g("mlp_layers")),
            use_segment_embeddings=bool(int(g("use_segment_embeddings"))),
            use_granularity_feature=bool(int(g("use_granularity_feature"))),
            decision_threshold=float(g("decision_threshold")),
            cap_instruction=int(g("cap_instruction")),
            cap_context=int(g("cap_context")))
        schedule = tuple(int(x) for x in entries["selconf.schedule"])
        params = {k[len("selector."):]: Tensor(np.array(v), requires_grad=True)
                  for k, v in entries.items() if k.startswith("selector.")}
        return cls(cfg, params, schedule, int(g("d_model")))


# ------------------------------------------------------------- trajectories

def trajectory_reward(actions, labels) -> int:
    """+1 iff the trajectory stopped on a granularity whose label is 1."""
    actions = [int(a) for a in actions]
    labels = [int(x) for x in labels]
    if not actions or len(actions) > len(labels):
        raise UsageError("action sequence length must be in [1, k]")
    if any(a not in (0, 1) for a in actions):
        raise UsageError("actions must be 0/1")
    if 1 in actions[:-1]:
        raise UsageError("trajectory must terminate at its first stop")
    if actions[-1] == 0 and len(actions) != len(labels):
        raise UsageError("a no-stop trajectory must traverse all granularities")
    if actions[-1] == 1 and labels[len(actions) - 1] == 1:
        return 1
    return -1


def _ordered_group(selector: Selector, tuples) -> list[DecisionTuple]:
    group = sorted(tuples, key=lambda t: t.b)
    if tuple(t.b for t in group) != selector.schedule:
        raise DataError(f"instance tuples cover granularities "
                        f"{[t.b for t in group]}, schedule is "
                        f"{list(selector.schedule)}")
    return group


def sample_trajectory(selector: Selector, tuples, rng) -> Trajectory:
    """Roll the stochastic stop/continue policy over one instance's tuples
    (ascending b). Keeps the log-probability graph for the update step."""
    group = _ordered_group(selector, tuples)
    actions: list[int] = []
    log_probs: list[Tensor] = []
    stopped = False
    for tup in group:
        z = selector.logit(tup)
        p = float(sigmoid(z).data[0, 0])
        a = 1 if rng.random() < p else 0
        actions.append(a)
        log_probs.append(logsigmoid(z) if a else logsigmoid(neg(z)))
        if a:
            stopped = True
            break
    reward = trajectory_reward(actions, [t.label for t in group])
    return Trajectory(group[: len(actions)], actions, log_probs, reward, stopped)


def reinforce_loss(trajectories, baseline: float = 0.0) -> Tensor:
    """-(1/N) sum_traj (R - baseline) * sum_t log pi(a_t|s_t)."""
    trajs = list(trajectories)
    if not trajs:
        raise UsageError("empty trajectory batch")
    total = None
    for tr in trajs:
        lp = tr.log_probs[0]
        for extra in tr.log_probs[1:]:
            lp = add(lp, extra)
        term = scale(lp, float(tr.reward) - baseline)
        total = term if total is None else add(total, term)
    return scale(sum_all(total), -1.0 / len(trajs))


def reinforce_update(selector: Selector, trajectories, opt: Adam,
                     baseline: float = 0.0) -> float:
    loss = reinforce_loss(trajectories, baseline)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return loss.item()


def supervised_loss(selector: Selector, tuples) -> Tensor:
    batch = list(tuples)
    if not batch:
        raise UsageError("empty decision batch")
    logits = concat_rows([selector.logit(t) for t in batch])
    targets = np.array([[t.label] for t in batch], dtype=selector.dtype)
    return bce_with_logits(logits, targets)


def supervised_update(selector: Selector, tuples, opt: Adam) -> float:
    loss = supervised_loss(selector, tuples)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return loss.item()


def sequence_accuracy(policy, decisions, schedule, threshold: float = 0.5
                      ) -> float:
    """Fraction of instances whose first thresholded "sufficient" lands on a
    correct granularity; never stopping scores the final granularity's label
    (the fallback consumes full context).

    policy: DecisionTuple -> probability. decisions: tuples for whole
    instances over the given schedule.
    """
    schedule = check_schedule(schedule)
    groups: dict[int, list[DecisionTuple]] = {}
    for t in decisions:
        groups.setdefault(t.instance_id, []).append(t)
    if not groups:
        raise UsageError("no decision tuples")
    correct = 0
    for iid, group in sorted(groups.items()):
        group = sorted(group, key=lambda t: t.b)
        if tuple(t.b for t in group) != schedule:
            raise DataError(f"instance {iid} does not cover the schedule")
        hit = None
        for tup in group:
            if policy(tup) >= threshold:
                hit = tup.label
                break
        correct += hit if hit is not None else group[-1].label
    return correct / len(groups)


# ------------------------------------------------------------- synthesis

def synthesize_decisions(decoder: Decoder, compressed: dict[int, CompressedSequence],
                         instances, index: RetrievalIndex, schedule, *,
                         top_k: int = 5, scope: str = "concat",
                         max_new: int = 8) -> list[DecisionTuple]:
    """Run the decoder at every granularity, label by Match against the gold
    answer, and keep the hidden rows the selector will read."""
    schedule = check_schedule(schedule)
    table = decoder.params["tok_embed"].data
    eng = decoder.engine()
    out: list[DecisionTuple] = []
    for inst in instances:
        ctx_ids = retrieve_topk(inst.query, index, top_k)
        parts = []
        for did in ctx_ids:
            if did not in compressed:
                raise DataError(f"no compressed embeddings for doc {did}")
            parts.append(compressed[did].embeddings)
        prompt = render_prompt(inst.query)
        base = eng.new_cache()
        _, prompt_hidden, base = eng.prefill(base, table[prompt])
        for b in schedule:
            rows = _prefix_rows_np(parts, b, scope)
            cache = base.fork()
            _, ctx_hidden, cache = eng.prefill(cache, rows)
            logits, _, cache = eng.prefill(cache, table[[ANSWER]])
            gen = eng.greedy(cache, logits, max_new)
            label = int(match_metric(inst.answer, gen))
            out.append(DecisionTuple(
                inst.instance_id, b, label,
                np.concatenate([prompt_hidden, ctx_hidden]),
                np.array([0] * len(prompt) + [1] * rows.shape[0],
                         dtype=np.uint8)))
    return out


def _prefix_rows_np(parts: list[np.ndarray], b: int, scope: str) -> np.ndarray:
    if scope == "per_doc":
        return np.concatenate([p[: min(b, p.shape[0])] for p in parts])
    whole = np.concatenate(parts) if len(parts) > 1 else parts[0]
    return whole[: min(b, whole.shape[0])]


# ------------------------------------------------------------- training loop

def train_selector(method: str, train_decisions, test_decisions,
                   config: SelectorConfig, schedule, d_model: int, *,
                   seed: int, epochs: int = 50, lr: float = 1e-3,
                   batch: int = 8, use_baseline: bool = False
                   ) -> tuple[Selector, list[dict]]:
    """Train by REINFORCE or supervised BCE; keep the epoch checkpoint with
    the best test sequence accuracy."""
    if method not in ("rl", "supervised"):
        raise UsageError(f"unknown method {method!r}")
    streams = SeedStreams(seed)
    selector = Selector.init(config, streams, d_model, schedule)
    opt = Adam(selector.params, lr=lr)
    rng = streams.stream(f"selector-{method}")
    groups: dict[int, list[DecisionTuple]] = {}
    for t in train_decisions:
        groups.setdefault(t.instance_id, []).append(t)
    group_list = [sorted(g, key=lambda t: t.b) for _, g in sorted(groups.items())]
    flat = sorted(train_decisions, key=lambda t: (t.instance_id, t.b))
    log: list[dict] = []
    best_acc, best_state = -1.0, selector.clone_state()
    baseline = 0.0
    for epoch in range(1, epochs + 1):
        losses = []
        if method == "rl":
            order = rng.permutation(len(group_list))
            for s in range(0, len(order), batch):
                idx = order[s:s + batch]
                trajs = [sample_trajectory(selector, group_list[int(i)], rng)
                         for i in idx]
                if use_baseline:
                    mean_r = float(np.mean([t.reward for t in trajs]))
                    baseline = 0.9 * baseline + 0.1 * mean_r
                losses.append(reinforce_update(
                    selector, trajs, opt,
                    baseline if use_baseline else 0.0))
        else:
            order = rng.permutation(len(flat))
            for s in range(0, len(order), batch):
                tuples = [flat[int(i)] for i in order[s:s + batch]]
                losses.append(supervised_update(selector, tuples, opt))
        acc = sequence_accuracy(selector.forward, test_decisions, schedule,
                                config.decision_threshold)
        log.append({"epoch": epoch, "loss": float(np.mean(losses)),
                    "test_sequence_accuracy": acc})
        if acc > best_acc:
            best_acc = acc
            best_state = selector.clone_state()
    selector.load_state(best_state)
    log.append({"best_test_sequence_accuracy": best_acc})
    return selector, log


# ------------------------------------------------------------- ACCD container

_ACCD_MAGIC = b"ACCD"
_ACCD_VERSION = 1


def write_decisions(path, decisions, schedule, d_model: int) -> None:
    decisions = list(decisions)
    if not decisions:
        raise UsageError("nothing to write")
    schedule = check_schedule(schedule)
    with open(path, "wb") as fh:
        fh.write(_ACCD_MAGIC)
        fh.write(struct.pack("<III", _ACCD_VERSION, d_model, len(schedule)))
        fh.write(struct.pack(f"<{len(schedule)}I", *schedule))
        fh.write(struct.pack("<Q", len(decisions)))
        for t in decisions:
            rows = np.ascontiguousarray(t.hidden, dtype=np.float32)
            if rows.shape[1] != d_model:
                raise UsageError(f"tuple rows have width {rows.shape[1]}, "
                                 f"want {d_model}")
            fh.write(struct.pack("<QIBI", t.instance_id, t.b, t.label,
                                 rows.shape[0]))
            for r in range(rows.shape[0]):
                fh.write(struct.pack("<B", int(t.segment_ids[r])))
                fh.write(rows[r].tobytes())


def read_decisions(path) -> tuple[list[DecisionTuple], tuple[int, ...]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise CheckpointError("truncated decision file")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    if raw[:4] != _ACCD_MAGIC:
        raise CheckpointError("not a decision dataset file")
    off = 4
    version, d_model, sched_len = take("<III")
    if version != _ACCD_VERSION:
        raise CheckpointError(f"unsupported decision-file version {version}")
    schedule = take(f"<{sched_len}I")
    (count,) = take("<Q")
    out: list[DecisionTuple] = []
    for _ in range(count):
        iid, b, label, n = take("<QIBI")
        segs = np.empty(n, dtype=np.uint8)
        rows = np.empty((n, d_model), dtype=np.float32)
        for r in range(n):
            (segs[r],) = take("<B")
            nbytes = d_model * 4
            if off + nbytes > len(raw):
                raise CheckpointError("truncated decision file")
            rows[r] = np.frombuffer(raw, dtype="<f4", count=d_model, offset=off)
            off += nbytes
        out.append(DecisionTuple(iid, b, label, rows, segs))
    if off != len(raw):
        raise CheckpointError("trailing bytes after last record")
    return out, tuple(int(x) for x in schedule)
