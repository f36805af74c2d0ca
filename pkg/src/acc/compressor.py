"""Document compressor over the frozen decoder.

A document's tokens get m = max(1, floor(L/tau)) compression-slot tokens
appended; the adapted decoder's last-layer hidden rows at those positions are
the document's compressed embeddings. Only the adapter factors and the
compression-slot input embeddings train. Two stages: pretraining alternates
auto-encoding (reconstruct the document from an embedding prefix) with
continuation modeling; finetuning distills the raw-text teacher into the
compressed-input student via forward KL. Granularity b always means a prefix
length of the compressed sequence.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass

import numpy as np

from .corpus import RetrievalIndex, retrieve_topk
from .decoder import (ANSWER, EOS, RECON, AdapterWeights, Decoder,
                      render_prompt, strip_pad)
from .errors import (CapacityError, CheckpointError, ConfigError,
                     GranularityError, UsageError)
from .numerics import SeedStreams, Tensor
from .numerics.optim import Adam
from .numerics.tensor import (concat_rows, cross_entropy, kl_divergence,
                              scale, slice_rows)

# headline schedules; index matches the hierarchy-depth naming used in docs
SCHEDULES = {
    "G0": (32,),
    "G1": (1, 32),
    "G2": (1, 2, 8, 32),
    "G3": (1, 2, 4, 8, 16, 32),
}


def check_schedule(schedule) -> tuple[int, ...]:
    b = tuple(int(x) for x in schedule)
    if not b:
        raise ConfigError("granularity schedule must be nonempty")
    if any(x < 1 for x in b) or any(b[i] >= b[i + 1] for i in range(len(b) - 1)):
        raise ConfigError(f"granularities must be strictly increasing, got {b}")
    return b


@dataclass(frozen=True)
class CompressionConfig:
    tau: int = 4
    granularities: tuple[int, ...] = (1, 32)
    task_mix: tuple[float, float] = (0.5, 0.5)  # autoencode, continuation
    distill_temperature: float = 1.0
    top_k: int = 5
    granularity_scope: str = "concat"

    def __post_init__(self):
        if self.tau < 1:
            raise ConfigError("tau must be >= 1")
        object.__setattr__(self, "granularities",
                           check_schedule(self.granularities))
        if len(self.task_mix) != 2 or min(self.task_mix) < 0 or sum(self.task_mix) <= 0:
            raise ConfigError("task_mix needs two nonnegative weights")
        if self.distill_temperature <= 0:
            raise ConfigError("distill_temperature must be positive")
        if self.granularity_scope not in ("concat", "per_doc"):
            raise ConfigError("granularity_scope is 'concat' or 'per_doc'")


@dataclass(frozen=True)
class CompressedSequence:
    doc_id: int
    embeddings: np.ndarray  # (m, d_model) float32
    tau: int
    version: str = ""  # compressor version hash; empty when read from file


class Compressor:
    """Binds a frozen decoder, its adapters, and a compression config."""

    def __init__(self, decoder: Decoder, adapters: AdapterWeights,
                 config: CompressionConfig):
        self.decoder = decoder
        self.adapters = adapters
        self.config = config

    def m_for(self, length: int) -> int:
        return max(1, length // self.config.tau)

    # -- offline path (no grad)

    def compress(self, doc) -> CompressedSequence:
        """Query-independent embeddings for one document."""
        rows = self.compress_tokens(doc.tokens)
        return CompressedSequence(doc.doc_id, rows, self.config.tau,
                                  self.adapters.version_hash())

    def compress_tokens(self, tokens) -> np.ndarray:
        tokens = list(tokens)
        L = len(tokens)
        if L < 1:
            raise UsageError("cannot compress an empty document")
        m = self.m_for(L)
        cfg = self.decoder.config
        if L + m > cfg.max_positions:
            raise CapacityError(f"doc of {L} tokens + {m} slots exceeds "
                                f"max_positions {cfg.max_positions}")
        cfg.comp_ids(m)  # raises if the reserved block is too small
        emb = np.concatenate([
            self.decoder.params["tok_embed"].data[tokens],
            self.adapters.params["adapter.comp_embed"].data[:m]])
        eng = self.decoder.engine(self.adapters)
        _, hidden, _ = eng.prefill(eng.new_cache(), emb)
        return hidden[L:]

    # -- training path (autodiff graph; gradients reach the adapters only)

    def compress_graph(self, tokens) -> Tensor:
        tokens = list(tokens)
        L = len(tokens)
        if L < 1:
            raise UsageError("cannot compress an empty document")
        m = self.m_for(L)
        self.decoder.config.comp_ids(m)
        emb = concat_rows([self.decoder.embed(tokens),
                           self.adapters.comp_rows(m)])
        _, hidden = self.decoder.forward(emb, adapters=self.adapters)
        return slice_rows(hidden, L, L + m)

    def autoencode_loss(self, tokens, b: int) -> Tensor:
        """NLL of reconstructing the document from its first b embeddings
        plus the reconstruction-instruction token."""
        tokens = list(tokens)
        e = self.compress_graph(tokens)
        if b < 1 or b > e.shape[0]:
            raise GranularityError(f"granularity {b} outside [1, {e.shape[0]}]")
        L = len(tokens)
        dec_in = concat_rows([slice_rows(e, 0, b),
                              self.decoder.embed([RECON] + tokens[:-1])])
        logits, _ = self.decoder.forward(dec_in)
        return cross_entropy(slice_rows(logits, b, b + L), tokens)

    def reconstruction_accuracy(self, tokens, b: int) -> float:
        """Greedy token accuracy of the teacher-forced reconstruction."""
        tokens = list(tokens)
        e = self.compress_graph(tokens)
        dec_in = concat_rows([slice_rows(e, 0, b),
                              self.decoder.embed([RECON] + tokens[:-1])])
        logits, _ = self.decoder.forward(dec_in)
        pred = np.argmax(logits.data[b:b + len(tokens)], axis=1)
        return float(np.mean(pred == np.array(tokens)))

    def lm_loss(self, tokens, split_point: int, b: int) -> Tensor:
        """NLL of the continuation given the compressed prefix segment."""
        tokens = list(tokens)
        L = len(tokens)
        if not 1 <= split_point < L:
            raise UsageError(f"split_point {split_point} outside [1, {L})")
        prefix, cont = tokens[:split_point], tokens[split_point:]
        e = self.compress_graph(prefix)
        if b < 1 or b > e.shape[0]:
            raise GranularityError(f"granularity {b} outside [1, {e.shape[0]}]")
        parts = [slice_rows(e, 0, b)]
        if len(cont) > 1:
            parts.append(self.decoder.embed(cont[:-1]))
        dec_in = concat_rows(parts)
        logits, _ = self.decoder.forward(dec_in)
        return cross_entropy(slice_rows(logits, b - 1, b - 1 + len(cont)), cont)

    def selfdistill_loss(self, query, ctx_token_lists, response, b: int,
                         teacher_logits: np.ndarray | None = None) -> Tensor:
        """Forward KL from the raw-text teacher to the compressed-input
        student over the response positions. The teacher runs the base
        decoder on the stripped raw documents and is detached; pass its
        logits back in to reuse them across steps."""
        response = list(response)
        if not response:
            raise UsageError("response must be nonempty")
        if teacher_logits is None:
            teacher_logits = self.teacher_logits(query, ctx_token_lists, response)
        e_parts = [self.compress_graph(toks) for toks in ctx_token_lists]
        e_c = prefix_rows_graph(e_parts, b, self.config.granularity_scope)
        prompt = render_prompt(query)
        dec_in = concat_rows([self.decoder.embed(prompt), e_c,
                              self.decoder.embed([ANSWER] + response[:-1])])
        logits, _ = self.decoder.forward(dec_in)
        start = len(prompt) + e_c.shape[0]
        student = slice_rows(logits, start, start + len(response))
        t = self.config.distill_temperature
        return kl_divergence(Tensor((teacher_logits / t).astype(student.dtype)),
                             scale(student, 1.0 / t))

    def teacher_logits(self, query, ctx_token_lists, response) -> np.ndarray:
        """Base-decoder logits over response positions with raw-text context."""
        response = list(response)
        seq = render_prompt(query)
        for toks in ctx_token_lists:
            seq.extend(strip_pad(toks))
        seq += [ANSWER] + response[:-1]
        ans_pos = len(seq) - len(response)
        eng = self.decoder.engine()
        _, hidden, _ = eng.prefill(eng.new_cache(),
                                   self.decoder.params["tok_embed"].data[seq])
        return hidden[ans_pos:] @ self.decoder.params["lm_head"].data

    def multigranularity_loss(self, task: str, schedule, **task_args) -> Tensor:
        """Sum over the schedule of the per-granularity task loss; decomposes
        exactly into the singleton losses. Per-granularity errors propagate."""
        fns = {"autoencode": self.autoencode_loss,
               "continuation": self.lm_loss,
               "distill": self.selfdistill_loss}
        if task not in fns:
            raise UsageError(f"unknown task {task!r}")
        total = None
        for b in check_schedule(schedule):
            term = fns[task](b=b, **task_args)
            total = term if total is None else total + term
        return total


def prefix_rows_graph(parts: list[Tensor], b: int, scope: str) -> Tensor:
    """Granularity-b prefix of a compressed context (graph tensors)."""
    if scope == "per_doc":
        return concat_rows([slice_rows(p, 0, min(b, p.shape[0])) for p in parts])
    whole = concat_rows(parts) if len(parts) > 1 else parts[0]
    if b < 1 or b > whole.shape[0]:
        raise GranularityError(f"granularity {b} outside [1, {whole.shape[0]}]")
    return slice_rows(whole, 0, b)


# ------------------------------------------------------------- training

def train_compressor(stage: str, decoder: Decoder, corpus, comp_config:
                     CompressionConfig, *, seed: int, steps: int,
                     lr: float = 1e-3, adapters: AdapterWeights | None = None,
                     from_scratch: bool = False, log_path=None
                     ) -> tuple[AdapterWeights, list[dict]]:
    """One training stage over the adapter parameters; decoder stays frozen.

    pretrain ignores any passed adapters and starts fresh. finetune requires
    pretrained adapters unless from_scratch=True (the ablation arm), in which
    case it starts from a fresh random adapter.
    """
    if stage not in ("pretrain", "finetune"):
        raise UsageError(f"unknown stage {stage!r}")
    streams = SeedStreams(seed)
    if stage == "pretrain":
        adapters = AdapterWeights.init(decoder.config, streams)
    elif adapters is None:
        if not from_scratch:
            raise UsageError("finetune needs pretrained adapters "
                             "(or from_scratch=True for the ablation)")
        adapters = AdapterWeights.init(decoder.config, streams)
    comp = Compressor(decoder, adapters, comp_config)
    opt = Adam(adapters.params, lr=lr)
    rng = streams.stream(f"compressor-{stage}")
    log: list[dict] = []
    t0 = time.perf_counter()

    if stage == "pretrain":
        docs = [d for d in corpus.documents
                if d.doc_id in corpus.pretrain_doc_ids]
        if not docs:
            raise UsageError("no pretraining documents available")
        w_ae, w_lm = comp_config.task_mix
        p_ae = w_ae / (w_ae + w_lm)
        for step in range(1, steps + 1):
            doc = docs[int(rng.integers(len(docs)))]
            b = int(comp_config.granularities[
                int(rng.integers(len(comp_config.granularities)))])
            L = len(doc.tokens)
            if rng.random() < p_ae:
                task = "autoencode"
                b_eff = min(b, comp.m_for(L))
                loss = comp.autoencode_loss(doc.tokens, b_eff)
            else:
                task = "continuation"
                lo, hi = max(1, L // 4), max(2, (3 * L) // 4)
                split = int(rng.integers(lo, hi + 1))
                b_eff = min(b, comp.m_for(split))
                loss = comp.lm_loss(doc.tokens, split, b_eff)
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.append({"step": step, "task": task, "granularity": b_eff,
                        "loss": loss.item()})
    else:
        instances = corpus.split("train")
        if not instances:
            raise UsageError("no training instances available")
        index = RetrievalIndex(corpus.documents, decoder.config.vocab_size)
        by_id = corpus.docs_by_id()
        k = min(comp_config.top_k, len(corpus.documents))
        teacher_cache: dict[int, tuple[list[int], np.ndarray]] = {}
        for step in range(1, steps + 1):
            inst = instances[int(rng.integers(len(instances)))]
            b = int(comp_config.granularities[
                int(rng.integers(len(comp_config.granularities)))])
            cached = teacher_cache.get(inst.instance_id)
            response = list(inst.answer) + [EOS]
            if cached is None:
                ctx_ids = retrieve_topk(inst.query, index, k)
                ctx = [by_id[i].tokens for i in ctx_ids]
                t_logits = comp.teacher_logits(inst.query, ctx, response)
                teacher_cache[inst.instance_id] = (ctx_ids, t_logits)
            else:
                ctx_ids, t_logits = cached
                ctx = [by_id[i].tokens for i in ctx_ids]
            total_m = sum(comp.m_for(len(t)) for t in ctx)
            b_eff = min(b, total_m)
            loss = comp.selfdistill_loss(inst.query, ctx, response, b_eff,
                                         teacher_logits=t_logits)
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.append({"step": step, "task": "distill", "granularity": b_eff,
                        "loss": loss.item()})

    log.append({"stage": stage, "steps": steps,
                "elapsed_s": round(time.perf_counter() - t0, 2)})
    if log_path is not None:
        with open(log_path, "w") as fh:
            for rec in log:
                fh.write(json.dumps(rec) + "\n")
    return adapters, log


# ------------------------------------------------------------- ACCE container

_ACCE_MAGIC = b"ACCE"
_ACCE_VERSION = 1


def write_compressed(path, sequences: list[CompressedSequence],
                     d_model: int) -> None:
    seqs = list(sequences)
    if not seqs:
        raise UsageError("nothing to write")
    taus = {s.tau for s in seqs}
    if len(taus) != 1:
        raise UsageError(f"mixed tau values {sorted(taus)}")
    with open(path, "wb") as fh:
        fh.write(_ACCE_MAGIC)
        fh.write(struct.pack("<III", _ACCE_VERSION, seqs[0].tau, d_model))
        fh.write(struct.pack("<Q", len(seqs)))
        for s in seqs:
            rows = np.ascontiguousarray(s.embeddings, dtype=np.float32)
            if rows.ndim != 2 or rows.shape[1] != d_model:
                raise UsageError(f"doc {s.doc_id}: embeddings shaped "
                                 f"{rows.shape}, want (m, {d_model})")
            fh.write(struct.pack("<QI", s.doc_id, rows.shape[0]))
            fh.write(rows.tobytes())


def read_compressed(path) -> dict[int, CompressedSequence]:
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise CheckpointError("truncated compressed-corpus file")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    if raw[:4] != _ACCE_MAGIC:
        raise CheckpointError("not a compressed-corpus file")
    off = 4
    version, tau, d_model = take("<III")
    if version != _ACCE_VERSION:
        raise CheckpointError(f"unsupported compressed-corpus version {version}")
    (count,) = take("<Q")
    out: dict[int, CompressedSequence] = {}
    for _ in range(count):
        doc_id, m = take("<QI")
        nbytes = m * d_model * 4
        if off + nbytes > len(raw):
            raise CheckpointError("truncated compressed-corpus file")
        rows = np.frombuffer(raw, dtype="<f4", count=m * d_model,
                             offset=off).reshape(m, d_model).copy()
        off += nbytes
        if doc_id in out:
            raise CheckpointError(f"duplicate doc_id {doc_id}")
        out[doc_id] = CompressedSequence(doc_id, rows, tau)
    if off != len(raw):
        raise CheckpointError("trailing bytes after last document")
    return out
