"""Toy causal decoder.

Pre-norm transformer over embedding rows (token embeddings and compressed
embeddings are interchangeable inputs): RMSNorm, bias-free linears, GELU MLP,
learned absolute positions, untied LM head. Two execution paths share the
same numpy helpers: an autodiff graph forward for training, and a no-grad
KV-cache engine for prefill/greedy decoding. Low-rank adapters on the
attention projections (plus the compression-slot input embeddings) are the
only trainable state once the base weights are frozen.
"""

from __future__ import annotations

import hashlib
import json
import time
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (CacheInvalidError, CapacityError, ConfigError,
                     UsageError)
from .numerics import Adam, SeedStreams, Tensor, tensor
from .numerics.tensor import (_gelu_np, _rmsnorm_np, _softmax_np, add,
                              concat_cols, cross_entropy, embedding, gelu,
                              matmul, rmsnorm, scale, slice_cols, slice_rows,
                              softmax, transpose)

# reserved token ids (corpus alphabet starts above these)
PAD, BOS, EOS, SEP, ASK, ANSWER, RECON = 0, 1, 2, 3, 4, 5, 6
N_SPECIALS = 7

_MASK_VAL = -1e9  # finite stand-in for -inf; underflows to exact 0 after softmax


@dataclass
class DecoderConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_positions: int = 768
    comp_base: int = 192   # first compression-token id
    comp_count: int = 64   # contiguous block size
    local_heads: int = 0   # heads given a distance penalty (0 disables)

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must divide evenly into heads")
        reserved = list(range(N_SPECIALS)) + [self.comp_base, self.comp_base + self.comp_count - 1]
        if min(reserved) < 0 or max(reserved) >= self.vocab_size:
            raise ConfigError("reserved ids must fit the vocabulary")
        if self.comp_base < N_SPECIALS:
            raise ConfigError("compression block overlaps special ids")
        if not -1 <= self.local_heads <= self.n_heads:
            raise ConfigError("local_heads must be -1 or within the head count")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_local_heads(self) -> int:
        return self.n_heads if self.local_heads < 0 else self.local_heads

    def comp_ids(self, m: int) -> list[int]:
        if m > self.comp_count:
            raise CapacityError(f"{m} compression slots exceed block of {self.comp_count}")
        return list(range(self.comp_base, self.comp_base + m))


def strip_pad(tokens) -> list[int]:
    """Drop trailing PAD ids only; interior padding is content."""
    toks = list(tokens)
    while toks and toks[-1] == PAD:
        toks.pop()
    return toks


def render_prompt(query_tokens) -> list[int]:
    return [BOS, ASK, *query_tokens, SEP]


# ------------------------------------------------------------- parameters

def _param_names(cfg: DecoderConfig) -> list[str]:
    names = ["tok_embed", "pos_embed"]
    for i in range(cfg.n_layers):
        names += [f"layers.{i}.attn.norm_g", f"layers.{i}.attn.wq",
                  f"layers.{i}.attn.wk", f"layers.{i}.attn.wv",
                  f"layers.{i}.attn.wo", f"layers.{i}.mlp.norm_g",
                  f"layers.{i}.mlp.w1", f"layers.{i}.mlp.w2"]
    names += ["final.norm_g", "lm_head"]
    return names


class Decoder:
    """Config + named weight tensors; frozen flag guards the base model."""

    def __init__(self, config: DecoderConfig, params: dict[str, Tensor],
                 frozen: bool = False):
        self.config = config
        self.params = params
        self.frozen = bool(frozen)
        missing = [n for n in _param_names(config) if n not in params]
        if missing:
            raise UsageError(f"decoder params missing {missing[:3]}...")

    # -- lifecycle

    @classmethod
    def init(cls, config: DecoderConfig, streams: SeedStreams,
             dtype=np.float32) -> "Decoder":
        rng = streams.stream("decoder-init")
        d, hidden = config.d_model, 4 * config.d_model
        p: dict[str, Tensor] = {}

        def normal(shape, std):
            return tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=dtype)

        p["tok_embed"] = normal((config.vocab_size, d), 0.02)
        p["pos_embed"] = normal((config.max_positions, d), 0.02)
        for i in range(config.n_layers):
            p[f"layers.{i}.attn.norm_g"] = tensor(np.ones(d), requires_grad=True, dtype=dtype)
            for w in ("wq", "wk", "wv", "wo"):
                p[f"layers.{i}.attn.{w}"] = normal((d, d), d ** -0.5)
            p[f"layers.{i}.mlp.norm_g"] = tensor(np.ones(d), requires_grad=True, dtype=dtype)
            p[f"layers.{i}.mlp.w1"] = normal((d, hidden), d ** -0.5)
            p[f"layers.{i}.mlp.w2"] = normal((hidden, d), hidden ** -0.5)
        p["final.norm_g"] = tensor(np.ones(d), requires_grad=True, dtype=dtype)
        p["lm_head"] = normal((d, config.vocab_size), d ** -0.5)
        return cls(config, p)

    def freeze(self) -> None:
        self.frozen = True
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            t = self.params[name]
            h.update(name.encode())
            h.update(str(t.data.dtype).encode())
            h.update(str(t.data.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    @property
    def dtype(self):
        return self.params["tok_embed"].data.dtype

    # -- serialization (ACCW container)

    def to_entries(self) -> dict[str, np.ndarray]:
        cfg = self.config
        out: dict[str, np.ndarray] = {}
        for k, v in (("vocab_size", cfg.vocab_size), ("d_model", cfg.d_model),
                     ("n_layers", cfg.n_layers), ("n_heads", cfg.n_heads),
                     ("max_positions", cfg.max_positions),
                     ("comp_base", cfg.comp_base), ("comp_count", cfg.comp_count),
                     ("local_heads", cfg.local_heads),
                     ("frozen", int(self.frozen))):
            out[f"config.{k}"] = np.asarray(float(v), dtype=np.float64)
        for name, t in self.params.items():
            out[f"decoder.{name}"] = t.data
        return out

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray]) -> "Decoder":
        cfg = DecoderConfig(
            vocab_size=int(entries["config.vocab_size"]),
            d_model=int(entries["config.d_model"]),
            n_layers=int(entries["config.n_layers"]),
            n_heads=int(entries["config.n_heads"]),
            max_positions=int(entries["config.max_positions"]),
            comp_base=int(entries["config.comp_base"]),
            comp_count=int(entries["config.comp_count"]),
            local_heads=int(entries["config.local_heads"]))
        params = {k[len("decoder."):]: Tensor(np.array(v))
                  for k, v in entries.items() if k.startswith("decoder.")}
        return cls(cfg, params, frozen=bool(int(entries["config.frozen"])))

    # -- embedding / graph forward (training path)

    def embed(self, tokens) -> Tensor:
        """Token ids -> rows of the embedding table (no positions added)."""
        return embedding(self.params["tok_embed"], np.asarray(tokens, dtype=np.int64))

    def forward(self, emb: Tensor, adapters: "AdapterWeights | None" = None,
                pos_offset: int = 0) -> tuple[Tensor, Tensor]:
        """emb (T, d) -> (logits (T, V), last-layer hidden (T, d)).

        Builds an autodiff graph; adapters contribute iff given and enabled.
        Causal mask with per-head distance penalties always applied; learned
        absolute positions are added on top, starting at pos_offset (training
        at varied offsets keeps content knowledge position-free).
        """
        T = emb.shape[0]
        if T + pos_offset > self.config.max_positions:
            raise CapacityError(f"input of {T} rows at offset {pos_offset} "
                                f"exceeds max_positions "
                                f"{self.config.max_positions}")
        use_adapter = adapters is not None and adapters.enabled
        p = self.params
        x = add(emb, slice_rows(p["pos_embed"], pos_offset, pos_offset + T))
        nh, hd = self.config.n_heads, self.config.head_dim
        masks = [Tensor(_attn_bias(T, T, 0, h, nh,
                                   self.config.n_local_heads, x.data.dtype))
                 for h in range(nh)]
        inv = float(hd) ** -0.5
        for i in range(self.config.n_layers):
            xn = rmsnorm(x, p[f"layers.{i}.attn.norm_g"])
            proj = {}
            for wqn in ("wq", "wk", "wv"):
                out = matmul(xn, p[f"layers.{i}.attn.{wqn}"])
                if use_adapter:
                    out = add(out, adapters.delta(xn, i, wqn[1], matmul, scale, add))
                proj[wqn] = out
            heads = []
            for h in range(nh):
                qh = slice_cols(proj["wq"], h * hd, (h + 1) * hd)
                kh = slice_cols(proj["wk"], h * hd, (h + 1) * hd)
                vh = slice_cols(proj["wv"], h * hd, (h + 1) * hd)
                scores = add(scale(matmul(qh, transpose(kh)), inv), masks[h])
                heads.append(matmul(softmax(scores, axis=-1), vh))
            ctx = concat_cols(heads)
            attn = matmul(ctx, p[f"layers.{i}.attn.wo"])
            if use_adapter:
                attn = add(attn, adapters.delta(ctx, i, "o", matmul, scale, add))
            x = add(x, attn)
            xn2 = rmsnorm(x, p[f"layers.{i}.mlp.norm_g"])
            x = add(x, matmul(gelu(matmul(xn2, p[f"layers.{i}.mlp.w1"])),
                              p[f"layers.{i}.mlp.w2"]))
        hidden = rmsnorm(x, p["final.norm_g"])
        logits = matmul(hidden, p["lm_head"])
        return logits, hidden

    # -- convenience wrappers over the engine

    def engine(self, adapters: "AdapterWeights | None" = None) -> "Engine":
        return Engine(self, adapters)

    def generate_greedy(self, emb, max_new: int,
                        adapters: "AdapterWeights | None" = None) -> list[int]:
        """Greedy continuation of an embedding-row prefix; EOS excluded."""
        eng = self.engine(adapters)
        cache = eng.new_cache()
        logits, _, cache = eng.prefill(
            cache, emb.data if isinstance(emb, Tensor) else emb)
        return eng.greedy(cache, logits, max_new)


def _causal_mask(t_q: int, t_k: int, offset: int, dtype) -> np.ndarray:
    """(t_q, t_k): 0 where key pos <= offset+row, else a large negative."""
    q_pos = np.arange(offset, offset + t_q)[:, None]
    k_pos = np.arange(t_k)[None, :]
    return np.where(k_pos <= q_pos, 0.0, _MASK_VAL).astype(dtype)


def _attn_bias(t_q: int, t_k: int, offset: int, head: int, n_heads: int,
               n_local: int, dtype) -> np.ndarray:
    """Causal mask plus a fixed linear distance penalty on the first n_local
    heads; the rest stay purely content-addressed.

    Distance-relative scores let position-relative circuits (previous-token,
    match-and-copy) form without per-position learning, which absolute
    position embeddings alone make painfully slow. The unbiased heads keep
    long-range reads (a compressed prefix far behind the answer position) as
    cheap as they are without any penalty.
    """
    q_pos = np.arange(offset, offset + t_q)[:, None]
    k_pos = np.arange(t_k)[None, :]
    slope = 2.0 ** (-8.0 * (head + 1) / n_heads) if head < n_local else 0.0
    bias = slope * (k_pos - q_pos).astype(np.float64)
    return np.where(k_pos <= q_pos, bias, _MASK_VAL).astype(dtype)


# ------------------------------------------------------------- adapters

_ADAPTER_TARGETS = ("q", "k", "v", "o")


class AdapterWeights:
    """Low-rank factors on attention projections + compression-slot input
    embeddings. These are the only parameters the compressor training moves;
    with every second factor zero the adapted forward equals the base one."""

    def __init__(self, config: DecoderConfig, rank: int, alpha: float,
                 params: dict[str, Tensor], enabled: bool = True):
        self.config = config
        self.rank = int(rank)
        self.alpha = float(alpha)
        self.params = params
        self.enabled = bool(enabled)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def init(cls, config: DecoderConfig, streams: SeedStreams, rank: int = 8,
             alpha: float = 8.0, dtype=np.float32) -> "AdapterWeights":
        rng = streams.stream("adapter-init")
        d = config.d_model
        p: dict[str, Tensor] = {}
        for i in range(config.n_layers):
            for t in _ADAPTER_TARGETS:
                p[f"adapter.{i}.{t}.a"] = tensor(rng.normal(0.0, rank ** -0.5, (d, rank)),
                                                 requires_grad=True, dtype=dtype)
                p[f"adapter.{i}.{t}.b"] = tensor(np.zeros((rank, d)),
                                                 requires_grad=True, dtype=dtype)
        p["adapter.comp_embed"] = tensor(rng.normal(0.0, 0.02, (config.comp_count, d)),
                                         requires_grad=True, dtype=dtype)
        return cls(config, rank, alpha, p)

    def delta(self, xn: Tensor, layer: int, target: str, mm, sc, _add) -> Tensor:
        a = self.params[f"adapter.{layer}.{target}.a"]
        b = self.params[f"adapter.{layer}.{target}.b"]
        return sc(mm(mm(xn, a), b), self.scaling)

    def delta_np(self, xn: np.ndarray, layer: int, target: str) -> np.ndarray:
        a = self.params[f"adapter.{layer}.{target}.a"].data
        b = self.params[f"adapter.{layer}.{target}.b"].data
        return ((xn @ a) @ b) * xn.dtype.type(self.scaling)

    def comp_rows(self, m: int) -> Tensor:
        """First m compression-slot input embeddings (graph view)."""
        if m > self.config.comp_count:
            raise CapacityError(f"{m} compression slots exceed block of "
                                f"{self.config.comp_count}")
        return slice_rows(self.params["adapter.comp_embed"], 0, m)

    def version_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()[:16]

    def to_entries(self) -> dict[str, np.ndarray]:
        out = {"adapter_meta.rank": np.asarray(float(self.rank), dtype=np.float64),
               "adapter_meta.alpha": np.asarray(float(self.alpha), dtype=np.float64)}
        for name, t in self.params.items():
            out[name] = t.data
        return out

    @classmethod
    def from_entries(cls, config: DecoderConfig,
                     entries: dict[str, np.ndarray]) -> "AdapterWeights":
        params = {k: Tensor(np.array(v), requires_grad=True)
                  for k, v in entries.items() if k.startswith("adapter.")}
        return cls(config, int(entries["adapter_meta.rank"]),
                   float(entries["adapter_meta.alpha"]), params)


# ------------------------------------------------------------- inference engine

@dataclass
class PrefillCache:
    """Per-layer K/V for all processed rows. Arrays are never mutated in
    place, so forks may share them."""
    fingerprint: int
    length: int
    keys: list[np.ndarray]
    vals: list[np.ndarray]

    def fork(self) -> "PrefillCache":
        return PrefillCache(self.fingerprint, self.length,
                            list(self.keys), list(self.vals))


class Engine:
    """No-grad numpy twin of Decoder.forward with incremental prefill.

    Uses the same helper functions (_rmsnorm_np/_softmax_np/_gelu_np) and the
    same op order, so an empty-cache prefill over a full sequence is
    bitwise-identical to the graph forward's values.
    """

    def __init__(self, decoder: Decoder, adapters: AdapterWeights | None = None):
        self.decoder = decoder
        self.adapters = adapters if (adapters is not None and adapters.enabled) else None

    def _fingerprint(self) -> int:
        crc = 0
        for name in sorted(self.decoder.params):
            crc = zlib.crc32(self.decoder.params[name].data.tobytes(), crc)
        if self.adapters is not None:
            for name in sorted(self.adapters.params):
                crc = zlib.crc32(self.adapters.params[name].data.tobytes(), crc)
            crc = zlib.crc32(b"adapter-on", crc)
        return crc

    def new_cache(self) -> PrefillCache:
        d = self.decoder.config.d_model
        dt = self.decoder.dtype
        empty = [np.zeros((0, d), dtype=dt) for _ in range(self.decoder.config.n_layers)]
        return PrefillCache(self._fingerprint(), 0, list(empty), list(empty))

    def prefill(self, cache: PrefillCache, rows: np.ndarray, *, _check: bool = True
                ) -> tuple[np.ndarray, np.ndarray, PrefillCache]:
        """Append rows (T_new, d); returns (final-position logits (V,),
        hidden for appended rows (T_new, d), new cache)."""
        if _check and cache.fingerprint != self._fingerprint():
            raise CacheInvalidError("cache was built by different weights")
        rows = np.asarray(rows, dtype=self.decoder.dtype)
        if rows.ndim != 2 or rows.shape[0] == 0:
            raise UsageError("appended rows must be a nonempty (T, d) array")
        cfg = self.decoder.config
        start, t_new = cache.length, rows.shape[0]
        total = start + t_new
        if total > cfg.max_positions:
            raise CapacityError(f"prefill to {total} rows exceeds max_positions "
                                f"{cfg.max_positions}")
        p = {k: t.data for k, t in self.decoder.params.items()}
        nh, hd = cfg.n_heads, cfg.head_dim
        inv = rows.dtype.type(float(hd) ** -0.5)
        x = rows + p["pos_embed"][start:total]
        new_keys, new_vals = [], []
        for i in range(cfg.n_layers):
            xn = _rmsnorm_np(x, p[f"layers.{i}.attn.norm_g"])
            q = xn @ p[f"layers.{i}.attn.wq"]
            k = xn @ p[f"layers.{i}.attn.wk"]
            v = xn @ p[f"layers.{i}.attn.wv"]
            if self.adapters is not None:
                q = q + self.adapters.delta_np(xn, i, "q")
                k = k + self.adapters.delta_np(xn, i, "k")
                v = v + self.adapters.delta_np(xn, i, "v")
            K = np.concatenate([cache.keys[i], k], axis=0)
            V = np.concatenate([cache.vals[i], v], axis=0)
            new_keys.append(K)
            new_vals.append(V)
            heads = []
            for h in range(nh):
                qh = np.ascontiguousarray(q[:, h * hd:(h + 1) * hd])
                kh = np.ascontiguousarray(K[:, h * hd:(h + 1) * hd])
                vh = np.ascontiguousarray(V[:, h * hd:(h + 1) * hd])
                bias = _attn_bias(t_new, total, start, h, nh,
                                  cfg.n_local_heads, x.dtype)
                scores = (qh @ np.ascontiguousarray(kh.T)) * inv + bias
                heads.append(_softmax_np(scores, -1) @ vh)
            ctx = np.concatenate(heads, axis=1)
            attn = ctx @ p[f"layers.{i}.attn.wo"]
            if self.adapters is not None:
                attn = attn + self.adapters.delta_np(ctx, i, "o")
            x = x + attn
            xn2 = _rmsnorm_np(x, p[f"layers.{i}.mlp.norm_g"])
            x = x + _gelu_np(xn2 @ p[f"layers.{i}.mlp.w1"]) @ p[f"layers.{i}.mlp.w2"]
        hidden = _rmsnorm_np(x, p["final.norm_g"])
        logits = hidden @ p["lm_head"]
        return logits[-1], hidden, PrefillCache(cache.fingerprint, total,
                                                new_keys, new_vals)

    def greedy(self, cache: PrefillCache, logits_last: np.ndarray,
               max_new: int) -> list[int]:
        """Greedy continuation from a prefilled cache; EOS stops and is not
        emitted. logits_last are the prefill's final-position logits (they
        pick the first token). np.argmax resolves ties toward the lowest id.
        """
        if max_new < 1:
            raise UsageError("max_new must be >= 1")
        if cache.fingerprint != self._fingerprint():
            raise CacheInvalidError("cache was built by different weights")
        table = self.decoder.params["tok_embed"].data
        out: list[int] = []
        logits = logits_last
        for _ in range(max_new):
            tok = int(np.argmax(logits))
            if tok == EOS:
                break
            out.append(tok)
            row = table[tok:tok + 1]
            logits, _, cache = self.prefill(cache, row, _check=False)
        return out


# ------------------------------------------------------------- base pretraining

def render_qa_transcript(query, context_blocks, answer) -> list[int]:
    seq = render_prompt(query)
    for block in context_blocks:
        seq.extend(strip_pad(block))
    seq.append(ANSWER)
    seq.extend(answer)
    seq.append(EOS)
    return seq


def render_doc_lm(doc_tokens) -> list[int]:
    return [BOS, *strip_pad(doc_tokens), EOS]


def qa_match_rate(decoder: Decoder, instances, docs_by_id, max_new: int = 8,
                  context_ids_fn=None) -> float:
    """Greedy Match over raw-text context (gold docs unless told otherwise)."""
    from .metrics import match_metric
    eng = decoder.engine()
    hit = 0
    for inst in instances:
        ctx_ids = context_ids_fn(inst) if context_ids_fn else inst.gold_docs
        seq = render_prompt(inst.query)
        for did in ctx_ids:
            seq.extend(strip_pad(docs_by_id[did].tokens))
        seq.append(ANSWER)
        cache = eng.new_cache()
        logits, _, cache = eng.prefill(cache, decoder.params["tok_embed"].data[seq])
        gen = eng.greedy(cache, logits, max_new)
        hit += match_metric(inst.answer, gen)
    return hit / max(1, len(instances))


def _lookup_episode(alphabets, docs, rng, max_ctx_docs, gold_first=0.8):
    """One fresh key-value lookup: a document sampled from the alphabet spec
    (never stored anywhere), a query for one of its pairs, and real distractor
    docs. Unseen identities force the model to copy from context rather than
    recall memorized pairs. Difficulty varies per episode (pair count and
    distractor count are sampled down to the trivial single-pair case) so the
    copying behaviour has easy instances to bootstrap from. The sampled doc
    leads the context most of the time because the count-cosine retriever
    ranks the gold doc first."""
    idents = np.asarray(alphabets.identity_ids)
    values = np.asarray(alphabets.value_ids)
    group = int(idents[rng.integers(len(idents))])
    member = int(idents[rng.integers(len(idents))])
    n_pairs = int(rng.integers(1, alphabets.pairs_per_doc + 1))
    slots = rng.permutation(np.asarray(alphabets.slot_ids))
    toks: list[int] = []
    pairs = []
    for slot in slots[:n_pairs]:
        v = values[rng.integers(0, len(values), size=2)]
        toks += [group, member, int(slot), int(v[0]), int(v[1]), SEP]
        pairs.append(((group, member, int(slot)), (int(v[0]), int(v[1]))))
    key, value = pairs[int(rng.integers(len(pairs)))]
    blocks = [tuple(toks)]
    n_extra = min(int(rng.integers(0, max_ctx_docs + 1)), len(docs))
    for j in rng.choice(len(docs), size=n_extra, replace=False):
        blocks.append(docs[int(j)].tokens)
    if rng.random() < gold_first:
        return key, blocks, value
    order = rng.permutation(len(blocks))
    return key, [blocks[int(o)] for o in order], value


def pretrain_decoder(config: DecoderConfig, docs, instances, *, seed: int,
                     steps: int = 4000, lr: float = 1e-3, batch: int = 4,
                     qa_weight: float = 0.75, max_ctx_docs: int = 2,
                     eval_every: int = 250, target_match: float = 0.95,
                     eval_instances=None, eval_context_fn=None, alphabets=None,
                     fresh_weight: float = 0.5, lm_offset_max: int = 16,
                     log_path=None) -> tuple[Decoder, list[dict]]:
    """Language-model the synthetic corpus (docs + QA transcripts) until the
    decoder answers from raw gold-doc context, then hand it back unfrozen.

    When alphabets (a corpus config) is given, fresh_weight of the QA episodes
    use documents sampled on the fly instead of corpus ones, so the lookup
    skill generalizes past the training docs.  Plain-doc episodes start at a
    random position offset (up to lm_offset_max) so doc knowledge is not tied
    to where the doc sits in a window."""
    streams = SeedStreams(seed)
    decoder = Decoder.init(config, streams)
    docs_by_id = {d.doc_id: d for d in docs}
    train = [i for i in instances if i.split == "train"]
    if eval_instances is None:
        eval_instances = train[: min(64, len(train))]
    rng = streams.stream("pretrain-data")
    opt = Adam({k: v for k, v in decoder.params.items()}, lr=lr)
    log: list[dict] = []
    t0 = time.perf_counter()
    for step in range(1, steps + 1):
        opt.zero_grad()
        losses = []
        for _ in range(batch):
            if rng.random() < qa_weight and train:
                if alphabets is not None and rng.random() < fresh_weight:
                    key, blocks, value = _lookup_episode(
                        alphabets, docs, rng, max_ctx_docs)
                    seq = render_qa_transcript(key, blocks, value)
                else:
                    inst = train[int(rng.integers(len(train)))]
                    ctx = [docs_by_id[d] for d in inst.gold_docs]
                    pool = [d for d in docs if d.doc_id not in inst.gold_docs]
                    n_extra = min(int(rng.integers(0, max_ctx_docs)), len(pool))
                    for j in rng.choice(len(pool), size=n_extra, replace=False):
                        ctx.append(pool[int(j)])
                    order = rng.permutation(len(ctx))
                    blocks = [ctx[int(o)].tokens for o in order]
                    value = inst.answer
                    seq = render_qa_transcript(inst.query, blocks, inst.answer)
                # Score only ANSWER -> value -> EOS. Context tokens carry
                # irreducible entropy (values are random given keys) and would
                # drown the lookup signal if scored.
                n_pred = len(value) + 1
                off = 0
                task = "qa"
            else:
                doc = docs[int(rng.integers(len(docs)))]
                seq = render_doc_lm(doc.tokens)
                n_pred = len(seq) - 1
                room = config.max_positions - len(seq)
                off = int(rng.integers(0, min(lm_offset_max, room) + 1))
                task = "lm"
            if len(seq) > config.max_positions:
                seq = seq[-config.max_positions:]
            emb = decoder.embed(seq)
            logits, _ = decoder.forward(emb, pos_offset=off)
            T = len(seq)
            loss = scale(cross_entropy(slice_rows(logits, T - 1 - n_pred, T - 1),
                                       seq[T - n_pred:]),
                         1.0 / batch)
            loss.backward()
            losses.append(loss.item() * batch)
        opt.step()
        rec = {"step": step, "task": task, "loss": sum(losses) / len(losses)}
        log.append(rec)
        if step % eval_every == 0 or step == steps:
            m = qa_match_rate(decoder, eval_instances, docs_by_id,
                              context_ids_fn=eval_context_fn)
            log.append({"step": step, "eval_match": m,
                        "elapsed_s": round(time.perf_counter() - t0, 2)})
            if m >= target_match:
                break
    if log_path is not None:
        with open(log_path, "w") as fh:
            for rec in log:
                fh.write(json.dumps(rec) + "\n")
    return decoder, log
