"""Miniature pre-LN transformer used as the frozen base language model.

Supports an encoder-decoder stack (self-attention prefixes on the encoder,
self- and cross-attention prefixes on the decoder) and a decoder-only stack
(decoder self-attention prefixes only). Prefix vectors live in the
projected key/value space and are prepended to every head's keys and
values; they carry no positional embedding and are never causally masked.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .exceptions import ConfigError, DimensionError, LengthError

NEG_INF = -1e9


class AttentionKind(str, Enum):
    E_S = "E_S"  # encoder self-attention
    D_C = "D_C"  # decoder cross-attention
    D_S = "D_S"  # decoder masked self-attention


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    vocab_size: int = 512
    max_seq_len: int = 128
    architecture: str = "encoder_decoder"
    dtype: str = "float32"
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.architecture not in ("encoder_decoder", "decoder_only"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kinds(self) -> tuple[AttentionKind, ...]:
        if self.architecture == "decoder_only":
            return (AttentionKind.D_S,)
        return (AttentionKind.E_S, AttentionKind.D_C, AttentionKind.D_S)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PrefixInjection:
    """Key and value rows prepended to one attention block."""

    keys: Tensor
    values: Tensor

    def __post_init__(self):
        if self.keys.shape != self.values.shape or self.keys.ndim != 2:
            raise DimensionError(
                f"prefix keys {self.keys.shape} and values {self.values.shape} must be equal (rho, d) matrices"
            )

    @property
    def length(self) -> int:
        return self.keys.shape[0]


Injections = Mapping[tuple[AttentionKind, int], PrefixInjection]


# --- parameter layout -------------------------------------------------------

def _attn_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    out = {}
    for w in ("q", "k", "v", "o"):
        out[f"{prefix}.w{w}"] = (d, d)
        out[f"{prefix}.b{w}"] = (d,)
    return out


def _ln_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.g": (d,), f"{prefix}.b": (d,)}


def _ffn_shapes(prefix: str, d: int, d_ff: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.w1": (d, d_ff), f"{prefix}.b1": (d_ff,), f"{prefix}.w2": (d_ff, d), f"{prefix}.b2": (d,)}


def base_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every base-model tensor, without allocating."""
    d = cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {"lm.tok_emb": (cfg.vocab_size, d)}
    stacks = ["dec"] if cfg.architecture == "decoder_only" else ["enc", "dec"]
    for stack in stacks:
        shapes[f"lm.{stack}.pos"] = (cfg.max_seq_len, d)
        for layer in range(cfg.n_layers):
            p = f"lm.{stack}.{layer}"
            shapes.update(_ln_shapes(f"{p}.ln1", d))
            shapes.update(_attn_shapes(f"{p}.self", d))
            if stack == "dec" and cfg.architecture == "encoder_decoder":
                shapes.update(_ln_shapes(f"{p}.ln_cross", d))
                shapes.update(_attn_shapes(f"{p}.cross", d))
            shapes.update(_ln_shapes(f"{p}.ln2", d))
            shapes.update(_ffn_shapes(f"{p}.ffn", d, cfg.d_ff))
        shapes.update(_ln_shapes(f"lm.{stack}.ln_f", d))
    return shapes


def init_base_weights(cfg: ModelConfig, seed: int = 0, store: ParamStore | None = None) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore() if store is None else store
    for name, shape in base_param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "g":
            value = np.ones(shape)
        elif leaf.startswith("b") or (leaf == "b" and len(shape) == 1):
            value = np.zeros(shape)
        else:
            value = rng.normal(0.0, 0.02, size=shape)
        store.add(name, value.astype(cfg.dtype), trainable=False)
    return store


# --- attention primitives ---------------------------------------------------

def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """softmax(q k^T / sqrt(d_k) + mask) v over the last two axes."""
    scores = ad.scale(q @ ad.swapaxes(k, -1, -2), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        mask = np.asarray(mask, dtype=scores.dtype)
        if mask.shape[-1] != scores.shape[-1] or mask.shape[-2] not in (1, scores.shape[-2]):
            raise DimensionError(f"mask shape {mask.shape} does not match scores {scores.shape}")
        scores = scores + Tensor(mask)
    return ad.softmax(scores, axis=-1) @ v


def attention_head(Q, K, V, wq, wk, wv, mask=None) -> Tensor:
    """One attention head over raw inputs and its projection weights."""
    return scaled_dot_attention(ad.as_tensor(Q) @ wq, ad.as_tensor(K) @ wk, ad.as_tensor(V) @ wv, mask)


def extend_mask(mask, n_queries: int, prefix_len: int, dtype="float64") -> np.ndarray | None:
    """Prepend ``prefix_len`` always-visible columns to an additive mask."""
    if prefix_len == 0:
        return mask
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=dtype)
    pad = np.zeros(mask.shape[:-1] + (prefix_len,), dtype=mask.dtype)
    return np.concatenate([pad, mask], axis=-1)


def attend_with_prefix(Q, K, V, injection: PrefixInjection | None, wq, wk, wv, mask=None) -> Tensor:
    """Single-head attention over ``[P_K; K W^K]`` and ``[P_V; V W^V]``."""
    q = ad.as_tensor(Q) @ wq
    k = ad.as_tensor(K) @ wk
    v = ad.as_tensor(V) @ wv
    if injection is None or injection.length == 0:
        return scaled_dot_attention(q, k, v, mask)
    if injection.keys.shape[-1] != k.shape[-1]:
        raise DimensionError("prefix width differs from projected key width")
    k = ad.concat([injection.keys, k], axis=-2)
    v = ad.concat([injection.values, v], axis=-2)
    return scaled_dot_attention(q, k, v, extend_mask(mask, q.shape[-2], injection.length, q.dtype))


def causal_mask(n: int, dtype="float64") -> np.ndarray:
    return np.triu(np.full((n, n), NEG_INF, dtype=dtype), k=1)


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _prefix_heads(p: Tensor, h: int, batch: int) -> Tensor:
    rho, d = p.shape
    ph = ad.transpose(ad.reshape(p, (rho, h, d // h)), (1, 0, 2))
    return ad.broadcast_to(ph, (batch, h, rho, d // h))


def multi_head_attention(params, prefix: str, x_q: Tensor, x_kv: Tensor, n_heads: int,
                         injection: PrefixInjection | None, mask) -> Tensor:
    """Batched multi-head attention; ``mask`` is additive, shape (B|1, 1, N, M)."""
    batch = x_q.shape[0]
    q = _split_heads(x_q @ params[f"{prefix}.wq"] + params[f"{prefix}.bq"], n_heads)
    k = _split_heads(x_kv @ params[f"{prefix}.wk"] + params[f"{prefix}.bk"], n_heads)
    v = _split_heads(x_kv @ params[f"{prefix}.wv"] + params[f"{prefix}.bv"], n_heads)
    if injection is not None and injection.length > 0:
        k = ad.concat([_prefix_heads(injection.keys, n_heads, batch), k], axis=2)
        v = ad.concat([_prefix_heads(injection.values, n_heads, batch), v], axis=2)
        mask = extend_mask(mask, q.shape[2], injection.length, q.dtype)
    out = scaled_dot_attention(q, k, v, mask)
    return _merge_heads(out) @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]


# --- stacks -----------------------------------------------------------------

def _ln(params, prefix, x):
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _ffn(params, prefix, x, cfg, rng):
    h = ad.gelu(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    return ad.dropout(h, cfg.dropout, rng) @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def _embed(params, stack, ids: np.ndarray, cfg: ModelConfig):
    tok = ad.gather_rows(params["lm.tok_emb"], ids)
    pos = ad.gather_rows(params[f"lm.{stack}.pos"], np.arange(ids.shape[1]))
    return tok + pos


def prefix_length(injections: Injections | None, kind: AttentionKind) -> int:
    if not injections:
        return 0
    return max((inj.length for (k, _), inj in injections.items() if k == kind), default=0)


def _check_length(cfg: ModelConfig, n: int, injections, kind: AttentionKind, what: str):
    total = n + prefix_length(injections, kind)
    if total > cfg.max_seq_len:
        raise LengthError(f"{what} length {n} plus prefix exceeds max_seq_len {cfg.max_seq_len}")


def _get(injections, kind, layer):
    if not injections:
        return None
    return injections.get((kind, layer))


def key_padding_mask(lengths: np.ndarray, n: int, dtype) -> np.ndarray:
    """Additive (B, 1, 1, n) mask hiding positions >= length."""
    valid = np.arange(n)[None, :] < np.asarray(lengths)[:, None]
    return np.where(valid, 0.0, NEG_INF).astype(dtype)[:, None, None, :]


def encode(params, cfg: ModelConfig, src: np.ndarray, src_len: np.ndarray,
           injections: Injections | None = None, rng=None) -> Tensor:
    src = np.asarray(src, dtype=np.int64)
    _check_length(cfg, src.shape[1], injections, AttentionKind.E_S, "source")
    x = ad.dropout(_embed(params, "enc", src, cfg), cfg.dropout, rng)
    mask = key_padding_mask(src_len, src.shape[1], cfg.dtype)
    for layer in range(cfg.n_layers):
        p = f"lm.enc.{layer}"
        h = _ln(params, f"{p}.ln1", x)
        x = x + multi_head_attention(params, f"{p}.self", h, h, cfg.n_heads,
                                     _get(injections, AttentionKind.E_S, layer), mask)
        x = x + _ffn(params, f"{p}.ffn", _ln(params, f"{p}.ln2", x), cfg, rng)
    return _ln(params, "lm.enc.ln_f", x)


def decode(params, cfg: ModelConfig, tgt_in: np.ndarray, memory: Tensor | None = None,
           memory_len: np.ndarray | None = None, injections: Injections | None = None, rng=None) -> Tensor:
    """Decoder stack; returns next-token logits of shape (B, T, V)."""
    tgt_in = np.asarray(tgt_in, dtype=np.int64)
    t = tgt_in.shape[1]
    _check_length(cfg, t, injections, AttentionKind.D_S, "target")
    x = ad.dropout(_embed(params, "dec", tgt_in, cfg), cfg.dropout, rng)
    self_mask = causal_mask(t, cfg.dtype)[None, None]
    cross = cfg.architecture == "encoder_decoder"
    if cross:
        if memory is None:
            raise ConfigError("encoder-decoder decoding needs encoder memory")
        cross_mask = key_padding_mask(memory_len, memory.shape[1], cfg.dtype)
    for layer in range(cfg.n_layers):
        p = f"lm.dec.{layer}"
        h = _ln(params, f"{p}.ln1", x)
        x = x + multi_head_attention(params, f"{p}.self", h, h, cfg.n_heads,
                                     _get(injections, AttentionKind.D_S, layer), self_mask)
        if cross:
            h = _ln(params, f"{p}.ln_cross", x)
            x = x + multi_head_attention(params, f"{p}.cross", h, memory, cfg.n_heads,
                                         _get(injections, AttentionKind.D_C, layer), cross_mask)
        x = x + _ffn(params, f"{p}.ffn", _ln(params, f"{p}.ln2", x), cfg, rng)
    h = _ln(params, "lm.dec.ln_f", x)
    return h @ ad.swapaxes(params["lm.tok_emb"], 0, 1)


# --- batches ----------------------------------------------------------------

@dataclass
class Batch:
    """Padded teacher-forcing batch.

    For decoder-only models ``src`` is unused and ``tgt_in``/``tgt_out``
    hold the shifted ``[context; SEP; target]`` sequence with the loss mask
    restricted to target positions.
    """

    src: np.ndarray
    src_len: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_mask: np.ndarray

    def __len__(self):
        return self.tgt_in.shape[0]


def make_batch(cfg: ModelConfig, pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
               pad_id: int, bos_id: int, sep_id: int) -> Batch:
    """Build a batch from (source ids, target ids) pairs; targets end with EOS."""
    if not pairs:
        raise ValueError("empty batch")
    b = len(pairs)
    if cfg.architecture == "encoder_decoder":
        s = max(len(p[0]) for p in pairs)
        t = max(len(p[1]) for p in pairs)
        src = np.full((b, s), pad_id, dtype=np.int64)
        src_len = np.zeros(b, dtype=np.int64)
        tgt_in = np.full((b, t), pad_id, dtype=np.int64)
        tgt_out = np.full((b, t), pad_id, dtype=np.int64)
        tgt_mask = np.zeros((b, t), dtype=bool)
        for i, (x, y) in enumerate(pairs):
            src[i, : len(x)] = x
            src_len[i] = len(x)
            tgt_in[i, : len(y)] = [bos_id, *y[:-1]]
            tgt_out[i, : len(y)] = y
            tgt_mask[i, : len(y)] = True
        return Batch(src, src_len, tgt_in, tgt_out, tgt_mask)
    seqs = [list(x) + [sep_id] + list(y) for x, y in pairs]
    t = max(len(q) for q in seqs) - 1
    tgt_in = np.full((b, t), pad_id, dtype=np.int64)
    tgt_out = np.full((b, t), pad_id, dtype=np.int64)
    tgt_mask = np.zeros((b, t), dtype=bool)
    for i, ((x, y), q) in enumerate(zip(pairs, seqs)):
        tgt_in[i, : len(q) - 1] = q[:-1]
        tgt_out[i, : len(q) - 1] = q[1:]
        tgt_mask[i, len(x): len(x) + len(y)] = True
    empty = np.zeros((b, 0), dtype=np.int64)
    return Batch(empty, np.zeros(b, dtype=np.int64), tgt_in, tgt_out, tgt_mask)


def forward_batch(params, cfg: ModelConfig, batch: Batch, injections: Injections | None = None,
                  rng=None) -> Tensor:
    """Teacher-forced logits (B, T, V) for a padded batch."""
    if cfg.architecture == "encoder_decoder":
        memory = encode(params, cfg, batch.src, batch.src_len, injections, rng)
        return decode(params, cfg, batch.tgt_in, memory, batch.src_len, injections, rng)
    return decode(params, cfg, batch.tgt_in, injections=injections, rng=rng)


def forward_teacher_forced(cfg: ModelConfig, params, injections: Injections | None,
                           source_tokens: Sequence[int], target_tokens: Sequence[int],
                           bos_id: int = 1, sep_id: int = 3, pad_id: int = 0) -> Tensor:
    """Per-position next-token logits, shape (len(target), V), for one example."""
    ids = np.asarray(list(source_tokens) + list(target_tokens))
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise IndexError("token id outside the vocabulary")
    batch = make_batch(cfg, [(list(source_tokens), list(target_tokens))], pad_id, bos_id, sep_id)
    logits = forward_batch(params, cfg, batch, injections)
    if cfg.architecture == "encoder_decoder":
        return logits[0]
    start = len(source_tokens)
    return logits[0, start: start + len(target_tokens)]


def base_param_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in base_param_shapes(cfg).values()))
