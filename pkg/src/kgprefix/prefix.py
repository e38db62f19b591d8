"""Knowledge and response prefix banks and their re-parameterization networks.

Parameter layout, per attention kind ``<kind>`` under a root ``kprefix`` or
``yprefix``::

    <root>.<kind>.embed                 (rho, d)      prefix token table
    <root>.<kind>.mlp.{w1,b1,w2,b2}     d -> d_m -> 2Ld (vanilla path)
    <root>.<kind>.head<j>.w{q,k,v}2     (d, d_h)      interactive path
    <root>.<kind>.head<j>.w{q,k,v}1     (d_h, d_h)
    <root>.<kind>.wo                    (d_m, d)
    <root>.<kind>.f.{w1,b1,w2,b2}       2d -> d_m -> 2Ld

The MLP output row for prefix position ``i`` is laid out as
``[key_0, value_0, key_1, value_1, ...]``, each block ``d`` wide.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .exceptions import ConfigError, DimensionError
from .transformer import AttentionKind, Injections, ModelConfig, PrefixInjection

Bank = dict[AttentionKind, list[PrefixInjection]]


@dataclass(frozen=True)
class PrefixSpec:
    length: int = 20
    d_m: int = 128
    n_heads: int = 2

    def __post_init__(self):
        if self.length < 1:
            raise ConfigError("prefix length must be >= 1")
        if self.d_m < 1 or self.n_heads < 1 or self.d_m % self.n_heads:
            raise ConfigError("d_m must be a positive multiple of the interactive head count")

    @property
    def d_h(self) -> int:
        return self.d_m // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InteractionOutputs:
    hidden: Tensor        # H^o, (rho, d)
    vocab_dist: Tensor    # I^e, (rho, V), rows sum to one
    mixture: Tensor       # I^o, (rho, d)


@dataclass
class PrefixOutputs:
    bank: Bank
    interactions: dict[AttentionKind, InteractionOutputs] = field(default_factory=dict)


# --- shapes and counting ----------------------------------------------------

def mlp_shapes(root: str, kind: AttentionKind, cfg: ModelConfig, spec: PrefixSpec) -> dict[str, tuple]:
    d, out = cfg.d_model, 2 * cfg.n_layers * cfg.d_model
    p = f"{root}.{kind.value}"
    return {
        f"{p}.embed": (spec.length, d),
        f"{p}.mlp.w1": (d, spec.d_m),
        f"{p}.mlp.b1": (spec.d_m,),
        f"{p}.mlp.w2": (spec.d_m, out),
        f"{p}.mlp.b2": (out,),
    }


def interactive_shapes(root: str, kind: AttentionKind, cfg: ModelConfig, spec: PrefixSpec) -> dict[str, tuple]:
    d, dh, out = cfg.d_model, spec.d_h, 2 * cfg.n_layers * cfg.d_model
    p = f"{root}.{kind.value}"
    shapes: dict[str, tuple] = {f"{p}.embed": (spec.length, d)}
    for j in range(spec.n_heads):
        for w in ("q", "k", "v"):
            shapes[f"{p}.head{j}.w{w}2"] = (d, dh)
            shapes[f"{p}.head{j}.w{w}1"] = (dh, dh)
    shapes[f"{p}.wo"] = (spec.d_m, d)
    shapes[f"{p}.f.w1"] = (2 * d, spec.d_m)
    shapes[f"{p}.f.b1"] = (spec.d_m,)
    shapes[f"{p}.f.w2"] = (spec.d_m, out)
    shapes[f"{p}.f.b2"] = (out,)
    return shapes


def prefix_shapes(root: str, cfg: ModelConfig, spec: PrefixSpec, interactive: bool) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    for kind in cfg.kinds:
        shapes.update((interactive_shapes if interactive else mlp_shapes)(root, kind, cfg, spec))
    return shapes


def closed_form_count(cfg: ModelConfig, spec: PrefixSpec, interactive: bool) -> int:
    """Parameter count of one prefix group, written out independently of the shapes."""
    d, L, dm, dh, rho, n = cfg.d_model, cfg.n_layers, spec.d_m, spec.d_h, spec.length, spec.n_heads
    if interactive:
        per_kind = rho * d + n * (3 * d * dh + 3 * dh * dh) + dm * d + (2 * d * dm + dm * 2 * L * d) + (dm + 2 * L * d)
    else:
        per_kind = rho * d + (d * dm + dm * 2 * L * d) + (dm + 2 * L * d)
    return len(cfg.kinds) * per_kind


def bank_count(cfg: ModelConfig, length: int) -> int:
    """Size of a materialized bank: rho key and value rows per layer and kind."""
    return len(cfg.kinds) * length * 2 * cfg.n_layers * cfg.d_model


def init_prefix_params(store: ParamStore, root: str, cfg: ModelConfig, spec: PrefixSpec,
                       interactive: bool, seed: int = 0, trainable: bool = False) -> ParamStore:
    rng = np.random.default_rng(seed)
    for name, shape in prefix_shapes(root, cfg, spec, interactive).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("b"):
            value = np.zeros(shape)
        elif leaf == "embed":
            value = rng.normal(0.0, 1.0, size=shape)
        elif name.endswith(".w2") and (".mlp." in name or ".f." in name):
            value = rng.normal(0.0, 0.02, size=shape)
        else:
            value = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        store.add(name, value.astype(cfg.dtype), trainable=trainable)
    return store


# --- re-parameterization ----------------------------------------------------

def _split_bank(out: Tensor, cfg: ModelConfig) -> list[PrefixInjection]:
    d = cfg.d_model
    if out.shape[-1] != 2 * cfg.n_layers * d:
        raise DimensionError(f"re-parameterization output width {out.shape[-1]} != 2*L*d")
    return [
        PrefixInjection(out[:, (2 * l) * d:(2 * l + 1) * d], out[:, (2 * l + 1) * d:(2 * l + 2) * d])
        for l in range(cfg.n_layers)
    ]


def _two_layer(x: Tensor, w1, b1, w2, b2) -> Tensor:
    return ad.tanh(x @ w1 + b1) @ w2 + b2


def reparam_mlp(embed: Tensor, params: Mapping[str, Tensor], prefix: str, cfg: ModelConfig) -> list[PrefixInjection]:
    """Vanilla path: per-position tanh MLP from (rho, d) to L (key, value) pairs."""
    if embed.shape[-1] != cfg.d_model:
        raise DimensionError("prefix embedding width differs from d_model")
    out = _two_layer(embed, params[f"{prefix}.w1"], params[f"{prefix}.b1"],
                     params[f"{prefix}.w2"], params[f"{prefix}.b2"])
    return _split_bank(out, cfg)


def interactive_attention(params: Mapping[str, Tensor], root: str, kind: AttentionKind,
                          spec: PrefixSpec, knowledge_embed: Tensor | None) -> Tensor:
    """Multi-head attention from response-prefix to knowledge-prefix embeddings.

    Each head ``j`` uses tanh-projected queries from the response table and
    tanh-projected keys/values from the knowledge table, then a second
    d_h x d_h projection and 1/sqrt(d_h)-scaled attention. Heads are
    concatenated to (rho, d_m) and mapped to (rho, d) by ``wo``.
    """
    if knowledge_embed is None:
        raise ConfigError(f"interactive re-parameterization for {kind.value} needs a knowledge prefix table")
    p = f"{root}.{kind.value}"
    response_embed = params[f"{p}.embed"]
    heads = []
    for j in range(spec.n_heads):
        h = f"{p}.head{j}"
        q = ad.tanh(response_embed @ params[f"{h}.wq2"])
        k = ad.tanh(knowledge_embed @ params[f"{h}.wk2"])
        v = ad.tanh(knowledge_embed @ params[f"{h}.wv2"])
        qh, kh, vh = q @ params[f"{h}.wq1"], k @ params[f"{h}.wk1"], v @ params[f"{h}.wv1"]
        scores = ad.scale(qh @ ad.swapaxes(kh, 0, 1), 1.0 / math.sqrt(spec.d_h))
        heads.append(ad.softmax(scores, axis=-1) @ vh)
    return ad.concat(heads, axis=-1) @ params[f"{p}.wo"]


def interaction_term(hidden: Tensor, lm_embed: Tensor) -> tuple[Tensor, Tensor]:
    """Vocabulary distribution per prefix row and the matching embedding mixture."""
    if hidden.shape[-1] != lm_embed.shape[-1]:
        raise DimensionError("hidden state width differs from the LM embedding width")
    vocab_dist = ad.softmax(hidden @ ad.swapaxes(lm_embed, 0, 1), axis=-1)
    return vocab_dist, vocab_dist @ lm_embed


def reparam_interactive(params: Mapping[str, Tensor], root: str, kind: AttentionKind, cfg: ModelConfig,
                        spec: PrefixSpec, knowledge_embed: Tensor, lm_embed: Tensor):
    hidden = interactive_attention(params, root, kind, spec, knowledge_embed)
    vocab_dist, mixture = interaction_term(hidden, lm_embed)
    p = f"{root}.{kind.value}.f"
    features = ad.concat([params[f"{root}.{kind.value}.embed"], mixture], axis=-1)
    out = _two_layer(features, params[f"{p}.w1"], params[f"{p}.b1"], params[f"{p}.w2"], params[f"{p}.b2"])
    return _split_bank(out, cfg), InteractionOutputs(hidden, vocab_dist, mixture)


def build_bank(params: Mapping[str, Tensor], root: str, cfg: ModelConfig, spec: PrefixSpec,
               interactive: bool, knowledge_root: str | None = None) -> PrefixOutputs:
    """Run the re-parameterization network of every kind under ``root``."""
    result = PrefixOutputs(bank={})
    for kind in cfg.kinds:
        p = f"{root}.{kind.value}"
        if interactive:
            k_name = f"{knowledge_root}.{kind.value}.embed" if knowledge_root else None
            k_embed = params[k_name] if k_name and k_name in params else None
            bank, inter = reparam_interactive(params, root, kind, cfg, spec, k_embed, params["lm.tok_emb"])
            result.bank[kind] = bank
            result.interactions[kind] = inter
        else:
            result.bank[kind] = reparam_mlp(params[f"{p}.embed"], params, f"{p}.mlp", cfg)
    return result


def materialize(knowledge: Bank | None, response: Bank | None) -> Injections:
    """Per (kind, layer) injection with knowledge rows first, then response rows."""
    banks = [b for b in (knowledge, response) if b]
    if not banks:
        return {}
    layer_counts = {len(layers) for b in banks for layers in b.values()}
    if len(layer_counts) != 1:
        raise ConfigError("prefix banks disagree on the number of layers")
    kinds = list(dict.fromkeys(k for b in banks for k in b))
    out: dict = {}
    for kind in kinds:
        parts = [b[kind] for b in banks if kind in b]
        for layer in range(len(parts[0])):
            keys = ad.concat([p[layer].keys for p in parts], axis=0)
            values = ad.concat([p[layer].values for p in parts], axis=0)
            out[(kind, layer)] = PrefixInjection(keys, values)
    return out


def freeze_bank(bank: Bank) -> Bank:
    """Detach a bank into constant tensors."""
    return {k: [PrefixInjection(Tensor(p.keys.data), Tensor(p.values.data)) for p in layers]
            for k, layers in bank.items()}


def bank_to_arrays(bank: Bank, root: str) -> dict[str, np.ndarray]:
    out = {}
    for kind, layers in bank.items():
        for l, inj in enumerate(layers):
            out[f"{root}.{kind.value}.{l}.key"] = inj.keys.data
            out[f"{root}.{kind.value}.{l}.value"] = inj.values.data
    return out


def bank_from_arrays(arrays: Mapping[str, np.ndarray], root: str, cfg: ModelConfig) -> Bank | None:
    bank: Bank = {}
    for kind in cfg.kinds:
        layers = []
        for l in range(cfg.n_layers):
            k = f"{root}.{kind.value}.{l}.key"
            if k not in arrays:
                break
            layers.append(PrefixInjection(Tensor(arrays[k]), Tensor(arrays[f"{root}.{kind.value}.{l}.value"])))
        if layers:
            bank[kind] = layers
    return bank or None
