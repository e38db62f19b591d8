"""Finite-difference verification of every primitive and of the full response-stage loss."""
from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass, replace
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, check_gradients
from .config import RunConfig, toy_config
from .data import Tokenizer, generate_synthetic_corpus
from .model import PrefixLM, effective_config
from .prefix import PrefixInjection, init_prefix_params
from .training import loss_bow, loss_total_stage2
from .transformer import attend_with_prefix, causal_mask, init_base_weights

PRIMITIVE_TOL = 1e-6
GRAPH_TOL = 1e-4


@dataclass(frozen=True)
class GradcheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


class _Overlay(Mapping):
    """Read-through view of a parameter store with some entries replaced."""

    def __init__(self, store, overrides: Mapping[str, Tensor]):
        self.store = store
        self.overrides = overrides

    def __getitem__(self, name):
        return self.overrides[name] if name in self.overrides else self.store[name]

    def __contains__(self, name):
        return name in self.overrides or name in self.store

    def __iter__(self):
        return iter(self.store.names())

    def __len__(self):
        return len(self.store)


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, dict]]:
    def r(*shape):
        return rng.normal(size=shape)

    def away_from_zero(*shape):
        x = r(*shape)
        return np.where(np.abs(x) < 0.2, x + np.sign(x) * 0.3 + 0.3 * (x == 0), x)

    w = r(4, 6)
    targets = np.array([1, 0, 5, 3])
    mask = np.array([True, True, False, True])
    table_idx = np.array([2, 0, 2, 4])
    cmask = causal_mask(3)
    return {
        "matmul": (lambda d: (ad.matmul(d["a"], d["b"]) * Tensor(w)).sum(), {"a": r(4, 3), "b": r(3, 6)}),
        "add": (lambda d: (ad.add(d["a"], d["b"]) * Tensor(r(3, 4) * 0 + w[:3, :4])).sum(), {"a": r(3, 4), "b": r(4)}),
        "mul": (lambda d: (ad.mul(d["a"], d["b"]) * Tensor(w[:3, :4])).sum(), {"a": r(3, 4), "b": r(3, 1)}),
        "scale": (lambda d: (ad.scale(d["x"], 0.37) * Tensor(w)).sum(), {"x": r(4, 6)}),
        "tanh": (lambda d: (ad.tanh(d["x"]) * Tensor(w)).sum(), {"x": r(4, 6)}),
        "relu": (lambda d: (ad.relu(d["x"]) * Tensor(w)).sum(), {"x": away_from_zero(4, 6)}),
        "gelu": (lambda d: (ad.gelu(d["x"]) * Tensor(w)).sum(), {"x": r(4, 6)}),
        "exp": (lambda d: (ad.exp(d["x"]) * Tensor(w)).sum(), {"x": r(4, 6)}),
        "log": (lambda d: (ad.log(d["x"]) * Tensor(w)).sum(), {"x": np.abs(r(4, 6)) + 0.5}),
        "softmax": (lambda d: (ad.softmax(d["x"], axis=-1) * Tensor(w)).sum(), {"x": r(4, 6)}),
        "log_softmax": (lambda d: (ad.log_softmax(d["x"], axis=0) * Tensor(w)).sum(), {"x": r(4, 6)}),
        "layer_norm": (lambda d: (ad.layer_norm(d["x"], d["g"], d["b"]) * Tensor(w)).sum(),
                       {"x": r(4, 6), "g": r(6), "b": r(6)}),
        "gather_rows": (lambda d: (ad.gather_rows(d["t"], table_idx) * Tensor(w)).sum(), {"t": r(5, 6)}),
        "concat": (lambda d: (ad.concat([d["a"], d["b"]], axis=0) * Tensor(w)).sum(), {"a": r(1, 6), "b": r(3, 6)}),
        "reshape_transpose": (lambda d: (ad.transpose(ad.reshape(d["x"], (6, 4))) * Tensor(w)).sum(),
                              {"x": r(2, 12)}),
        "getitem": (lambda d: (d["x"][1:3] * Tensor(w[:2])).sum(), {"x": r(4, 6)}),
        "sum_mean": (lambda d: (ad.tsum(d["x"], axis=0) * Tensor(w[0])).sum() + ad.mean(d["x"] * d["x"]),
                     {"x": r(4, 6)}),
        "cross_entropy": (lambda d: ad.cross_entropy(d["z"], targets, mask), {"z": r(4, 6)}),
        "attention_with_prefix": (
            lambda d: (attend_with_prefix(d["q"], d["k"], d["v"], PrefixInjection(d["pk"], d["pv"]),
                                          d["wq"], d["wk"], d["wv"], cmask) * Tensor(w[:3, :2])).sum(),
            {"q": r(3, 4), "k": r(3, 4), "v": r(3, 4), "pk": r(2, 2), "pv": r(2, 2),
             "wq": r(4, 2), "wk": r(4, 2), "wv": r(4, 2)}),
        "bow_loss": (lambda d: loss_bow(ad.softmax(d["z"], axis=-1), [frozenset({1, 4}), frozenset({2})]),
                     {"z": r(3, 6)}),
    }


def _well_conditioned(store: ParamStore, seed: int) -> ParamStore:
    """Redraw matrices at fan-in scale (embeddings at 0.5) so no gradient sits near roundoff."""
    rng = np.random.default_rng([seed, 99])
    out = ParamStore()
    for name, t in store.items():
        a = t.data
        if name == "lm.tok_emb":
            a = rng.normal(0.0, 0.5, a.shape)
        elif a.ndim == 2 and not name.endswith((".pos", ".embed")):
            a = rng.normal(0.0, 1.0 / math.sqrt(a.shape[0]), a.shape)
        out.add(name, a.astype(t.dtype), store.is_trainable(name))
    return out


def build_check_model(run_config: RunConfig, seed: int = 0) -> tuple[PrefixLM, list]:
    """A fresh float64 model with knowledge and interactive response prefixes.

    The default initialization (std 0.02) leaves the interaction path with
    gradients around 1e-9, where central differences are pure roundoff, so
    the weights are redrawn at fan-in scale first.
    """
    corpus = generate_synthetic_corpus(seed=seed, n_conversations=8, topics=4, turns_per_conv=2)
    tok = Tokenizer.fit(corpus.texts())
    cfg = effective_config(replace(run_config.model, dtype="float64", dropout=0.0), tok)
    store = init_base_weights(cfg, seed=seed)
    spec = run_config.prefix
    init_prefix_params(store, "kprefix", cfg, spec, False, seed=seed + 1)
    init_prefix_params(store, "yprefix", cfg, spec, True, seed=seed + 2, trainable=True)
    model = PrefixLM(cfg, tok, _well_conditioned(store, seed), stage="stage2", knowledge_spec=spec,
                     response_spec=spec, interactive=True, max_target_len=run_config.max_target_len)
    model.refresh_banks()
    examples = [e for e in model.examples(corpus.split("train")) if e.bow][:2]
    return model, examples


def stage2_graph_check(run_config: RunConfig, eps: float = 1e-5, seed: int = 0,
                       max_coords: int = 6, metric: str = "norm") -> dict[str, float]:
    """Per-tensor error of the full Stage II loss (NLL plus bag of words) over the response prefix.

    The default ``norm`` metric compares sampled gradient slices as vectors;
    per-coordinate ratios are dominated by roundoff on coordinates whose
    gradient is within a few orders of magnitude of the difference noise.
    """
    model, examples = build_check_model(run_config, seed)
    names = model.store.names("yprefix.")

    def loss(overrides):
        view = replace(model, store=_Overlay(model.store, overrides))
        total, _ = loss_total_stage2(view, examples, with_bow=True)
        return total

    return check_gradients(loss, {n: model.store[n].data for n in names}, eps=eps, max_coords=max_coords,
                           seed=seed, metric=metric)


def run_gradcheck(run_config: RunConfig | None = None, eps: float = 1e-5, seed: int = 0,
                  fault: str | None = None, max_coords: int = 6) -> tuple[list[GradcheckResult], float]:
    """Return one result per component plus the elapsed seconds."""
    rc = run_config or toy_config(seed)
    start = time.perf_counter()
    ctx = ad.inject_backward_fault(fault) if fault else contextlib.nullcontext()
    results = []
    with ctx:
        for name, (fn, inputs) in _primitive_cases(np.random.default_rng(seed)).items():
            err = max(check_gradients(fn, inputs, eps=eps, seed=seed).values())
            results.append(GradcheckResult(name, err, PRIMITIVE_TOL))
        graph = stage2_graph_check(rc, eps, seed, max_coords)
        results.append(GradcheckResult("stage2_total_loss", max(graph.values()), GRAPH_TOL))
    return results, time.perf_counter() - start
