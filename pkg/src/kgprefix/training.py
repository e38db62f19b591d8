"""Losses, the optimizer and the staged training driver."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Tensor
from .checkpoint import Checkpoint, config_hash
from .config import RunConfig, StageConfig, toy_config
from .data import Corpus, Example, Tokenizer, world_sentences
from .exceptions import CheckpointError, ConfigError, DependencyError, EmptyLossError, NumericError
from .model import PrefixLM, effective_config, row_sum_deviation
from .prefix import PrefixOutputs, init_prefix_params, materialize
from .transformer import AttentionKind, Injections, init_base_weights

log = logging.getLogger(__name__)

# Which parameter groups each stage may update; everything else stays frozen.
FREEZE_SCHEDULE: dict[str, tuple[str, ...]] = {
    "base": ("lm.",),
    "stage1": ("kprefix.",),
    "stage2": ("yprefix.",),
    "finetune_baseline": ("lm.",),
    "prefix_baseline": ("yprefix.",),
}
PREREQUISITES: dict[str, str | None] = {
    "base": None,
    "stage1": "base",
    "stage2": "stage1",
    "finetune_baseline": "base",
    "prefix_baseline": "base",
}


# --- losses -----------------------------------------------------------------

def sequence_nll(model: PrefixLM, pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
                 injections: Injections | None = None, reduction: str = "example", rng=None) -> Tensor:
    """Teacher-forced NLL of targets given sources.

    ``example`` averages over each target's tokens and then over the batch,
    ``token`` averages over all target tokens, ``sum`` adds them up.
    """
    batch = model.batch(pairs)
    mask = batch.tgt_mask.astype(np.float64)
    if mask.sum() == 0:
        raise EmptyLossError("no target tokens in batch")
    if reduction == "example":
        lens = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
        weights = mask / lens / np.count_nonzero(mask.sum(axis=1))
    elif reduction == "token":
        weights = mask / mask.sum()
    elif reduction == "sum":
        weights = mask
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    logits = model.logits(batch, injections, rng)
    b, t, v = logits.shape
    return ad.weighted_nll(logits.reshape(b * t, v), batch.tgt_out.reshape(-1), weights.reshape(-1))


def knowledge_pairs(examples: Sequence[Example]) -> list[tuple]:
    return [(e.context, e.knowledge) for e in examples if e.knowledge]


def response_pairs(examples: Sequence[Example]) -> list[tuple]:
    return [(e.context, e.response) for e in examples]


def loss_stage1(model: PrefixLM, examples: Sequence[Example], injections: Injections | None = None,
                reduction: str = "example") -> Tensor:
    """Knowledge NLL; turns without knowledge are skipped."""
    pairs = knowledge_pairs(examples)
    if not pairs:
        raise EmptyLossError("batch has no knowledge-grounded turns")
    return sequence_nll(model, pairs, injections, reduction)


def loss_stage2(model: PrefixLM, examples: Sequence[Example], injections: Injections | None = None,
                reduction: str = "example") -> Tensor:
    return sequence_nll(model, response_pairs(examples), injections, reduction)


def loss_bow(vocab_dist: Tensor, bags: Sequence[frozenset[int]]) -> Tensor:
    """Bag-of-words NLL of the row-averaged prefix vocabulary distribution.

    The distribution is input independent, so every bag is scored against
    the same pooled vector; the result is the mean over non-empty bags of
    the mean word NLL within each bag. Empty bags contribute nothing.
    """
    bags = [b for b in bags if b]
    if not bags:
        return Tensor(np.zeros((), dtype=vocab_dist.dtype))
    pooled = ad.mean(vocab_dist, axis=0)
    weight: dict[int, float] = {}
    for bag in bags:
        for w in bag:
            weight[w] = weight.get(w, 0.0) + 1.0 / (len(bag) * len(bags))
    words = sorted(weight)
    picked = ad.index_select(pooled, np.array(words), axis=-1)
    return -(ad.log(picked) * Tensor(np.array([weight[w] for w in words], dtype=vocab_dist.dtype))).sum()


def bow_term(outputs: PrefixOutputs, bags: Sequence[frozenset[int]], kinds: str = "D_S") -> Tensor:
    inter = outputs.interactions
    if not inter:
        raise ConfigError("the bag-of-words loss needs the interactive re-parameterization")
    if kinds == "D_S":
        return loss_bow(inter[AttentionKind.D_S].vocab_dist, bags)
    terms = [loss_bow(o.vocab_dist, bags) for o in inter.values()]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ad.scale(total, 1.0 / len(terms))


def loss_total_stage2(model: PrefixLM, examples: Sequence[Example], with_bow: bool = True,
                      bow_kinds: str = "D_S") -> tuple[Tensor, dict[str, float]]:
    """Response NLL (plus the bag-of-words term) with live response prefixes."""
    outputs = model.response_outputs()
    injections = materialize(model.knowledge_bank, outputs.bank)
    nll = loss_stage2(model, examples, injections)
    parts = {"nll": float(nll.data), "ie_row_dev": row_sum_deviation(outputs)}
    if not with_bow:
        return nll, parts
    bow = bow_term(outputs, [e.bow for e in examples], bow_kinds)
    parts["bow"] = float(bow.data)
    return nll + bow, parts


# --- optimization -----------------------------------------------------------

def lr_schedule(step: int, warmup: int, total: int, base_lr: float) -> float:
    """Linear ramp from 0 to ``base_lr`` over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup > 0 and step <= warmup:
        return base_lr * step / warmup
    if total <= warmup:
        return base_lr if step < total else 0.0
    return base_lr * max(0.0, (total - step) / (total - warmup))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        grads = {n: g * s for n, g in grads.items()}
    return grads, norm


class AdamW:
    """Adam with decoupled weight decay (matrices only) over a store's trainable entries."""

    def __init__(self, store: ParamStore, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.store = store
        self.names = store.trainable_names()
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(store[n].data) for n in self.names}
        self.v = {n: np.zeros_like(store[n].data) for n in self.names}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for n in self.names:
            if not np.all(np.isfinite(grads[n])):
                raise NumericError(f"non-finite gradient for {n!r}; parameters left unchanged")
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for n in self.names:
            g = grads[n]
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            p = self.store[n].data
            update = (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            if self.weight_decay and p.ndim > 1:
                update = update + self.weight_decay * p
            self.store.assign(n, p - lr * update)


# --- stage driver -----------------------------------------------------------

@dataclass
class StageResult:
    checkpoint: Checkpoint
    model: PrefixLM
    log: list[dict] = field(default_factory=list)
    warnings: dict[str, int] = field(default_factory=dict)


def base_pretraining_pairs(corpus: Corpus, tokenizer: Tokenizer, rng: np.random.Generator,
                           mask_prob: float, max_len: int) -> list[tuple]:
    """Unconditional and denoising sequences over world facts and training responses."""
    texts = world_sentences(corpus) + [t.response for c in corpus.split("train") for t in c.turns]
    bos, eos, unk = tokenizer.bos_id, tokenizer.eos_id, tokenizer.unk_id
    pairs = []
    for text in texts:
        ids = tokenizer.tokenize(text)[: max_len - 1]
        target = tuple(ids) + (eos,)
        pairs.append(((bos, eos), target))
        noisy = [unk if rng.random() < mask_prob else i for i in ids]
        pairs.append(((bos, *noisy, eos), target))
    return pairs


def _optimize(model: PrefixLM, sc: StageConfig, epoch_items: Callable[[np.random.Generator], list],
              loss_fn: Callable[[list], tuple[Tensor, dict]], records: list[dict], sink=None) -> None:
    store = model.store
    names = store.trainable_names()
    rng = np.random.default_rng([sc.seed, 7919])
    first = epoch_items(rng)
    steps_per_epoch = max(1, math.ceil(len(first) / sc.batch_size))
    total = sc.epochs * steps_per_epoch
    if sc.max_steps is not None:
        total = min(total, sc.max_steps)
    opt = AdamW(store, (sc.beta1, sc.beta2), sc.adam_eps, sc.weight_decay)
    step = 0
    items = first
    with store.locked():
        for epoch in range(sc.epochs):
            if epoch:
                items = epoch_items(rng)
            order = rng.permutation(len(items))
            for start in range(0, len(items), sc.batch_size):
                if step >= total:
                    return
                step += 1
                chunk = [items[i] for i in order[start:start + sc.batch_size]]
                with Tape() as tape:
                    loss, parts = loss_fn(chunk)
                raw = dict(zip(names, tape.gradient(loss, [store[n] for n in names])))
                grads, norm = clip_by_global_norm(raw, sc.grad_clip_norm)
                # shifted by one so the first update is not zero and the last one is not wasted
                lr = lr_schedule(step, sc.warmup_steps, total + 1, sc.learning_rate)
                opt.step(grads, lr)
                rec = {"step": step, "stage": sc.stage, "epoch": epoch, "loss": float(loss.data),
                       "nll": parts.get("nll", float(loss.data)), "bow": parts.get("bow"),
                       "lr": lr, "grad_norm": norm, "ie_row_dev": parts.get("ie_row_dev")}
                records.append(rec)
                if sink is not None:
                    sink.write(json.dumps(rec) + "\n")


def _adopt_parent(parent: Checkpoint | None, stage: str, run_hash: str) -> PrefixLM:
    need = PREREQUISITES[stage]
    if parent is None:
        raise DependencyError(f"stage {stage!r} requires a {need!r} checkpoint")
    if parent.stage != need:
        raise DependencyError(f"stage {stage!r} requires a {need!r} checkpoint, got {parent.stage!r}")
    if parent.config_hash != run_hash:
        raise CheckpointError("parent checkpoint was trained under a different model/prefix configuration")
    return PrefixLM.from_checkpoint(parent)


def run_stage(stage_config: StageConfig, corpus: Corpus, parent: Checkpoint | None = None,
              run_config: RunConfig | None = None, log_path=None) -> StageResult:
    """Train one stage and return its self-contained checkpoint.

    Only the parameter group listed in ``FREEZE_SCHEDULE`` for the stage is
    trainable, and the flags are locked for the whole optimization.
    """
    sc = stage_config
    rc = run_config or toy_config(sc.seed)
    sections = rc.hashed_sections()
    run_hash = config_hash(sections)
    stage = sc.stage
    records: list[dict] = []
    warnings: dict[str, int] = {}

    if stage == "base":
        tokenizer = Tokenizer.fit(corpus.texts())
        cfg = effective_config(rc.model, tokenizer)
        model = PrefixLM(cfg, tokenizer, init_base_weights(cfg, seed=sc.seed), stage="base",
                         max_target_len=rc.max_target_len)
        lineage: dict = {}
    else:
        model = _adopt_parent(parent, stage, run_hash)
        lineage = {**parent.meta.get("lineage", {}), parent.stage: parent.digest()}
        model.stage = stage

    length = sc.prefix_length or rc.prefix.length
    if stage == "stage1":
        model.knowledge_spec = replace(rc.prefix, length=length)
        init_prefix_params(model.store, "kprefix", model.config, model.knowledge_spec, False, seed=sc.seed + 1)
    elif stage == "stage2":
        if sc.bow_loss_enabled and not sc.interactive_enabled:
            raise ConfigError("the bag-of-words loss requires the interactive re-parameterization")
        model.response_spec = replace(rc.prefix, length=length)
        model.interactive = sc.interactive_enabled
        init_prefix_params(model.store, "yprefix", model.config, model.response_spec, model.interactive,
                           seed=sc.seed + 2)
    elif stage == "prefix_baseline":
        model.response_spec = replace(rc.prefix, length=sc.prefix_length or 2 * rc.prefix.length)
        model.interactive = False
        init_prefix_params(model.store, "yprefix", model.config, model.response_spec, False, seed=sc.seed + 3)
    model.store.set_trainable(FREEZE_SCHEDULE[stage])

    dropout_rng = np.random.default_rng([sc.seed, 31]) if model.config.dropout > 0 else None
    train = model.examples(corpus.split("train"))

    if stage == "base":
        def items(rng):
            return base_pretraining_pairs(corpus, model.tokenizer, rng, sc.mask_prob, model.max_target_len)

        def loss_fn(chunk):
            return sequence_nll(model, chunk, None, "example", dropout_rng), {}
    elif stage == "finetune_baseline":
        def items(rng):
            return response_pairs(train)

        def loss_fn(chunk):
            return sequence_nll(model, chunk, None, "example", dropout_rng), {}
    elif stage == "stage1":
        grounded = [e for e in train if e.knowledge]
        warnings["skipped_no_knowledge"] = len(train) - len(grounded)
        if not grounded:
            raise EmptyLossError("no knowledge-grounded training turns")

        def items(rng):
            return grounded

        def loss_fn(chunk):
            out = model.knowledge_outputs()
            return sequence_nll(model, knowledge_pairs(chunk), materialize(out.bank, None), "example",
                                dropout_rng), {}
    else:
        with_bow = stage == "stage2" and sc.bow_loss_enabled
        warnings["empty_bow"] = sum(1 for e in train if not e.bow)

        def items(rng):
            return train

        def loss_fn(chunk):
            if with_bow or model.interactive:
                return loss_total_stage2(model, chunk, with_bow, sc.bow_kinds)
            out = model.response_outputs()
            inj = materialize(model.knowledge_bank, out.bank)
            return sequence_nll(model, response_pairs(chunk), inj, "example", dropout_rng), {}

    for name, n in warnings.items():
        if n:
            log.warning("%s: %d training turns (%s)", stage, n, name)

    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        _optimize(model, sc, items, loss_fn, records, sink)
    finally:
        if sink is not None:
            sink.close()

    model.store.set_trainable(())
    model.refresh_banks()
    extra = {"stage_config": {k: v for k, v in sc.__dict__.items()}, "warnings": warnings,
             "parameter_counts": model.parameter_counts()}
    ckpt = model.to_checkpoint(sections, lineage, extra)
    return StageResult(ckpt, model, records, warnings)


# --- diagnostics ------------------------------------------------------------

def teacher_forced_accuracy(model: PrefixLM, pairs: Sequence[tuple], injections: Injections | None = None,
                            batch_size: int = 64) -> float:
    """Fraction of target tokens whose argmax prediction is correct."""
    inj = model.injections() if injections is None else injections
    hits = total = 0
    for start in range(0, len(pairs), batch_size):
        batch = model.batch(pairs[start:start + batch_size])
        pred = model.logits(batch, inj).data.argmax(axis=-1)
        m = batch.tgt_mask
        hits += int(((pred == batch.tgt_out) & m).sum())
        total += int(m.sum())
    if total == 0:
        raise EmptyLossError("no target tokens to score")
    return hits / total


def write_log(records: Sequence[dict], path) -> None:
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
