"""A base model plus whatever prefix banks a training stage attached to it."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import ParamStore
from .checkpoint import Checkpoint, config_hash
from .data import Corpus, Example, Tokenizer, make_examples
from .exceptions import CheckpointError, ConfigError
from .prefix import (Bank, PrefixOutputs, PrefixSpec, bank_count, bank_from_arrays, bank_to_arrays,
                     build_bank, freeze_bank, materialize)
from .transformer import Batch, Injections, ModelConfig, forward_batch, make_batch


@dataclass
class PrefixLM:
    config: ModelConfig
    tokenizer: Tokenizer
    store: ParamStore
    stage: str = "base"
    knowledge_spec: PrefixSpec | None = None
    response_spec: PrefixSpec | None = None
    interactive: bool = False
    max_target_len: int = 40
    knowledge_bank: Bank | None = None
    response_bank: Bank | None = None

    # --- prefixes -----------------------------------------------------------

    def injections(self) -> Injections:
        """Materialized, input-independent injections (computed once per stage)."""
        return materialize(self.knowledge_bank, self.response_bank)

    def knowledge_outputs(self) -> PrefixOutputs | None:
        if self.knowledge_spec is None:
            return None
        return build_bank(self.store, "kprefix", self.config, self.knowledge_spec, interactive=False)

    def response_outputs(self) -> PrefixOutputs | None:
        if self.response_spec is None:
            return None
        return build_bank(self.store, "yprefix", self.config, self.response_spec, self.interactive,
                          knowledge_root="kprefix" if self.interactive else None)

    def live_injections(self) -> Injections:
        """Injections recomputed from the re-parameterization networks."""
        k = self.knowledge_outputs()
        y = self.response_outputs()
        return materialize(k.bank if k else None, y.bank if y else None)

    def refresh_banks(self) -> None:
        k = self.knowledge_outputs()
        y = self.response_outputs()
        self.knowledge_bank = freeze_bank(k.bank) if k else None
        self.response_bank = freeze_bank(y.bank) if y else None

    def prefix_total(self) -> int:
        return sum(s.length for s in (self.knowledge_spec, self.response_spec) if s is not None)

    # --- data ---------------------------------------------------------------

    def max_context_len(self) -> int:
        room = self.config.max_seq_len - self.prefix_total()
        if self.config.architecture == "decoder_only":
            room -= self.max_target_len + 1
        if room < 3:
            raise ConfigError("max_seq_len leaves no room for the dialogue context")
        return room

    def examples(self, corpus: Corpus) -> list[Example]:
        return make_examples(corpus, self.tokenizer, self.max_context_len(), self.max_target_len)

    def batch(self, pairs) -> Batch:
        t = self.tokenizer
        return make_batch(self.config, pairs, t.pad_id, t.bos_id, t.sep_id)

    def logits(self, batch: Batch, injections: Injections | None = None, rng=None):
        return forward_batch(self.store, self.config, batch, self.injections() if injections is None else injections, rng)

    # --- accounting ---------------------------------------------------------

    def parameter_counts(self) -> dict[str, int]:
        counts = {
            "total": self.store.count(),
            "trainable": self.store.count(trainable_only=True),
            "lm": sum(self.store[n].size for n in self.store.names("lm.")),
            "knowledge_prefix": sum(self.store[n].size for n in self.store.names("kprefix.")),
            "response_prefix": sum(self.store[n].size for n in self.store.names("yprefix.")),
        }
        counts["deployed_prefix"] = sum(bank_count(self.config, s.length)
                                        for s in (self.knowledge_spec, self.response_spec) if s is not None)
        return counts

    # --- persistence --------------------------------------------------------

    def to_checkpoint(self, run_sections: dict, lineage: dict | None = None, extra_meta: dict | None = None) -> Checkpoint:
        arrays = dict(self.store.arrays())
        if self.knowledge_bank:
            arrays.update(bank_to_arrays(self.knowledge_bank, "bank.k"))
        if self.response_bank:
            arrays.update(bank_to_arrays(self.response_bank, "bank.y"))
        meta = {
            "run_config": run_sections,
            "model_config": self.config.to_dict(),
            "vocab": self.tokenizer.vocab(),
            "knowledge_spec": self.knowledge_spec.to_dict() if self.knowledge_spec else None,
            "response_spec": self.response_spec.to_dict() if self.response_spec else None,
            "interactive": self.interactive,
            "max_target_len": self.max_target_len,
            "lineage": dict(lineage or {}),
            **(extra_meta or {}),
        }
        return Checkpoint(self.stage, config_hash(run_sections), arrays, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "PrefixLM":
        meta = ckpt.meta
        try:
            cfg = ModelConfig(**meta["model_config"])
            tok = Tokenizer(meta["vocab"])
        except (KeyError, TypeError) as err:
            raise CheckpointError(f"checkpoint metadata incomplete: {err}") from None
        store = ParamStore()
        for name, arr in ckpt.arrays.items():
            if not name.startswith("bank."):
                store.add(name, arr, trainable=False)
        kspec = PrefixSpec(**meta["knowledge_spec"]) if meta.get("knowledge_spec") else None
        yspec = PrefixSpec(**meta["response_spec"]) if meta.get("response_spec") else None
        return cls(
            config=cfg, tokenizer=tok, store=store, stage=ckpt.stage,
            knowledge_spec=kspec, response_spec=yspec, interactive=bool(meta.get("interactive")),
            max_target_len=int(meta.get("max_target_len", 40)),
            knowledge_bank=bank_from_arrays(ckpt.arrays, "bank.k", cfg),
            response_bank=bank_from_arrays(ckpt.arrays, "bank.y", cfg),
        )

    def copy(self) -> "PrefixLM":
        return replace(self, store=self.store.copy())


def effective_config(cfg: ModelConfig, tokenizer: Tokenizer) -> ModelConfig:
    """Shrink the embedding table to the fitted vocabulary (capped by the config)."""
    if len(tokenizer) > cfg.vocab_size:
        raise ConfigError(f"vocabulary of {len(tokenizer)} words exceeds vocab_size {cfg.vocab_size}")
    return replace(cfg, vocab_size=len(tokenizer))


def row_sum_deviation(outputs: PrefixOutputs | None) -> float:
    if outputs is None or not outputs.interactions:
        return 0.0
    return float(max(np.max(np.abs(o.vocab_dist.data.sum(axis=-1) - 1.0)) for o in outputs.interactions.values()))


__all__ = ["PrefixLM", "effective_config", "row_sum_deviation"]
