"""End-to-end runs: the staged pipeline and the multi-seed ablation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import RunConfig, toy_config
from .data import Corpus
from .decoding import BeamConfig, EvalReport, evaluate, generate_split
from .training import StageResult, run_stage

VARIANTS = ("knowprefix", "no_interactive", "prefix_baseline")


def train_variants(corpus: Corpus, run_config: RunConfig | None = None,
                   variants: Sequence[str] = VARIANTS) -> dict[str, StageResult]:
    """Base model, the knowledge stage and every requested response-stage variant."""
    rc = run_config or toy_config()
    out = {"base": run_stage(rc.stage("base"), corpus, None, rc)}
    if {"knowprefix", "no_interactive"} & set(variants):
        out["stage1"] = run_stage(rc.stage("stage1"), corpus, out["base"].checkpoint, rc)
    if "knowprefix" in variants:
        out["knowprefix"] = run_stage(rc.stage("stage2"), corpus, out["stage1"].checkpoint, rc)
    if "no_interactive" in variants:
        sc = rc.stage("stage2", interactive_enabled=False, bow_loss_enabled=False)
        out["no_interactive"] = run_stage(sc, corpus, out["stage1"].checkpoint, rc)
    if "prefix_baseline" in variants:
        out["prefix_baseline"] = run_stage(rc.stage("prefix_baseline"), corpus, out["base"].checkpoint, rc)
    if "finetune" in variants:
        out["finetune"] = run_stage(rc.stage("finetune_baseline"), corpus, out["base"].checkpoint, rc)
    return out


@dataclass
class AblationResult:
    split: str
    seeds: list[int]
    reports: dict[str, list[EvalReport]] = field(default_factory=dict)

    def mean(self, variant: str, metric: str) -> float:
        return float(np.mean([getattr(r, metric) for r in self.reports[variant]]))

    def verdict(self, challenger: str, reference: str = "knowprefix", tie: float = 0.005) -> str:
        """``pass`` if the reference beats the challenger on mean F1 and KF1, ``inconclusive`` within ``tie`` F1."""
        df1 = self.mean(reference, "f1") - self.mean(challenger, "f1")
        dkf1 = self.mean(reference, "kf1") - self.mean(challenger, "kf1")
        if abs(df1) <= tie:
            return "inconclusive"
        return "pass" if df1 >= 0 and dkf1 >= 0 else "fail"

    def to_dict(self) -> dict:
        return {"split": self.split, "seeds": self.seeds,
                "reports": {k: [r.to_dict() for r in v] for k, v in self.reports.items()},
                "means": {k: {m: self.mean(k, m) for m in ("f1", "kf1", "ppl")} for k in self.reports}}


def run_ablation(corpus: Corpus, seeds: Sequence[int] = (0, 1, 2), split: str = "test_seen",
                 beam: BeamConfig | None = None, variants: Sequence[str] = VARIANTS,
                 run_config_factory=toy_config) -> AblationResult:
    beam = beam or BeamConfig()
    result = AblationResult(split, list(seeds), {v: [] for v in variants})
    part = corpus.split(split)
    for seed in seeds:
        trained = train_variants(corpus, run_config_factory(seed), variants)
        for v in variants:
            model = trained[v].model
            rows = generate_split(model, model.examples(part), beam, split)
            result.reports[v].append(evaluate(rows, part, v, split, model))
    return result
