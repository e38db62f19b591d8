"""Run configuration: a versioned JSON document with a fixed schema."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .exceptions import ConfigError
from .prefix import PrefixSpec
from .transformer import ModelConfig

CONFIG_VERSION = 1
STAGES = ("base", "stage1", "stage2", "finetune_baseline", "prefix_baseline")


@dataclass(frozen=True)
class StageConfig:
    stage: str = "stage2"
    learning_rate: float = 3e-5
    epochs: int = 40
    warmup_steps: int = 2000
    batch_size: int = 32
    grad_clip_norm: float = 1.0
    seed: int = 0
    bow_loss_enabled: bool = True
    interactive_enabled: bool = True
    prefix_length: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    max_steps: int | None = None
    bow_kinds: str = "D_S"
    mask_prob: float = 0.3

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.bow_kinds not in ("D_S", "all"):
            raise ConfigError("bow_kinds must be 'D_S' or 'all'")
        if self.prefix_length is not None and self.prefix_length < 1:
            raise ConfigError("prefix_length must be >= 1")


@dataclass(frozen=True)
class DecodeSettings:
    beam_size: int = 3
    min_length: int = 20
    no_repeat_ngram: int = 3
    max_length: int = 40


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    prefix: PrefixSpec = field(default_factory=PrefixSpec)
    stages: dict[str, StageConfig] = field(default_factory=dict)
    decode: DecodeSettings = field(default_factory=DecodeSettings)
    max_target_len: int = 40
    paths: dict[str, str | None] = field(default_factory=lambda: {"corpus": None, "checkpoints": None, "reports": None})
    seed: int = 0

    def stage(self, name: str, **overrides) -> StageConfig:
        base = self.stages.get(name, StageConfig(stage=name))
        return replace(base, stage=name, seed=self.seed, **overrides)

    def hashed_sections(self) -> dict:
        """The sections every checkpoint's config hash is computed over."""
        return {"model": asdict(self.model), "prefix": asdict(self.prefix)}

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "model": asdict(self.model),
            "prefix": asdict(self.prefix),
            "stages": {k: {f: v for f, v in asdict(s).items() if f != "stage"} for k, s in self.stages.items()},
            "decode": asdict(self.decode),
            "max_target_len": self.max_target_len,
            "paths": dict(self.paths),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check_keys(d, {"version", "seed", "model", "prefix", "stages", "decode", "max_target_len", "paths"}, "config")
        if d.get("version") != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {d.get('version')!r}")
        stages = {}
        for name, body in d.get("stages", {}).items():
            if name not in STAGES:
                raise ConfigError(f"unknown stage section {name!r}")
            stages[name] = _build(StageConfig, dict(body, stage=name), f"stages.{name}")
        paths = d.get("paths", {})
        _check_keys(paths, {"corpus", "checkpoints", "reports"}, "paths")
        return cls(
            model=_build(ModelConfig, d.get("model", {}), "model"),
            prefix=_build(PrefixSpec, d.get("prefix", {}), "prefix"),
            stages=stages,
            decode=_build(DecodeSettings, d.get("decode", {}), "decode"),
            max_target_len=int(d.get("max_target_len", 40)),
            paths={"corpus": None, "checkpoints": None, "reports": None, **paths},
            seed=int(d.get("seed", 0)),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err.msg})") from None


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _build(cls, d: dict, where: str):
    _check_keys(d, {f.name for f in fields(cls)}, where)
    try:
        return cls(**d)
    except TypeError as err:
        raise ConfigError(f"{where}: {err}") from None


def toy_config(seed: int = 0) -> RunConfig:
    """Desk-scale preset used by the test suite and the default CLI runs."""
    stages = {
        "base": StageConfig(stage="base", learning_rate=3e-3, epochs=12, warmup_steps=60, batch_size=32,
                            weight_decay=0.0),
        "stage1": StageConfig(stage="stage1", learning_rate=5e-3, epochs=30, warmup_steps=30, batch_size=32,
                              weight_decay=0.0),
        "stage2": StageConfig(stage="stage2", learning_rate=5e-3, epochs=30, warmup_steps=30, batch_size=32,
                              weight_decay=0.0),
        "finetune_baseline": StageConfig(stage="finetune_baseline", learning_rate=1e-3, epochs=20,
                                         warmup_steps=30, batch_size=32, weight_decay=0.0),
        "prefix_baseline": StageConfig(stage="prefix_baseline", learning_rate=5e-3, epochs=30, warmup_steps=30,
                                       batch_size=32, weight_decay=0.0, prefix_length=40),
    }
    return RunConfig(
        model=ModelConfig(d_model=64, n_layers=2, n_heads=2, d_ff=128, vocab_size=512, max_seq_len=128),
        prefix=PrefixSpec(length=20, d_m=128, n_heads=2),
        stages=stages,
        seed=seed,
    )


def toy_overfit_config(seed: int = 0) -> RunConfig:
    """Toy architecture with long schedules, for memorizing a few dozen conversations."""
    rc = toy_config(seed)
    epochs = {"base": 40, "stage1": 150, "stage2": 150, "finetune_baseline": 60, "prefix_baseline": 150}
    rc.stages = {name: replace(sc, epochs=epochs[name]) for name, sc in rc.stages.items()}
    return rc


def paper_config(seed: int = 0) -> RunConfig:
    """Large-model preset mirroring the published hyperparameters (accounting only at desk scale)."""
    stages = {name: StageConfig(stage=name) for name in STAGES}
    stages["prefix_baseline"] = StageConfig(stage="prefix_baseline", prefix_length=40)
    return RunConfig(
        model=ModelConfig(d_model=1024, n_layers=12, n_heads=16, d_ff=4096, vocab_size=50265, max_seq_len=1024),
        prefix=PrefixSpec(length=20, d_m=800, n_heads=8),
        stages=stages,
        seed=seed,
    )


PRESETS = {"toy": toy_config, "toy-overfit": toy_overfit_config, "paper": paper_config}
