"""scikit-learn style wrappers around the staged trainer.

Every estimator takes a dialogue corpus as ``X`` (a :class:`Corpus`, a
list of conversations or a corpus file path); ``y`` is ignored because the
targets live inside the turns.
"""
from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

import numpy as np

from .config import PRESETS, RunConfig
from .data import Example, Tokenizer, make_examples
from .decoding import BeamConfig, EvalReport, evaluate, generate_split, perplexity, unigram_f1
from .model import PrefixLM
from .training import StageResult, run_stage
from .validation import check_corpus, check_positive_int


def _run_config(preset: str, seed: int) -> RunConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return PRESETS[preset](seed)


def _overrides(epochs, learning_rate, max_steps) -> dict:
    out = {}
    if epochs is not None:
        out["epochs"] = check_positive_int("epochs", epochs)
    if learning_rate is not None:
        out["learning_rate"] = float(learning_rate)
    if max_steps is not None:
        out["max_steps"] = check_positive_int("max_steps", max_steps)
    return out


class DialogueVectorizer(TransformerMixin, BaseEstimator):
    """Learn the word vocabulary and turn dialogue turns into token-id examples."""

    def __init__(self, max_context_len: int = 100, max_target_len: int = 40):
        self.max_context_len = max_context_len
        self.max_target_len = max_target_len

    def fit(self, X, y=None):
        corpus = check_corpus(X)
        self.tokenizer_ = Tokenizer.fit(corpus.texts())
        self.vocabulary_size_ = len(self.tokenizer_)
        return self

    def transform(self, X) -> list[Example]:
        check_is_fitted(self, "tokenizer_")
        check_positive_int("max_context_len", self.max_context_len)
        return make_examples(check_corpus(X), self.tokenizer_, self.max_context_len, self.max_target_len)


class BaseLanguageModel(BaseEstimator):
    """Full-parameter pre-training of the base transformer on the corpus text."""

    def __init__(self, preset: str = "toy", seed: int = 0, epochs: int | None = None,
                 learning_rate: float | None = None, max_steps: int | None = None):
        self.preset = preset
        self.seed = seed
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.max_steps = max_steps

    def fit(self, X, y=None):
        corpus = check_corpus(X)
        rc = _run_config(self.preset, self.seed)
        result = run_stage(rc.stage("base", **_overrides(self.epochs, self.learning_rate, self.max_steps)), corpus, None, rc)
        self.run_config_ = rc
        self._store_result(result)
        return self

    def _store_result(self, result: StageResult):
        self.checkpoint_ = result.checkpoint
        self.model_ = result.model
        self.training_log_ = result.log


class _ResponseGeneratorMixin:
    """Generation, scoring and reporting shared by the response-stage estimators."""

    def _beam(self) -> BeamConfig:
        return BeamConfig(self.beam_size, self.min_length, self.no_repeat_ngram, self.max_length)

    def _examples(self, X):
        check_is_fitted(self, "model_")
        corpus = check_corpus(X)
        return corpus, self.model_.examples(corpus)

    def generate(self, X) -> list[dict]:
        corpus, examples = self._examples(X)
        return generate_split(self.model_, examples, self._beam())

    def predict(self, X) -> list[str]:
        """One generated response per turn, in corpus order."""
        return [row["text"] for row in self.generate(X)]

    def score(self, X, y=None) -> float:
        """Mean unigram F1 of the generated responses against the gold ones."""
        corpus, _ = self._examples(X)
        refs = [t.response for c in corpus for t in c.turns]
        return float(np.mean([unigram_f1(h, r) for h, r in zip(self.predict(corpus), refs)]))

    def perplexity(self, X) -> float:
        _, examples = self._examples(X)
        return perplexity(self.model_, examples)

    def evaluate(self, X, name: str | None = None, split: str = "") -> EvalReport:
        corpus, _ = self._examples(X)
        return evaluate(self.generate(corpus), corpus, name or type(self).__name__, split, self.model_)

    def parameter_counts(self) -> dict[str, int]:
        check_is_fitted(self, "model_")
        return self.model_.parameter_counts()

    def _fitted_base(self, corpus, rc: RunConfig):
        if self.base_model is None:
            return run_stage(rc.stage("base"), corpus, None, rc).checkpoint
        check_is_fitted(self.base_model, "checkpoint_")
        return self.base_model.checkpoint_


class KnowPrefixTuner(_ResponseGeneratorMixin, BaseEstimator):
    """Two-stage prefix tuning: a knowledge prefix first, then an interactive response prefix.

    ``base_model`` may be a fitted :class:`BaseLanguageModel`; otherwise one
    is pre-trained from ``X`` with the same preset and seed.
    """

    def __init__(self, base_model: BaseLanguageModel | None = None, preset: str = "toy", seed: int = 0,
                 prefix_length: int | None = None, interactive: bool = True, bow: bool = True,
                 stage1_epochs: int | None = None, stage2_epochs: int | None = None,
                 max_steps: int | None = None, beam_size: int = 3, min_length: int = 20,
                 no_repeat_ngram: int = 3, max_length: int = 40):
        self.base_model = base_model
        self.preset = preset
        self.seed = seed
        self.prefix_length = prefix_length
        self.interactive = interactive
        self.bow = bow
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.max_steps = max_steps
        self.beam_size = beam_size
        self.min_length = min_length
        self.no_repeat_ngram = no_repeat_ngram
        self.max_length = max_length

    def fit(self, X, y=None):
        corpus = check_corpus(X)
        rc = _run_config(self.preset, self.seed)
        length = {"prefix_length": check_positive_int("prefix_length", self.prefix_length, allow_none=True)}
        base = self._fitted_base(corpus, rc)
        s1 = run_stage(rc.stage("stage1", **length, **_overrides(self.stage1_epochs, None, self.max_steps)),
                       corpus, base, rc)
        s2_cfg = rc.stage("stage2", **length, interactive_enabled=bool(self.interactive),
                          bow_loss_enabled=bool(self.bow and self.interactive),
                          **_overrides(self.stage2_epochs, None, self.max_steps))
        s2 = run_stage(s2_cfg, corpus, s1.checkpoint, rc)
        self.run_config_ = rc
        self.knowledge_checkpoint_ = s1.checkpoint
        self.knowledge_model_ = s1.model
        self.checkpoint_ = s2.checkpoint
        self.model_: PrefixLM = s2.model
        self.training_log_ = s1.log + s2.log
        return self


class PrefixTuner(_ResponseGeneratorMixin, BaseEstimator):
    """Single-bank prefix tuning baseline (no knowledge stage)."""

    def __init__(self, base_model: BaseLanguageModel | None = None, preset: str = "toy", seed: int = 0,
                 prefix_length: int = 40, epochs: int | None = None, max_steps: int | None = None,
                 beam_size: int = 3, min_length: int = 20, no_repeat_ngram: int = 3, max_length: int = 40):
        self.base_model = base_model
        self.preset = preset
        self.seed = seed
        self.prefix_length = prefix_length
        self.epochs = epochs
        self.max_steps = max_steps
        self.beam_size = beam_size
        self.min_length = min_length
        self.no_repeat_ngram = no_repeat_ngram
        self.max_length = max_length

    def fit(self, X, y=None):
        corpus = check_corpus(X)
        rc = _run_config(self.preset, self.seed)
        sc = rc.stage("prefix_baseline", prefix_length=check_positive_int("prefix_length", self.prefix_length),
                      **_overrides(self.epochs, None, self.max_steps))
        result = run_stage(sc, corpus, self._fitted_base(corpus, rc), rc)
        self.run_config_ = rc
        self.checkpoint_ = result.checkpoint
        self.model_ = result.model
        self.training_log_ = result.log
        return self


class FineTuner(_ResponseGeneratorMixin, BaseEstimator):
    """Full-parameter fine-tuning baseline."""

    def __init__(self, base_model: BaseLanguageModel | None = None, preset: str = "toy", seed: int = 0,
                 epochs: int | None = None, learning_rate: float | None = None, max_steps: int | None = None,
                 beam_size: int = 3, min_length: int = 20, no_repeat_ngram: int = 3, max_length: int = 40):
        self.base_model = base_model
        self.preset = preset
        self.seed = seed
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.max_steps = max_steps
        self.beam_size = beam_size
        self.min_length = min_length
        self.no_repeat_ngram = no_repeat_ngram
        self.max_length = max_length

    def fit(self, X, y=None):
        corpus = check_corpus(X)
        rc = _run_config(self.preset, self.seed)
        sc = rc.stage("finetune_baseline", **_overrides(self.epochs, self.learning_rate, self.max_steps))
        result = run_stage(sc, corpus, self._fitted_base(corpus, rc), rc)
        self.run_config_ = rc
        self.checkpoint_ = result.checkpoint
        self.model_ = result.model
        self.training_log_ = result.log
        return self
