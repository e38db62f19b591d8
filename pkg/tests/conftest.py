import numpy as np
import pytest

from kgprefix.autodiff import ParamStore
from kgprefix.data import generate_synthetic_corpus
from kgprefix.transformer import ModelConfig, init_base_weights


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_model=8, n_layers=2, n_heads=2, d_ff=16, vocab_size=13, max_seq_len=32, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def random_weights(cfg: ModelConfig, seed: int = 0):
    """Base weights with larger-than-default scale, so perturbations are visible in the logits."""
    store = init_base_weights(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    out = ParamStore()
    for name, t in store.items():
        arr = t.data
        if arr.ndim == 2:
            arr = rng.normal(0.0, 0.5, size=arr.shape)
        out.add(name, arr)
    return out


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(seed=0, n_conversations=32, topics=4)


@pytest.fixture(scope="session")
def default_corpus():
    return generate_synthetic_corpus()


@pytest.fixture(scope="session")
def pipeline():
    """A quickly trained base -> stage1 -> stage2 chain on an 80-conversation corpus."""
    from kgprefix.config import toy_config
    from kgprefix.training import run_stage

    corpus = generate_synthetic_corpus(seed=0, n_conversations=80, topics=4)
    rc = toy_config(0)
    base = run_stage(rc.stage("base", max_steps=80), corpus, None, rc)
    stage1 = run_stage(rc.stage("stage1", max_steps=60), corpus, base.checkpoint, rc)
    stage2 = run_stage(rc.stage("stage2", max_steps=60), corpus, stage1.checkpoint, rc)
    return {"corpus": corpus, "config": rc, "base": base, "stage1": stage1, "stage2": stage2}


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def verdicts(request):
    """Collects one status line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
