"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

from pathlib import Path
from typing import Iterable

from .data import SPLITS, Conversation, Corpus, load_corpus


def check_corpus(X, allow_empty: bool = False) -> Corpus:
    """Accept a Corpus, an iterable of conversations or a corpus file path."""
    if isinstance(X, Corpus):
        corpus = X
    elif isinstance(X, (str, Path)):
        corpus = load_corpus(X)
    elif isinstance(X, Iterable):
        convs = list(X)
        bad = [type(c).__name__ for c in convs if not isinstance(c, Conversation)]
        if bad:
            raise TypeError(f"expected Conversation items, got {bad[0]}")
        corpus = Corpus(convs)
    else:
        raise TypeError(f"expected a Corpus, conversations or a path, got {type(X).__name__}")
    if not allow_empty and corpus.n_turns() == 0:
        raise ValueError("corpus has no dialogue turns")
    return corpus


def check_split(name: str) -> str:
    if name not in SPLITS:
        raise ValueError(f"unknown split {name!r}; expected one of {', '.join(SPLITS)}")
    return name


def check_positive_int(name: str, value, allow_none: bool = False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return value
