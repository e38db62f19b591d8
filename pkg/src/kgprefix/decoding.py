"""Constrained beam search and the PPL / F1 / KF1 metric suite."""
from __future__ import annotations

import json
import re
import statistics
import string
import time
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .data import Corpus, Example
from .exceptions import AlignmentError, CorpusFormatError, DecodingError, EmptyLossError
from .model import PrefixLM
from .training import response_pairs, sequence_nll
from .transformer import Injections, decode, encode

StepFn = Callable[[Sequence[tuple[int, ...]]], np.ndarray]


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 3
    min_length: int = 20
    no_repeat_ngram: int = 3
    max_length: int = 40

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if not 0 <= self.min_length < self.max_length:
            raise ValueError("need 0 <= min_length < max_length")
        if self.no_repeat_ngram < 0:
            raise ValueError("no_repeat_ngram must be >= 0")


@dataclass(frozen=True)
class GenerationOutput:
    ids: tuple[int, ...]
    text: str
    token_logprobs: tuple[float, ...]
    score: float
    normalized_score: float
    dropped: int = 0

    @property
    def length(self) -> int:
        """Generated tokens, not counting a final EOS."""
        return len(self.ids)


# --- masks ------------------------------------------------------------------

def blocked_tokens(ids: Sequence[int], n: int) -> set[int]:
    """Tokens that would complete an n-gram already present in ``ids``."""
    if n <= 0 or len(ids) < n - 1:
        return set()
    if n == 1:
        return set(ids)
    tail = tuple(ids[len(ids) - n + 1:])
    out = set()
    for i in range(len(ids) - n + 1):
        if tuple(ids[i:i + n - 1]) == tail:
            out.add(ids[i + n - 1])
    return out


def has_repeated_ngram(ids: Sequence[int], n: int) -> bool:
    grams = [tuple(ids[i:i + n]) for i in range(len(ids) - n + 1)]
    return len(grams) != len(set(grams))


def _mask_row(row: np.ndarray, ids: Sequence[int], config: BeamConfig, eos: int) -> np.ndarray:
    row = np.array(row, dtype=np.float64)
    if len(ids) < config.min_length:
        row[eos] = -np.inf
    for tok in blocked_tokens(ids, config.no_repeat_ngram):
        row[tok] = -np.inf
    return row


# --- search -----------------------------------------------------------------

@dataclass
class _Hyp:
    ids: tuple[int, ...]
    logps: tuple[float, ...]
    score: float


def _finish(h: _Hyp, eos_appended: bool, detok, dropped: int) -> GenerationOutput:
    n = len(h.logps)
    return GenerationOutput(h.ids, detok(h.ids) if detok else "", h.logps, h.score, h.score / max(n, 1), dropped)


def beam_search(step_fn: StepFn, config: BeamConfig, eos: int,
                detokenize: Callable[[Sequence[int]], str] | None = None) -> GenerationOutput:
    """Length-normalized beam search under min-length and n-gram constraints.

    ``step_fn`` maps a list of equal-length generated prefixes (without BOS)
    to next-token log-probabilities, one row per prefix. Hypotheses that
    emit EOS leave the beam and shrink it, so ``beam_size=1`` is exactly
    greedy decoding. A hypothesis with every token masked is dropped; if
    all are dropped before any finishes, ``DecodingError`` is raised.
    Candidates are ranked by score, then token id, then parent rank.
    """
    live = [_Hyp((), (), 0.0)]
    finished: list[_Hyp] = []
    dropped = 0
    for _ in range(config.max_length):
        if not live:
            break
        rows = np.asarray(step_fn([h.ids for h in live]))
        cands = []
        for rank, (h, row) in enumerate(zip(live, rows)):
            row = _mask_row(row, h.ids, config, eos)
            ok = np.flatnonzero(np.isfinite(row))
            if ok.size == 0:
                dropped += 1
                continue
            for tok in ok:
                cands.append((h.score + row[tok], int(tok), rank, float(row[tok])))
        if not cands:
            live = []
            break
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        slots = config.beam_size - len(finished)
        new_live = []
        for total, tok, rank, lp in cands[:slots]:
            parent = live[rank]
            if tok == eos:
                finished.append(_Hyp(parent.ids, parent.logps + (lp,), total))
            else:
                new_live.append(_Hyp(parent.ids + (tok,), parent.logps + (lp,), total))
        live = new_live
    finished.extend(live)
    if not finished:
        raise DecodingError("n-gram blocking removed every hypothesis")
    best = max(finished, key=lambda h: (h.score / max(len(h.logps), 1), tuple(-i for i in h.ids)))
    return _finish(best, True, detokenize, dropped)


def greedy_decode(step_fn: StepFn, config: BeamConfig, eos: int,
                  detokenize: Callable[[Sequence[int]], str] | None = None) -> GenerationOutput:
    ids: list[int] = []
    logps: list[float] = []
    for _ in range(config.max_length):
        row = _mask_row(np.asarray(step_fn([tuple(ids)]))[0], ids, config, eos)
        if not np.isfinite(row).any():
            raise DecodingError(f"n-gram blocking removed every token after {len(ids)} steps")
        tok = int(np.argmax(row))
        logps.append(float(row[tok]))
        if tok == eos:
            break
        ids.append(tok)
    h = _Hyp(tuple(ids), tuple(logps), float(sum(logps)))
    return _finish(h, True, detokenize, 0)


# --- model adapters ---------------------------------------------------------

def model_step_fn(model: PrefixLM, context: Sequence[int], injections: Injections | None = None) -> StepFn:
    """Next-token log-probabilities for ``model`` given a tokenized context."""
    cfg, params, tok = model.config, model.store, model.tokenizer
    inj = model.injections() if injections is None else injections
    if cfg.architecture == "encoder_decoder":
        src = np.asarray([context], dtype=np.int64)
        src_len = np.asarray([len(context)])
        memory = encode(params, cfg, src, src_len, inj)

        def step(prefixes):
            n = len(prefixes)
            tgt = np.asarray([[tok.bos_id, *p] for p in prefixes], dtype=np.int64)
            mem = ad.Tensor(np.broadcast_to(memory.data, (n,) + memory.shape[1:]).copy())
            logits = decode(params, cfg, tgt, mem, np.repeat(src_len, n), inj)
            return ad.log_softmax(logits[:, -1], axis=-1).data
    else:
        head = [*context, tok.sep_id]

        def step(prefixes):
            seq = np.asarray([head + list(p) for p in prefixes], dtype=np.int64)
            logits = decode(params, cfg, seq, injections=inj)
            return ad.log_softmax(logits[:, -1], axis=-1).data
    return step


def generate(model: PrefixLM, context: Sequence[int], config: BeamConfig,
             injections: Injections | None = None) -> GenerationOutput:
    step = model_step_fn(model, context, injections)
    return beam_search(step, config, model.tokenizer.eos_id, model.tokenizer.detokenize)


# --- metrics ----------------------------------------------------------------

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation and articles, squeeze whitespace."""
    text = text.lower().translate(_PUNCT)
    return " ".join(_ARTICLES.sub(" ", text).split())


def unigram_f1(hypothesis: str, reference: str) -> float:
    hyp = normalize_answer(hypothesis).split()
    ref = normalize_answer(reference).split()
    if not hyp or not ref:
        return 0.0
    common = sum((Counter(hyp) & Counter(ref)).values())
    if common == 0:
        return 0.0
    p, r = common / len(hyp), common / len(ref)
    return 2 * p * r / (p + r)


def knowledge_f1(hypothesis: str, knowledge: str) -> float:
    return unigram_f1(hypothesis, knowledge)


def is_knowledge_free(knowledge: str, flagged: bool = False) -> bool:
    return flagged or not normalize_answer(knowledge)


def corpus_knowledge_f1(hypotheses: Sequence[str], knowledge: Sequence[str],
                        knowledge_free: Sequence[bool] | None = None) -> tuple[float, int]:
    """Mean KF1 over turns that have grounded knowledge, and how many were scored."""
    flags = knowledge_free or [False] * len(knowledge)
    scores = [knowledge_f1(h, k) for h, k, f in zip(hypotheses, knowledge, flags) if not is_knowledge_free(k, f)]
    return (float(np.mean(scores)) if scores else 0.0), len(scores)


def perplexity(model: PrefixLM, examples: Sequence[Example], injections: Injections | None = None,
               batch_size: int = 64) -> float:
    """exp of the mean teacher-forced NLL over every response token."""
    if not examples:
        raise EmptyLossError("cannot compute perplexity of an empty split")
    inj = model.injections() if injections is None else injections
    total = 0.0
    count = 0
    pairs = response_pairs(examples)
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        total += float(sequence_nll(model, chunk, inj, "sum").data)
        count += sum(len(y) for _, y in chunk)
    return float(np.exp(total / count))


def timing_probe(fn: Callable[[object], object], items: Iterable, warmup: int = 1) -> float:
    """Median wall-clock milliseconds of ``fn`` per item."""
    items = list(items)
    for it in items[:warmup]:
        fn(it)
    times = []
    for it in items:
        t0 = time.perf_counter()
        fn(it)
        times.append((time.perf_counter() - t0) * 1000.0)
    return float(statistics.median(times)) if times else 0.0


# --- generation files and reports -------------------------------------------

def generate_split(model: PrefixLM, examples: Sequence[Example], config: BeamConfig,
                   split: str = "") -> list[dict]:
    inj = model.injections()
    rows = []
    for e in examples:
        out = generate(model, e.context, config, inj)
        rows.append({"conv_id": e.conv_id, "turn": e.turn, "split": split, "text": out.text,
                     "ids": list(out.ids), "token_logprobs": list(out.token_logprobs),
                     "score": out.score, "normalized_score": out.normalized_score})
    return rows


def save_generations(rows: Sequence[dict], path) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")


def load_generations(path) -> list[dict]:
    rows = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as err:
            raise CorpusFormatError(f"invalid JSON ({err.msg})", i) from None
        for key in ("conv_id", "turn", "text"):
            if key not in rec:
                raise CorpusFormatError(f"missing field {key!r}", i)
        rows.append(rec)
    return rows


def align(rows: Sequence[dict], corpus: Corpus) -> list[tuple[dict, object]]:
    """Pair generation records with corpus turns in order; fail on the first mismatch."""
    turns = [(c.id, i, t) for c in corpus for i, t in enumerate(c.turns, start=1)]
    for k in range(max(len(rows), len(turns))):
        if k >= len(rows):
            raise AlignmentError(f"generations end before turn {turns[k][0]}#{turns[k][1]}")
        if k >= len(turns):
            raise AlignmentError(f"extra generation {rows[k]['conv_id']}#{rows[k]['turn']}")
        if (rows[k]["conv_id"], int(rows[k]["turn"])) != turns[k][:2]:
            raise AlignmentError(f"first misaligned record: {rows[k]['conv_id']}#{rows[k]['turn']} "
                                 f"(expected {turns[k][0]}#{turns[k][1]})")
    return [(r, t[2]) for r, t in zip(rows, turns)]


@dataclass
class EvalReport:
    model: str
    split: str
    f1: float
    kf1: float
    n_examples: int
    n_kf1: int
    ppl: float | None = None
    trainable_params: int | None = None
    total_params: int | None = None
    deployed_prefix_params: int | None = None
    wall_ms_per_example: float | None = None

    @property
    def trainable_ratio(self) -> float | None:
        if not self.trainable_params or not self.total_params:
            return None
        return self.trainable_params / self.total_params

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable_ratio"] = self.trainable_ratio
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def table_row(self) -> str:
        ppl = f"{self.ppl:.2f}" if self.ppl is not None else "-"
        para = _human(self.trainable_params) if self.trainable_params else "-"
        return f"| {self.model} | {ppl} | {100 * self.f1:.2f} | {100 * self.kf1:.2f} | {para} |"


TABLE_HEADER = "| Model | PPL | F1 | KF1 | #Para |\n|---|---|---|---|---|"


def render_table(reports: Sequence[EvalReport]) -> str:
    return "\n".join([TABLE_HEADER, *(r.table_row() for r in reports)])


def _human(n: int) -> str:
    for unit, div in (("B", 1e9), ("M", 1e6), ("K", 1e3)):
        if n >= div:
            return f"{n / div:.2f}{unit}"
    return str(n)


def evaluate(rows: Sequence[dict], corpus: Corpus, model_name: str = "model", split: str = "",
             model: PrefixLM | None = None, timing_examples: int = 0,
             beam: BeamConfig | None = None) -> EvalReport:
    """Score aligned generations; perplexity, counts and timing need the model.

    Wall-clock timing is opt-in (``timing_examples > 0``) so that default
    reports are reproducible byte for byte.
    """
    pairs = align(rows, corpus)
    if not pairs:
        raise EmptyLossError("no turns to evaluate")
    hyps = [r["text"] for r, _ in pairs]
    f1 = float(np.mean([unigram_f1(h, t.response) for h, (_, t) in zip(hyps, pairs)]))
    kf1, n_kf1 = corpus_knowledge_f1(hyps, [t.knowledge for _, t in pairs], [t.knowledge_free for _, t in pairs])
    report = EvalReport(model_name, split, f1, kf1, len(pairs), n_kf1)
    if model is not None:
        report.ppl = perplexity(model, model.examples(corpus))
        counts = model.parameter_counts()
        report.total_params = counts["total"]
        report.trainable_params = stage_trainable_params(model, counts)
        report.deployed_prefix_params = counts["deployed_prefix"]
        if timing_examples > 0:
            inj = model.injections()
            cfg = beam or BeamConfig()
            sample = model.examples(corpus)[:timing_examples]
            report.wall_ms_per_example = timing_probe(lambda e: generate(model, e.context, cfg, inj), sample)
    return report


def stage_trainable_params(model: PrefixLM, counts: dict) -> int:
    """Parameters the model's final stage updated."""
    if model.stage in ("base", "finetune_baseline"):
        return counts["lm"]
    if model.stage == "stage1":
        return counts["knowledge_prefix"]
    return counts["response_prefix"]
