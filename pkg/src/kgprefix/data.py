"""Dialogue corpus model, tokenizer and a deterministic synthetic world.

A corpus is a list of conversations; each turn is a (query, knowledge,
response) triplet. Files are line-delimited JSON behind a version header::

    {"format": "kgd-corpus", "version": 1}
    {"id": "c0000", "split": "train", "topic": "lake", "turns": [{"query": ..., "knowledge": ..., "response": ...}]}
"""
from __future__ import annotations

import json
import math
import re
import string
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import CapacityError, CorpusFormatError

PAD, BOS, EOS, SEP, UNK = "<pad>", "<s>", "</s>", "<sep>", "<unk>"
SPECIALS = (PAD, BOS, EOS, SEP, UNK)
SPLITS = ("train", "valid", "test_seen", "test_unseen")
FORMAT_HEADER = {"format": "kgd-corpus", "version": 1}

_TOKEN_RE = re.compile(r"[^\W_]+|[^\w\s]|_", re.UNICODE)


@dataclass(frozen=True)
class DialogueTurn:
    query: str
    knowledge: str
    response: str
    knowledge_free: bool = False

    def __post_init__(self):
        if not self.query.strip() or not self.response.strip():
            raise ValueError("query and response must be non-empty")
        if not self.knowledge.strip() and not self.knowledge_free:
            raise ValueError("empty knowledge is only allowed on knowledge-free turns")


@dataclass(frozen=True)
class Conversation:
    id: str
    split: str
    topic: str
    turns: tuple[DialogueTurn, ...]

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


@dataclass
class Corpus:
    conversations: list[Conversation] = field(default_factory=list)

    def __len__(self):
        return len(self.conversations)

    def __iter__(self):
        return iter(self.conversations)

    def split(self, name: str) -> "Corpus":
        return Corpus([c for c in self.conversations if c.split == name])

    def topics(self, split: str | None = None) -> set[str]:
        return {c.topic for c in self.conversations if split is None or c.split == split}

    def texts(self) -> Iterable[str]:
        for c in self.conversations:
            for t in c.turns:
                yield t.query
                yield t.knowledge
                yield t.response

    def n_turns(self) -> int:
        return sum(len(c.turns) for c in self.conversations)


# --- tokenizer --------------------------------------------------------------

def split_words(text: str) -> list[str]:
    """Whitespace split with punctuation marks as separate tokens."""
    return _TOKEN_RE.findall(text)


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


class Tokenizer:
    """Word-level vocabulary with PAD/BOS/EOS/SEP/UNK specials (ids 0-4)."""

    def __init__(self, words: Sequence[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            if w not in self.stoi:
                self.stoi[w] = len(self.itos)
                self.itos.append(w)

    @classmethod
    def fit(cls, texts: Iterable[str]) -> "Tokenizer":
        words = sorted({w for t in texts for w in split_words(t)})
        return cls(words)

    @property
    def pad_id(self):
        return 0

    @property
    def bos_id(self):
        return 1

    @property
    def eos_id(self):
        return 2

    @property
    def sep_id(self):
        return 3

    @property
    def unk_id(self):
        return 4

    def __len__(self):
        return len(self.itos)

    def tokenize(self, text: str) -> list[int]:
        return [self.stoi.get(w, self.unk_id) for w in split_words(text)]

    def detokenize(self, ids: Iterable[int], skip_specials: bool = True) -> str:
        words = []
        for i in ids:
            i = int(i)
            if skip_specials and i < len(SPECIALS):
                continue
            words.append(self.itos[i])
        return " ".join(words)

    def vocab(self) -> list[str]:
        return list(self.itos[len(SPECIALS):])


# --- contexts and bags of words ---------------------------------------------

@dataclass(frozen=True)
class ContextWindow:
    tokens: tuple[int, ...]
    has_previous: bool
    truncated: bool


def build_context(conversation: Conversation, i: int, tokenizer: Tokenizer, max_len: int) -> ContextWindow:
    """Context for turn ``i`` (1-based): ``BOS Y_{i-1} SEP U_i EOS``.

    Turn 1 carries only ``BOS U_1 EOS``. Overlong contexts drop the oldest
    tokens after BOS.
    """
    if not 1 <= i <= len(conversation.turns):
        raise IndexError(f"turn {i} outside 1..{len(conversation.turns)}")
    if max_len < 3:
        raise ValueError("max_len must leave room for BOS, one token and EOS")
    query = tokenizer.tokenize(conversation.turns[i - 1].query)
    if i == 1:
        body = query
    else:
        body = tokenizer.tokenize(conversation.turns[i - 2].response) + [tokenizer.sep_id] + query
    room = max_len - 2
    truncated = len(body) > room
    body = body[-room:] if truncated else body
    return ContextWindow(tuple([tokenizer.bos_id, *body, tokenizer.eos_id]), i > 1, truncated)


@lru_cache(maxsize=1)
def load_stopwords() -> frozenset[str]:
    text = resources.files("kgprefix").joinpath("data/stopwords.txt").read_text(encoding="utf-8")
    return frozenset(w for line in text.splitlines() if not line.startswith("#") for w in line.split())


_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def extract_bow(response: str, stopwords: Iterable[str] | None, tokenizer: Tokenizer) -> frozenset[int]:
    """Content-word ids of a response: lowercased, no punctuation, stopwords or UNK."""
    stop = load_stopwords() if stopwords is None else frozenset(stopwords)
    words = response.lower().translate(_PUNCT_TABLE).split()
    ids = {tokenizer.stoi.get(w, tokenizer.unk_id) for w in words if w not in stop}
    ids.discard(tokenizer.unk_id)
    return frozenset(ids)


@dataclass(frozen=True)
class Example:
    """One tokenized turn ready for training or evaluation."""

    conv_id: str
    turn: int
    context: tuple[int, ...]
    knowledge: tuple[int, ...]
    response: tuple[int, ...]
    bow: frozenset[int]
    knowledge_text: str
    response_text: str
    knowledge_free: bool = False


def make_examples(corpus: Corpus, tokenizer: Tokenizer, max_context_len: int,
                  max_target_len: int | None = None) -> list[Example]:
    """Tokenize every turn; targets end with EOS and are right-truncated."""
    stop = load_stopwords()
    out = []
    for conv in corpus:
        for i, turn in enumerate(conv.turns, start=1):
            ctx = build_context(conv, i, tokenizer, max_context_len)
            k = tokenizer.tokenize(turn.knowledge)
            y = tokenizer.tokenize(turn.response)
            if max_target_len is not None:
                k, y = k[: max_target_len - 1], y[: max_target_len - 1]
            out.append(Example(
                conv_id=conv.id, turn=i, context=ctx.tokens,
                knowledge=tuple(k) + ((tokenizer.eos_id,) if k else ()),
                response=tuple(y) + (tokenizer.eos_id,),
                bow=extract_bow(turn.response, stop, tokenizer),
                knowledge_text=turn.knowledge, response_text=turn.response,
                knowledge_free=turn.knowledge_free,
            ))
    return out


# --- persistence ------------------------------------------------------------

def _conv_to_record(c: Conversation) -> dict:
    turns = []
    for t in c.turns:
        rec = {"query": t.query, "knowledge": t.knowledge, "response": t.response}
        if t.knowledge_free:
            rec["knowledge_free"] = True
        turns.append(rec)
    return {"id": c.id, "split": c.split, "topic": c.topic, "turns": turns}


def dumps_corpus(corpus: Corpus) -> str:
    lines = [json.dumps(FORMAT_HEADER)]
    lines += [json.dumps(_conv_to_record(c), ensure_ascii=False) for c in corpus]
    return "\n".join(lines) + "\n"


def save_corpus(corpus: Corpus, path) -> None:
    Path(path).write_text(dumps_corpus(corpus), encoding="utf-8")


def _require(rec: dict, key: str, kind, line: int):
    if key not in rec:
        raise CorpusFormatError(f"missing field {key!r}", line)
    if not isinstance(rec[key], kind):
        raise CorpusFormatError(f"field {key!r} has the wrong type", line)
    return rec[key]


def loads_corpus(text: str) -> Corpus:
    lines = text.splitlines()
    if not lines:
        raise CorpusFormatError("empty corpus file: missing header", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise CorpusFormatError(f"invalid header: {err.msg}", 1) from None
    if header != FORMAT_HEADER:
        raise CorpusFormatError(f"unsupported header {header!r}", 1)
    convs = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as err:
            raise CorpusFormatError(f"invalid JSON: {err.msg}", n) from None
        if not isinstance(rec, dict):
            raise CorpusFormatError("record is not an object", n)
        turns = []
        for t in _require(rec, "turns", list, n):
            if not isinstance(t, dict):
                raise CorpusFormatError("turn is not an object", n)
            try:
                turns.append(DialogueTurn(
                    _require(t, "query", str, n), _require(t, "knowledge", str, n),
                    _require(t, "response", str, n), bool(t.get("knowledge_free", False)),
                ))
            except ValueError as err:
                if isinstance(err, CorpusFormatError):
                    raise
                raise CorpusFormatError(str(err), n) from None
        try:
            convs.append(Conversation(_require(rec, "id", str, n), _require(rec, "split", str, n),
                                      _require(rec, "topic", str, n), tuple(turns)))
        except ValueError as err:
            if isinstance(err, CorpusFormatError):
                raise
            raise CorpusFormatError(str(err), n) from None
    return Corpus(convs)


def load_corpus(path) -> Corpus:
    return loads_corpus(Path(path).read_text(encoding="utf-8"))


# --- synthetic world --------------------------------------------------------

_TOPICS = {
    "lake": "i would love to swim there on a warm summer day .",
    "tower": "climbing the stairs to the top takes almost an hour .",
    "river": "people often go fishing and rowing along its quiet banks .",
    "castle": "the old walls still hide secret tunnels and dark dungeons .",
    "island": "ferries leave the harbor twice a day to reach it .",
    "bridge": "walking across it at sunset is a lovely calm experience .",
    "garden": "the roses and tulips bloom there every single spring season .",
    "museum": "the paintings and sculptures inside are truly amazing to see .",
    "mountain": "hikers camp near the snowy peak during the cold winter .",
    "forest": "tall pine trees cover the rolling hills for many miles .",
    "temple": "monks ring the ancient bronze bells there at every dawn .",
    "market": "vendors sell spices and fresh bread there from early morning .",
    "festival": "crowds dance and sing in the streets until long past midnight .",
    "library": "scholars read rare manuscripts in its silent marble reading halls .",
    "stadium": "fans cheer loudly whenever the local team scores a goal .",
    "canyon": "steep cliffs echo with howling wind through the deep gorges .",
}

_RELATIONS = {
    "located": {
        "fact": "is located in {v}",
        "questions": ["where is the {e} located ?", "do you know where the {e} is located ?"],
        "values": ["paris", "lima", "oslo", "cairo", "tokyo", "delhi", "rome", "quito", "dakar", "hanoi"],
    },
    "built": {
        "fact": "was built in {v}",
        "questions": ["when was the {e} built ?", "do you know when the {e} was built ?"],
        "values": ["1853", "1901", "1922", "1938", "1947", "1953", "1966", "1975", "1988", "1994"],
    },
    "color": {
        "fact": "is painted bright {v}",
        "questions": ["what color is the {e} painted ?", "which color was the {e} painted ?"],
        "values": ["red", "blue", "green", "yellow", "purple", "orange", "white", "black", "silver", "golden"],
    },
    "famous": {
        "fact": "is famous for its {v}",
        "questions": ["what is the {e} famous for ?", "why is the {e} so famous ?"],
        "values": ["music", "fountains", "history", "food", "views", "statues", "lights", "birds", "boats", "murals"],
    },
    "designed": {
        "fact": "was designed by {v}",
        "questions": ["who designed the {e} ?", "do you know who designed the {e} ?"],
        "values": ["hansen", "okafor", "tanaka", "moreau", "silva", "kowalski", "novak", "haddad", "larsen", "ibrahim"],
    },
    "length": {
        "fact": "is about {v} meters long",
        "questions": ["how long is the {e} ?", "do you know how long the {e} is ?"],
        "values": ["40", "75", "120", "300", "450", "800", "1200", "2500", "5000", "9000"],
    },
    "animals": {
        "fact": "is home to many {v}",
        "questions": ["which animals live near the {e} ?", "are there animals at the {e} ?"],
        "values": ["owls", "foxes", "deer", "swans", "frogs", "bats", "eagles", "otters", "bees", "wolves"],
    },
}

_NAMES = (
    "alvor brenna caldy dorin elmsa farro gelda hoven ilsa jorvik kaldo lunet moren nadar orrin "
    "pelli quenda rasku selvo tamir ulden varna wendo xaro yselt zandor abrel bosk cirra dunmor "
    "evra fennic galt harro iven jessa korun lyra mavik norra olvin prask quill rhune sabel tovin "
    "umber vesk wylla yorin zeph amsel brakk corla dravo estel fyrn gorran hesk ilvar jarn "
    "kestra lomond merra nysa oskel"
).split()

_OPENERS = ["oh yes ,", "well , actually", "i read that", "as far as i know ,", "fun fact :"]


def _validate_generator_args(n_conversations, topics, turns_per_conv):
    if n_conversations < 1:
        raise CapacityError("empty corpus: n_conversations must be at least 1")
    if not 2 <= topics <= len(_TOPICS):
        raise CapacityError(f"topics must lie in 2..{len(_TOPICS)}")
    if turns_per_conv < 1:
        raise CapacityError("turns_per_conv must be at least 1")


def generate_synthetic_corpus(seed: int = 0, n_conversations: int = 320, topics: int = 16,
                              turns_per_conv: int = 3, entities_per_topic: int = 4,
                              relations_per_topic: int = 3) -> Corpus:
    """Deterministic templated knowledge-grounded dialogues.

    Each topic owns entities with (relation, value) facts. Knowledge is the
    fact sentence, the query asks about it and the response restates it with
    an opener and a topic-specific remark. A quarter of the topics (at least
    one) are held out as ``test_unseen``; the remarks of those topics never
    occur elsewhere. Seen-topic conversations are split 8:1:1 into train,
    valid and test_seen by their per-topic index.
    """
    _validate_generator_args(n_conversations, topics, turns_per_conv)
    if relations_per_topic > len(_RELATIONS):
        raise CapacityError("more relations per topic than templates")
    n_facts = entities_per_topic * relations_per_topic
    if turns_per_conv > n_facts:
        raise CapacityError(f"{turns_per_conv} turns need more than the {n_facts} facts per topic")
    per_topic_capacity = math.perm(n_facts, turns_per_conv)
    if math.ceil(n_conversations / topics) > per_topic_capacity:
        raise CapacityError(f"{n_conversations} conversations exceed the template space "
                            f"({topics} x {per_topic_capacity})")
    if topics * entities_per_topic > len(_NAMES):
        raise CapacityError("not enough entity names")

    rng = np.random.default_rng(seed)
    topic_names = [str(t) for t in rng.permutation(list(_TOPICS))[:topics]]
    n_unseen = max(1, topics // 4)
    unseen = set(topic_names[-n_unseen:])
    names = [str(n) for n in rng.permutation(_NAMES)]
    relation_names = list(_RELATIONS)

    world: dict[str, list[tuple[str, str, str]]] = {}
    for ti, topic in enumerate(topic_names):
        rels = [relation_names[i] for i in rng.choice(len(relation_names), relations_per_topic, replace=False)]
        facts = []
        for ei in range(entities_per_topic):
            entity = f"{names[ti * entities_per_topic + ei]} {topic}"
            for rel in rels:
                values = _RELATIONS[rel]["values"]
                facts.append((entity, rel, values[int(rng.integers(len(values)))]))
        world[topic] = facts

    used: dict[str, set] = {t: set() for t in topic_names}
    counters = {t: 0 for t in topic_names}
    convs = []
    for j in range(n_conversations):
        topic = topic_names[j % topics]
        facts = world[topic]
        while True:
            order = tuple(int(i) for i in rng.choice(len(facts), turns_per_conv, replace=False))
            if order not in used[topic]:
                used[topic].add(order)
                break
        turns = []
        for fi in order:
            entity, rel, value = facts[fi]
            tmpl = _RELATIONS[rel]
            fact = f"the {entity} " + tmpl["fact"].format(v=value)
            question = tmpl["questions"][int(rng.integers(len(tmpl["questions"])))].format(e=entity)
            opener = _OPENERS[int(rng.integers(len(_OPENERS)))]
            turns.append(DialogueTurn(
                query=question,
                knowledge=f"{fact} .",
                response=f"{opener} {fact} . {_TOPICS[topic]}",
            ))
        if topic in unseen:
            split = "test_unseen"
        else:
            r = counters[topic] % 10
            split = "train" if r < 8 else ("valid" if r == 8 else "test_seen")
        counters[topic] += 1
        convs.append(Conversation(f"c{j:05d}", split, topic, tuple(turns)))
    return Corpus(convs)


def world_sentences(corpus: Corpus) -> list[str]:
    """Distinct knowledge sentences across every split, in first-seen order."""
    seen = dict.fromkeys(t.knowledge for c in corpus for t in c.turns if t.knowledge)
    return list(seen)
