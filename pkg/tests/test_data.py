import hashlib
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgprefix.data import (FORMAT_HEADER, Conversation, Corpus, DialogueTurn, Tokenizer, build_context,
                           dumps_corpus, extract_bow, generate_synthetic_corpus, load_corpus, loads_corpus,
                           make_examples, normalize_whitespace, save_corpus, world_sentences)
from kgprefix.decoding import knowledge_f1
from kgprefix.exceptions import CapacityError, CorpusFormatError

# frozen from the reference generator run
DEFAULT_CORPUS_SHA256 = "edd562d225725ebd2dea67a7d6a56a7e781b533735b1ee0ffc2367eaeb695162"


def conv(turns, split="train", cid="c0", topic="t"):
    return Conversation(cid, split, topic, tuple(DialogueTurn(*t) for t in turns))


# --- turns and contexts -----------------------------------------------------

def test_turn_invariants():
    with pytest.raises(ValueError):
        DialogueTurn("", "k", "r")
    with pytest.raises(ValueError):
        DialogueTurn("q", "", "r")
    assert DialogueTurn("q", "", "r", knowledge_free=True).knowledge == ""


def test_context_construction():
    c = conv([("how old is it ?", "k one", "it is old"), ("and where ?", "k two", "over there")])
    tok = Tokenizer.fit(["how old is it ? and where it is old over there"])
    first = build_context(c, 1, tok, 32)
    assert tok.detokenize(first.tokens) == "how old is it ?"
    assert first.tokens[0] == tok.bos_id and first.tokens[-1] == tok.eos_id and not first.has_previous
    second = build_context(c, 2, tok, 32)
    assert list(second.tokens) == [tok.bos_id, *tok.tokenize("it is old"), tok.sep_id,
                                   *tok.tokenize("and where ?"), tok.eos_id]
    with pytest.raises(IndexError):
        build_context(c, 3, tok, 32)
    with pytest.raises(IndexError):
        build_context(c, 0, tok, 32)


def test_overlong_context_keeps_the_most_recent_tokens():
    words = [f"w{i}" for i in range(20)]
    c = conv([("q", "k", " ".join(words)), ("last question", "k", "r")])
    tok = Tokenizer.fit(words + ["last", "question"])
    ctx = build_context(c, 2, tok, 8)
    assert ctx.truncated and len(ctx.tokens) == 8
    assert tok.detokenize(ctx.tokens) == "w17 w18 w19 last question"
    assert ctx.tokens[0] == tok.bos_id


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["a", "b", "c", "?"]), min_size=1, max_size=30),
       st.lists(st.sampled_from(["x", "y"]), min_size=1, max_size=30), st.integers(3, 40))
def test_context_fits_and_ends_with_eos(prev, query, max_len):
    c = conv([("q", "k", " ".join(prev)), (" ".join(query), "k", "r")])
    tok = Tokenizer.fit(["a b c ? x y q r"])
    for i in (1, 2):
        ctx = build_context(c, i, tok, max_len)
        assert len(ctx.tokens) <= max_len and ctx.tokens[-1] == tok.eos_id


# --- tokenizer and bags -----------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["cat", "dog", "sat", ",", ".", "42", "on"]), min_size=0, max_size=20),
       st.lists(st.sampled_from([" ", "  ", "\t", "\n"]), min_size=20, max_size=20))
def test_tokenizer_round_trip(words, gaps):
    text = "".join(w + g for w, g in zip(words, gaps))
    tok = Tokenizer.fit(["cat dog sat , . 42 on"])
    assert tok.detokenize(tok.tokenize(text)) == normalize_whitespace(text)


def test_unknown_words_map_to_unk():
    tok = Tokenizer.fit(["known"])
    assert tok.tokenize("known unknown") == [5, tok.unk_id]
    assert tok.detokenize([tok.bos_id, 5, tok.eos_id]) == "known"
    assert len(tok.detokenize([tok.bos_id, 5], skip_specials=False).split()) == 2


def test_bag_of_words_examples():
    tok = Tokenizer.fit(["mountain dew was created in 1953 the a an"])
    assert extract_bow("The the a an!", None, tok) == frozenset()
    bag = extract_bow("Mountain Dew was created in 1953.", None, tok)
    assert {tok.itos[i] for i in bag} == {"mountain", "dew", "created", "1953"}
    assert extract_bow(tok.detokenize(sorted(bag)), None, tok) == bag
    assert extract_bow("mountain zebra", None, tok) == {tok.stoi["mountain"]}  # UNK dropped


# --- serialization ----------------------------------------------------------

def test_corpus_round_trip(tmp_path, small_corpus):
    path = tmp_path / "c.jsonl"
    save_corpus(small_corpus, path)
    again = load_corpus(path)
    assert again == small_corpus
    assert path.read_bytes() == dumps_corpus(again).encode("utf-8")


def test_knowledge_free_flag_survives_round_trip():
    c = Corpus([conv([("q é", "", "r ü", True)])])
    assert loads_corpus(dumps_corpus(c)) == c


def test_hand_written_two_turn_file(tmp_path):
    rec = {"id": "x1", "split": "train", "topic": "tea",
           "turns": [{"query": "what is it ?", "knowledge": "it is tea .", "response": "tea , i think"},
                     {"query": "hot ?", "knowledge": "tea is hot .", "response": "yes , hot tea"}]}
    path = tmp_path / "f.jsonl"
    path.write_text(json.dumps(FORMAT_HEADER) + "\n" + json.dumps(rec) + "\n", encoding="utf-8")
    corpus = load_corpus(path)
    assert len(corpus) == 1 and corpus.n_turns() == 2


@pytest.mark.parametrize("body, line, needle", [
    ('{"id": "a", "split": "train", "topic": "t", "turns": [{"query": "q", "knowledge": "k"}]}', 2, "response"),
    ('{"id": "a", "split": "train", "topic": "t", "turns": []}\nnot json', 3, "invalid JSON"),
    ('{"id": "a", "split": "nope", "topic": "t", "turns": []}', 2, "split"),
    ('{"id": 3, "split": "train", "topic": "t", "turns": []}', 2, "id"),
])
def test_malformed_lines_report_line_numbers(body, line, needle):
    with pytest.raises(CorpusFormatError) as err:
        loads_corpus(json.dumps(FORMAT_HEADER) + "\n" + body + "\n")
    assert err.value.line == line and needle in str(err.value)


def test_header_is_required():
    with pytest.raises(CorpusFormatError):
        loads_corpus("")
    with pytest.raises(CorpusFormatError):
        loads_corpus('{"format": "other", "version": 1}\n')


# --- generator --------------------------------------------------------------

def test_default_corpus_is_frozen(default_corpus):
    assert hashlib.sha256(dumps_corpus(default_corpus).encode()).hexdigest() == DEFAULT_CORPUS_SHA256
    counts = {s: default_corpus.split(s).n_turns() for s in ("train", "valid", "test_seen", "test_unseen")}
    assert counts == {"train": 576, "valid": 72, "test_seen": 72, "test_unseen": 240}
    assert len(world_sentences(default_corpus)) == 192
    assert len(Tokenizer.fit(default_corpus.texts())) <= 512


def test_generator_is_a_pure_function():
    a = generate_synthetic_corpus(seed=3, n_conversations=20, topics=4)
    b = generate_synthetic_corpus(seed=3, n_conversations=20, topics=4)
    assert dumps_corpus(a) == dumps_corpus(b)
    assert dumps_corpus(a) != dumps_corpus(generate_synthetic_corpus(seed=4, n_conversations=20, topics=4))


def test_unseen_topics_are_disjoint_from_train(default_corpus):
    assert default_corpus.topics("test_unseen")
    assert not default_corpus.topics("test_unseen") & default_corpus.topics("train")
    assert default_corpus.topics("test_seen") <= default_corpus.topics("train")


def test_gold_responses_overlap_their_knowledge(default_corpus):
    turns = [t for c in default_corpus for t in c.turns]
    mean = sum(knowledge_f1(t.response, t.knowledge) for t in turns) / len(turns)
    assert mean >= 0.4


@pytest.mark.parametrize("kw", [dict(n_conversations=0), dict(topics=1), dict(turns_per_conv=0),
                                dict(n_conversations=10**7)])
def test_generator_capacity_errors(kw):
    with pytest.raises(CapacityError):
        generate_synthetic_corpus(**kw)


def test_examples_end_with_eos(small_corpus):
    tok = Tokenizer.fit(small_corpus.texts())
    for e in make_examples(small_corpus, tok, 20, 10):
        assert e.response[-1] == tok.eos_id and len(e.response) <= 10
        assert e.knowledge[-1] == tok.eos_id and len(e.context) <= 20
