import pytest
from hypothesis import given, settings, strategies as st

from cgfuse import tensor_core as tc
from cgfuse.frontend import tokenize
from cgfuse.harness.programs import random_program
from cgfuse.harness.synthetic import generate_synthetic
from cgfuse.tokenizer import (
    FIRST_FREE, RESERVED, UNK, CorpusEmpty, Vocab, decode, decode_bytes, encode, encode_ids, pre_split,
    split_identifier, subtoken_char_spans, train_vocab,
)

SAMPLE_CODE = "int calcTotalSize() {\n    _total = extractList().size();\n    return _total;\n}"


@pytest.fixture(scope="module")
def vocab():
    ex = generate_synthetic(300, seed=0)
    return train_vocab([e.nl for e in ex] + [e.code for e in ex], target_size=600)


def test_split_identifier():
    assert split_identifier("calcTotalSize") == ["calc", "Total", "Size"]
    assert split_identifier("_total") == ["_", "total"]
    assert split_identifier("HTTPServer2") == ["HTTP", "Server", "2"]


def test_pre_split_concatenates_to_text():
    for text in [SAMPLE_CODE, "return the total size .", "a = b # c", ""]:
        assert b"".join(u for u, _ in pre_split(text)) == text.encode()


def test_reserved_ids_and_bijection(vocab):
    assert vocab.tokens[:len(RESERVED)] == [r.encode() for r in RESERVED]
    assert len(set(vocab.tokens)) == vocab.size
    assert all(vocab.index[t] == i for i, t in enumerate(vocab.tokens) if i >= len(RESERVED))
    assert vocab.size <= 600


def test_small_corpus_learns_whole_unit():
    v = train_vocab(["aa aa aa"], target_size=300)
    assert b"aa" in v.index
    assert len(encode("aa", v)) == 1


def test_target_size_and_empty_corpus():
    with pytest.raises(ValueError):
        train_vocab(["x"], target_size=299)
    with pytest.raises(CorpusEmpty):
        train_vocab([], target_size=300)
    assert train_vocab(["abc"], target_size=300).size == FIRST_FREE


def test_empty_string_encodes_to_nothing(vocab):
    assert encode("", vocab) == []


def test_round_trip_on_corpus_lines(vocab):
    ex = generate_synthetic(500, seed=5)
    rng = tc.rng_for(0, "tok-rt")
    lines = [e.code for e in ex] + [e.nl for e in ex]
    lines += [random_program(rng, method=True) for _ in range(100)]
    assert len(lines) >= 1000
    for line in lines:
        ids = encode_ids(line, vocab)
        assert UNK not in ids
        assert decode(ids, vocab) == line


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=40))
def test_round_trip_any_text(vocab, text):
    ids = encode_ids(text, vocab)
    assert UNK not in ids
    assert decode_bytes(ids, vocab) == text.encode("utf-8")


def test_provenance_total_and_contiguous(vocab):
    rng = tc.rng_for(1, "provenance")
    for src in [SAMPLE_CODE] + [random_program(rng, method=True) for _ in range(100)]:
        prov = [t for _, t in encode(src, vocab, with_provenance=True)]
        n = len(tokenize(src))
        seen = [t for t in prov if t is not None]
        assert sorted(set(seen)) == list(range(n))
        for k in range(n):
            pos = [p for p, t in enumerate(prov) if t == k]
            assert pos == list(range(pos[0], pos[-1] + 1))


def test_nl_text_has_no_provenance(vocab):
    assert all(t is None for _, t in encode("returns the total # size", vocab, with_provenance=True))


def test_subtoken_spans_cover_decoded_bytes(vocab):
    ids = encode_ids(SAMPLE_CODE, vocab)
    spans = subtoken_char_spans(ids, vocab)
    data = decode_bytes(ids, vocab)
    assert spans[0][0] == 0 and spans[-1][1] == len(data)
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))


def test_training_is_deterministic():
    corpus = [e.code for e in generate_synthetic(100, seed=2)]
    assert train_vocab(corpus, 400).tokens == train_vocab(list(corpus), 400).tokens


def test_save_load_round_trip(vocab, tmp_path):
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    back = Vocab.load(path)
    assert back.tokens == vocab.tokens
