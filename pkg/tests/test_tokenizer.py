import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langlift import tokenizer as tok


def test_learn_vocab_abab_merges():
    v = tok.learn_vocab(["abab"], target_size=4)
    assert v.merges[:2] == [("a", "b"), ("ab", "ab")]
    assert "abab" in v.token_to_id


def test_learn_vocab_zero_budget():
    v = tok.learn_vocab(["abc abc"], target_size=4)  # alphabet is {a,b,c,space}
    assert v.merges == []
    assert len(v) == 4


def test_learn_vocab_deterministic():
    corpus = ["the cat sat", "the dog sat", "cat and dog"]
    v1 = tok.learn_vocab(corpus, target_size=30)
    v2 = tok.learn_vocab(corpus, target_size=30)
    assert v1.id_to_token == v2.id_to_token
    assert v1.merges == v2.merges


def test_learn_vocab_empty_corpus():
    with pytest.raises(tok.TokenizerError):
        tok.learn_vocab([], target_size=10)


def test_learn_vocab_budget_below_alphabet():
    with pytest.raises(tok.TokenizerError):
        tok.learn_vocab(["abcdef"], target_size=3)


def test_merge_vocab_self_merge_adds_only_specials():
    v = tok.learn_vocab(["abab"], target_size=4)
    merged = tok.merge_vocab(v, v, [tok.EOS, tok.PAD, tok.RESPONSE])
    assert len(merged) == len(v) + 3
    for t, i in v.token_to_id.items():
        assert merged.token_to_id[t] == i


def test_merge_vocab_set_union():
    original = tok.Vocabulary(["a", "b"], [])
    learned = tok.Vocabulary(["b", "c"], [])
    merged = tok.merge_vocab(original, learned, [tok.lang_token("X")])
    assert len(merged) == 4
    assert merged.token_to_id["a"] == 0
    assert merged.token_to_id["b"] == 1
    assert merged.token_to_id["c"] == 2
    assert merged.special_id("⟨X⟩") == 3


def test_merge_vocab_special_collision():
    original = tok.Vocabulary(["a", "⟨EOS⟩"], [])
    with pytest.raises(tok.SpecialTokenConflict):
        tok.merge_vocab(original, tok.Vocabulary(["a"], []), [tok.EOS])


def test_merge_vocab_keeps_existing_special_ids():
    base = tok.merge_vocab(tok.Vocabulary(["a", "b"], []), tok.Vocabulary(["a"], []), [tok.EOS])
    eos_id = base.special_id(tok.EOS)
    bigger = tok.merge_vocab(base, tok.Vocabulary(["c"], []), [tok.EOS, tok.PAD])
    assert bigger.special_id(tok.EOS) == eos_id
    assert bigger.special_id(tok.PAD) == len(bigger) - 1


def test_encode_empty():
    v = tok.learn_vocab(["ab"], target_size=3)
    assert v.encode("") == []


def test_encode_applies_merges():
    v = tok.learn_vocab(["abab"], target_size=4)
    ids = v.encode("abab")
    assert ids == [v.token_to_id["abab"]]


def test_encode_rejects_special_literal():
    v = tok.merge_vocab(tok.learn_vocab(["ab"], target_size=3), tok.Vocabulary(["a"], []), [tok.EOS])
    with pytest.raises(tok.EncodingError):
        v.encode("a⟨EOS⟩b")


def test_encode_unknown_symbol():
    v = tok.learn_vocab(["ab"], target_size=3)
    with pytest.raises(tok.EncodingError):
        v.encode("abz")


def test_decode_special_renders_canonically():
    v = tok.merge_vocab(tok.learn_vocab(["ab"], target_size=3), tok.Vocabulary(["a"], []), [tok.EOS])
    assert v.decode([v.eos_id]) == "⟨EOS⟩"
    assert v.decode([]) == ""


def test_decode_out_of_range():
    v = tok.learn_vocab(["ab"], target_size=3)
    with pytest.raises(tok.DecodingError):
        v.decode([99])


def test_round_trip_corpus_lines():
    rng = np.random.default_rng(5)
    words = ["tomo", "keri", "suna", "va", "blen", "ora"]
    corpus = [" ".join(rng.choice(words, size=rng.integers(1, 7))) for _ in range(100)]
    v = tok.learn_vocab(corpus, target_size=80)
    for line in corpus:
        assert v.decode(v.encode(line)) == line


@settings(max_examples=80, deadline=None)
@given(st.text(alphabet="abcd ", max_size=40))
def test_round_trip_property(text):
    v = tok.learn_vocab(["abcd dcba abab c d"], target_size=12)
    assert v.decode(v.encode(text)) == text


def test_no_regular_text_encodes_to_special():
    v = tok.merge_vocab(
        tok.learn_vocab(["abab baba"], target_size=10),
        tok.Vocabulary(["a"], []),
        [tok.EOS, tok.PAD],
    )
    special_ids = set(v.specials.values())
    rng = np.random.default_rng(0)
    for _ in range(50):
        text = "".join(rng.choice(list("ab "), size=rng.integers(0, 20)))
        assert not set(v.encode(text)) & special_ids


def test_vocab_file_round_trip(tmp_path):
    v = tok.merge_vocab(
        tok.learn_vocab(["ab ba abab"], target_size=9),
        tok.Vocabulary(["q"], []),
        [tok.EOS, tok.PAD, tok.RESPONSE],
    )
    path = tmp_path / "vocab.txt"
    v.save(path)
    loaded = tok.Vocabulary.load(path)
    assert loaded.id_to_token == v.id_to_token
    assert loaded.merges == v.merges
    assert loaded.specials == v.specials
    assert tok.vocab_hash(loaded) == tok.vocab_hash(v)


def test_id_stability_under_merge():
    corpus = ["melo pira melo", "pira gusa"]
    original = tok.merge_vocab(tok.learn_vocab(corpus, target_size=25), tok.Vocabulary(["m"], []), [tok.EOS])
    learned = tok.learn_vocab(["zuko muno zuko"], target_size=20)
    merged = tok.merge_vocab(original, learned, [tok.lang_token("X")])
    for t, i in original.token_to_id.items():
        assert merged.token_to_id[t] == i
    # old text still encodes to the same ids
    assert merged.encode("melo pira") == original.encode("melo pira")
