import pytest
from hypothesis import given, strategies as st

from hcot.vocab import COT, DIGITS, EOS, PUNCT, SPECIAL_TOKENS, WORDS, UnknownTokenError, Vocab

V = Vocab()

piece = st.sampled_from(WORDS + DIGITS + PUNCT)


def test_size_is_specials_plus_two_variants_per_piece():
    assert len(V) == len(SPECIAL_TOKENS) + 2 * len(WORDS + DIGITS + PUNCT)


@given(st.lists(st.tuples(piece, st.booleans()), min_size=1, max_size=30))
def test_encode_decode_round_trip(parts):
    text = parts[0][0] + "".join((" " if spaced else "") + p for p, spaced in parts[1:])
    # adjacent words without a space would merge into one unknown word
    pieces = [p for p, _ in parts]
    for (a, _), (b, spaced) in zip(parts, parts[1:]):
        if not spaced and a.isalpha() and b.isalpha():
            return
    assert V.decode(V.encode(text)) == text
    assert len(V.encode(text)) == len(pieces)


def test_unknown_word_rejected():
    with pytest.raises(UnknownTokenError, match="banana"):
        V.encode("Add banana.")


def test_double_space_rejected():
    with pytest.raises(UnknownTokenError):
        V.encode("Add  3.")


def test_cot_renders_as_marker_and_other_specials_vanish():
    ids = V.encode("Add 3.") + [COT] + V.encode("5") + [EOS]
    assert V.decode(ids) == "Add 3. [CoT] 5"


def test_split_on_cot():
    ids = V.encode("1 + 2 = 3.") + [COT] + V.encode("Answer: 3")
    assert V.split_on_cot(ids) == ["1 + 2 = 3.", "Answer: 3"]


def test_fingerprint_is_stable_and_sensitive():
    assert Vocab().fingerprint == V.fingerprint
    assert Vocab(WORDS[:-1] + DIGITS + PUNCT).fingerprint != V.fingerprint
