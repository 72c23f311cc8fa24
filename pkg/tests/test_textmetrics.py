import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ego_omni.textmetrics import bleu, rouge_l, text_metrics, tokenize

# (candidate, reference, BLEU@1, BLEU@4, ROUGE-L) worked out by hand from n-gram tables
FIXED_PAIRS = [
    # c=3, r=4: p1 = 3/3, bp = exp(1 - 4/3); no 4-grams; LCS 3 -> P 1, R 3/4
    ("the person walks", "the person walks forward", 100 * math.exp(1 - 4 / 3), 0.0, 100 * 6 / 7),
    # no shared token
    ("jump", "a person walks", 0.0, 0.0, 0.0),
    # clipped unigram 1/4, c > r so bp = 1; LCS 1 -> P 1/4, R 1/2
    ("the the the the", "the cat", 25.0, 0.0, 100 / 3),
    # same bag, reversed order: p1 = 1, LCS 1 -> F 1/3
    ("walks person the", "the person walks", 100.0, 0.0, 100 / 3),
    # c=6, r=5: p = 5/6, 4/5, 3/4, 2/3, product 1/3; LCS 5 -> P 5/6, R 1
    ("a person walks in place slowly", "a person walks in place", 100 * 5 / 6, 100 * (1 / 3) ** 0.25,
     100 * 10 / 11),
]


@pytest.mark.parametrize("cand,ref,b1,b4,rl", FIXED_PAIRS)
def test_hand_computed_pairs(cand, ref, b1, b4, rl):
    got = text_metrics(cand, [ref])
    for g, want in zip(got, (b1, b4, rl)):
        assert math.isclose(g, want, rel_tol=1e-12, abs_tol=1e-12)


def test_identical_and_empty():
    s = "a person waves the left hand"
    assert text_metrics(s, [s]) == (100.0, 100.0, 100.0)
    assert text_metrics("", [s]) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        text_metrics(s, [])


def test_multi_reference_takes_best():
    assert rouge_l("the person walks", ["a cat sleeps", "the person walks"]) == 100.0
    # closest reference length decides the brevity penalty
    assert bleu("the person walks", ["the person walks forward", "the person walks"], 1) == 100.0


def test_tokenize():
    assert tokenize("The person, walks!") == ["the", "person", "walks"]


words = st.lists(st.sampled_from(["the", "person", "walks", "left", "hand", "waves", "a"]), min_size=1, max_size=8)


@given(words, words)
def test_bounded(c, r):
    for v in text_metrics(" ".join(c), [" ".join(r)]):
        assert 0.0 <= v <= 100.0 + 1e-9
