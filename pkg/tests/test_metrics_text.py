import itertools
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcasft.metrics.text import (
    corpus_bleu,
    count_chunks,
    embedding_f1,
    lcs_length,
    meteor,
    meteor_alignment,
    normalize_text,
    rouge_l,
    rouge_n,
    tokenize,
)

from conftest import fixture_gateway

ALPHABET = "abc"


def _is_subsequence(sub, seq):
    it = iter(seq)
    return all(x in it for x in sub)


def _brute_lcs(a, b):
    """Longest subsequence of the shorter side that is also a subsequence of the longer side."""
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    for k in range(len(short), 0, -1):
        for idx in itertools.combinations(range(len(short)), k):
            if _is_subsequence([short[i] for i in idx], long_):
                return k
    return 0


def _oracle_rouge_l(a, b):
    k = _brute_lcs(a, b)
    if k == 0:
        return 0.0
    p, r = k / len(a), k / len(b)
    return 2 * p * r / (p + r)


def _all_sequences(max_len):
    for n in range(max_len + 1):
        yield from (tuple(s) for s in itertools.product(ALPHABET, repeat=n))


def test_rouge_l_exhaustive_small_pairs():
    """Every pair over {a,b,c} whose combined length is at most 8."""
    by_len = {n: [tuple(s) for s in itertools.product(ALPHABET, repeat=n)] for n in range(9)}
    checked = 0
    for la in range(9):
        for lb in range(9 - la):
            for a in by_len[la]:
                for b in by_len[lb]:
                    assert lcs_length(a, b) == _brute_lcs(a, b), (a, b)
                    assert rouge_l(a, b) == pytest.approx(_oracle_rouge_l(a, b), abs=1e-12)
                    checked += 1
    assert checked == sum((s + 1) * 3**s for s in range(9))


def test_rouge_l_every_sequence_up_to_8_against_references():
    """Each of the 9841 sequences up to length 8 against fixed length-8 references."""
    refs = [tuple("abcabcab"), tuple("aaaabbbb"), tuple("cbacbacb"), tuple("ccccccca")]
    for seq in _all_sequences(8):
        for ref in refs:
            assert lcs_length(seq, ref) == _brute_lcs(seq, ref)


@settings(max_examples=300)
@given(st.lists(st.sampled_from(ALPHABET), max_size=8), st.lists(st.sampled_from(ALPHABET), max_size=8))
def test_rouge_l_symmetric_and_bounded(a, b):
    assert rouge_l(a, b) == pytest.approx(rouge_l(b, a), abs=1e-12)
    assert 0.0 <= rouge_l(a, b) <= 1.0
    if a:
        assert rouge_l(a, a) == 1.0


# -- hand-computed cases -----------------------------------------------------


def test_rouge_1_hand_case():
    p, r, f = rouge_n(tokenize("the cat sat"), tokenize("the cat lay"), 1)
    assert p == pytest.approx(2 / 3, abs=1e-9)
    assert r == pytest.approx(2 / 3, abs=1e-9)
    assert f == pytest.approx(2 / 3, abs=1e-9)


def test_rouge_2_hand_case():
    # bigrams: (the cat) shared, (cat sat) vs (cat lay) not
    p, r, f = rouge_n(tokenize("the cat sat"), tokenize("the cat lay"), 2)
    assert (p, r, f) == pytest.approx((0.5, 0.5, 0.5), abs=1e-9)


def test_rouge_n_clips_repeats():
    p, r, _ = rouge_n(["the", "the", "the"], ["the", "cat"], 1)
    assert p == pytest.approx(1 / 3) and r == pytest.approx(1 / 2)


def test_rouge_n_rejects_other_orders():
    with pytest.raises(ValueError):
        rouge_n(["a"], ["a"], 3)


def test_rouge_l_hand_case():
    score = rouge_l(tokenize("the cat sat on the mat"), tokenize("the cat lay on the mat"))
    assert score == pytest.approx(5 / 6, abs=1e-9)
    assert abs(score - 0.8333) < 1e-4


def test_meteor_identical():
    toks = tokenize("the cat sat on the mat")
    m = len(toks)
    assert count_chunks(meteor_alignment(toks, toks)) == 1
    assert meteor(toks, toks) == pytest.approx(1 - 0.5 / m**3, abs=1e-9)


def test_meteor_single_shared_token():
    assert meteor(["x", "cat"], ["cat", "y"]) == pytest.approx(0.25, abs=1e-9)


def test_meteor_no_overlap():
    assert meteor(["a"], ["b"]) == 0.0


def test_meteor_stem_matches_english_only():
    assert meteor_alignment(["running"], ["runs"], "en") == [(0, 0)]
    assert meteor_alignment(["running"], ["runs"], "hi") == []


def test_meteor_fragmented_alignment():
    # two matches in swapped order form two chunks
    pred, truth = ["b", "a"], ["a", "b"]
    pairs = meteor_alignment(pred, truth)
    assert count_chunks(pairs) == 2
    assert meteor(pred, truth) == pytest.approx(1 - 0.5 * (2 / 2) ** 3, abs=1e-9)


def test_bleu_hand_case():
    pred, truth = "a b c d e".split(), "a b c d f".split()
    expected = (4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25
    assert corpus_bleu([(pred, truth)]) == pytest.approx(expected, abs=1e-9)


def test_bleu_brevity_penalty():
    pred, truth = "a b c d".split(), "a b c d e f".split()
    assert corpus_bleu([(pred, truth)]) == pytest.approx(math.exp(1 - 6 / 4), abs=1e-9)


def test_bleu_no_four_gram_is_zero():
    assert corpus_bleu([("a b c".split(), "a b c".split())]) == 0.0
    assert corpus_bleu([("a b c d".split(), "a b c d".split())]) == pytest.approx(1.0)


# -- tokenization ------------------------------------------------------------


def test_tokenize_english_and_decimals():
    assert tokenize("V = 2.5 V, I = 1,000 A.") == ["v", "=", "2.5", "v", "i", "=", "1,000", "a"]


def test_tokenize_devanagari_keeps_vowel_signs():
    assert tokenize("ऊर्जा, संरक्षण।") == ["ऊर्जा", "संरक्षण"]


def test_normalize_applies_nfc():
    assert normalize_text("क़") == normalize_text("क़")


# -- embedding F1 ------------------------------------------------------------


def test_embedding_f1_identical_and_disjoint():
    gw = fixture_gateway(embeddings={"x": [1, 0], "y": [0, 1]})
    assert embedding_f1(["x"], ["x"], gw) == pytest.approx(1.0)
    assert embedding_f1(["x"], ["y"], gw) == 0.0
    assert embedding_f1([], ["y"], gw) == 0.0


def test_embedding_f1_ignores_negative_similarity():
    gw = fixture_gateway(embeddings={"x": [1, 0], "y": [-1, 0]})
    assert embedding_f1(["x"], ["y"], gw) == 0.0
