"""WER, BLEU, simplified TER and perplexity against independent oracles."""

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bleu_formula, brute_force_edits, random_pairs
from tightcascade.metrics import (
    ScoreReport,
    bleu,
    edit_distance,
    perplexity,
    perplexity_from_nll,
    ter_pair,
    ter_simplified,
    wer,
)


class TestWER:
    def test_identical(self):
        assert wer([[1, 2, 3]], [[1, 2, 3]]).value == 0.0

    def test_hand_example(self):
        rep = wer([list("abcd")], [list("axc")])
        assert rep.value == 0.5
        assert rep.counts == {"edits": 2, "ref_len": 4}

    def test_empty_hypothesis(self):
        assert wer([[5, 6, 7]], [[]]).value == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            wer([[1]], [])

    def test_matches_brute_force(self):
        for r, h in random_pairs(500, seed=0):
            assert edit_distance(r, h) == brute_force_edits(r, h), (r, h)

    def test_can_exceed_one(self):
        assert wer([[1]], [[2, 3, 4]]).value == 3.0


class TestBLEU:
    def test_identical_corpus(self):
        refs = [[1, 2, 3, 4, 5], [6, 7, 8, 9]]
        assert bleu(refs, refs).value == 1.0

    def test_three_token_example(self):
        # p1 = p2 = 1 but the 2-token hypothesis has no 3-grams -> 0 under the no-smoothing rule
        rep = bleu([["the", "cat", "sat"]], [["the", "cat"]])
        assert rep.value == 0.0
        assert rep.counts["matches"][:2] == [2, 1]
        assert rep.counts["totals"] == [2, 1, 0, 0]

    def test_hand_worked_value(self):
        # ref a b c d e, hyp a b c d f: p_n = 4/5, 3/4, 2/3, 1/2 and BP = 1
        expected = (4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25
        assert bleu_formula([4, 3, 2, 1], [5, 4, 3, 2], 5, 5) == pytest.approx(expected, abs=1e-15)
        assert abs(bleu([list("abcde")], [list("abcdf")]).value - expected) <= 1e-12

    def test_brevity_penalty(self):
        ref, hyp = list("abcdefgh"), list("abcdef")
        expected = math.exp(1 - 8 / 6)
        assert bleu([ref], [hyp]).value == pytest.approx(expected, abs=1e-12)

    def test_clipping(self):
        rep = bleu([list("aabcd")], [list("aaaaa")])
        assert rep.counts["matches"][0] == 2

    def test_single_token(self):
        assert bleu([["a"]], [["a"]]).value == 0.0

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            bleu([], [])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.lists(st.integers(0, 3), min_size=4, max_size=9), st.lists(st.integers(0, 3), min_size=4, max_size=9)), min_size=1, max_size=6), st.randoms())
    def test_sentence_order_invariant(self, corpus, rnd):
        shuffled = list(corpus)
        rnd.shuffle(shuffled)
        a = bleu([r for r, _ in corpus], [h for _, h in corpus]).value
        b = bleu([r for r, _ in shuffled], [h for _, h in shuffled]).value
        assert a == pytest.approx(b, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=1, max_size=8), st.lists(st.integers(0, 4), max_size=8))
    def test_range(self, r, h):
        assert 0.0 <= bleu([r], [h]).value <= 1.0


class TestTER:
    def test_identical(self):
        assert ter_simplified([[1, 2, 3]], [[1, 2, 3]]).value == 0.0

    def test_pure_transposition(self):
        rep = ter_simplified([list("abcd")], [list("cdab")])
        assert rep.value == 0.25
        assert rep.counts["shifts"] == 1 and rep.counts["edits"] == 0

    def test_bounded_by_wer_pointwise(self):
        for r, h in random_pairs(500, seed=1):
            if not r:
                continue
            shifts, edits = ter_pair(r, h)
            assert shifts + edits <= edit_distance(r, h)

    def test_zero_iff_identical(self):
        for r, h in random_pairs(200, seed=2):
            if r:
                assert (ter_simplified([r], [h]).value == 0) == (r == h)


class _ToyModel:
    """nll(batch) returns fixed per-token probabilities, ignoring the batch."""

    def __init__(self, probs):
        self.probs = probs

    def nll(self, batch):
        return -sum(math.log(p) for p in self.probs), len(self.probs)


class TestPerplexity:
    def test_uniform_predictor(self):
        assert perplexity_from_nll(10 * math.log(7), 10).value == pytest.approx(7.0)

    def test_perfect_predictor(self):
        assert perplexity_from_nll(0.0, 5).value == 1.0

    def test_two_token_oracle(self):
        from tightcascade.models import Example

        corpus = [Example(None, [4], [5])]
        rep = perplexity(_ToyModel([0.5, 0.25]), corpus)
        assert rep.value == pytest.approx(math.exp((math.log(2) + math.log(4)) / 2), abs=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            perplexity_from_nll(0.0, 0)
        with pytest.raises(ValueError):
            perplexity(_ToyModel([0.5]), [])


class TestScoreReport:
    def test_line_roundtrip(self):
        rep = bleu([list("abcde")], [list("abcdf")])
        back = ScoreReport.from_line(rep.to_line())
        assert back.metric == "bleu"
        assert back.value == pytest.approx(rep.value, abs=1e-6)
        assert back.counts["matches"] == [4, 3, 2, 1]
        assert back.counts["bp"] == rep.counts["bp"]
