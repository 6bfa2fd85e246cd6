"""Greedy and beam search against brute force; cascade/tight two-pass decoding."""

import numpy as np
import pytest

from oracles import BOS, EOS, ToyStep, brute_force_sequence
from tightcascade.bridge import BridgeConfig
from tightcascade.decoding import (
    Hypothesis,
    asr_posteriors,
    beam_search,
    decode_asr,
    decode_cascade,
    decode_mt,
    decode_tight,
    greedy_decode,
)
from tightcascade.models import FreezeMask, apply_freeze, build_tight

class TestGreedy:
    def test_always_eos(self):
        def step(state, prev):
            lp = np.full((len(prev), 4), -50.0)
            lp[:, EOS] = 0.0
            return lp, state

        hyp = greedy_decode(step, (np.zeros((1, 1)),), max_len=10)
        assert hyp.tokens == (EOS,)
        assert hyp.content() == []

    def test_chain(self):
        nxt = {BOS: 5, 5: 6, 6: EOS}

        def step(state, prev):
            lp = np.full((len(prev), 8), -20.0)
            lp[np.arange(len(prev)), [nxt[int(p)] for p in prev]] = -0.01
            return lp, state

        assert greedy_decode(step, (np.zeros((1, 1)),)).content() == [5, 6]

    def test_max_len_forces_finish(self):
        def step(state, prev):
            lp = np.full((len(prev), 4), -5.0)
            lp[:, 3] = -0.01
            return lp, state

        hyp = greedy_decode(step, (np.zeros((1, 1)),), max_len=4)
        assert hyp.tokens == (3, 3, 3, 3) and hyp.finished
        out = beam_search(step, (np.zeros((1, 1)),), beam_size=3, max_len=4)
        assert all(len(h.tokens) <= 4 for h in out)
        assert out[0].tokens == (3, 3, 3, 3)


class TestBeamSearch:
    @pytest.mark.parametrize("seed", range(50))
    def test_beam_one_is_greedy(self, seed):
        step = ToyStep(vocab=6, seed=seed)
        g = greedy_decode(step, step.init, max_len=8)
        b = beam_search(step, step.init, beam_size=1, max_len=8)[0]
        assert g.tokens == b.tokens
        assert g.log_prob == b.log_prob

    @pytest.mark.parametrize("seed", range(20))
    def test_exhaustive_beam_matches_brute_force(self, seed):
        vocab, max_len = (3, 4) if seed % 2 else (4, 3)
        step = ToyStep(vocab=vocab, seed=100 + seed, scale=1.0)
        score, tokens = brute_force_sequence(step, vocab, max_len)
        best = beam_search(step, step.init, beam_size=vocab**max_len, max_len=max_len)[0]
        assert best.tokens == tokens
        assert best.log_prob == pytest.approx(score, abs=1e-12)

    def test_hand_set_distributions(self):
        # |V| = 3, max_len = 3, step distribution depends only on the position
        table = np.log(np.array([[0.5, 0.2, 0.3], [0.1, 0.6, 0.3], [0.45, 0.1, 0.45]]))

        class Positional:
            init = (np.zeros((1, 1)),)

            def __call__(self, state, prev):
                pos = int(state[0][0, 0])
                return np.repeat(table[pos][None], len(prev), axis=0), (state[0] + 1,)

        step = Positional()
        assert beam_search(step, step.init, beam_size=27, max_len=3)[0].tokens == brute_force_sequence(step, 3, 3)[1]

    def test_log_prob_is_sum_of_steps(self):
        step = ToyStep(vocab=5, seed=3)
        for hyp in beam_search(step, step.init, beam_size=4, max_len=6):
            state, prev, total = step.init, BOS, 0.0
            for tok in hyp.tokens:
                lp, state = step(state, np.array([prev]))
                total += lp[0, tok]
                prev = tok
            assert hyp.log_prob == pytest.approx(total, abs=1e-12)
            assert hyp.finished and (hyp.tokens[-1] == EOS or len(hyp.tokens) == 6)

    def test_ranked_best_first(self):
        step = ToyStep(vocab=5, seed=4)
        out = beam_search(step, step.init, beam_size=5, max_len=6)
        keys = [(-h.log_prob, h.tokens) for h in out]
        assert keys == sorted(keys)

    def test_tie_break_lexicographic(self):
        def step(state, prev):
            return np.log(np.full((len(prev), 4), 0.25)), state

        out = beam_search(step, (np.zeros((1, 1)),), beam_size=4, max_len=1)
        assert [h.tokens for h in out] == [(0,), (1,), (2,), (3,)]

    def test_bad_arguments(self):
        step = ToyStep(vocab=3)
        with pytest.raises(ValueError):
            beam_search(step, step.init, beam_size=0)
        with pytest.raises(ValueError):
            greedy_decode(step, step.init, max_len=0)

    def test_hypothesis_content(self):
        assert Hypothesis((4, 5, EOS), -1.0).content() == [4, 5]
        assert Hypothesis((4, 5), -1.0).content() == [4, 5]


class TestModelDecoding:
    def test_one_hot_tight_equals_two_pass_cascade(self, cascade, corpus):
        tight = build_tight(cascade, BridgeConfig(mode="one_hot"))
        for ex in corpus:
            ref_tr, ref_tl = decode_cascade(cascade, cascade, ex.features, beam_size=3, max_len=8)
            tr, tl = decode_tight(tight, ex.features, beam_size=3, max_len=8)
            assert (tr, tl) == (ref_tr, ref_tl)

    def test_tight_transcript_equals_standalone_asr(self, models, cascade, corpus):
        asr, _ = models
        tight = apply_freeze(build_tight(cascade), FreezeMask(["asr"]))
        for ex in corpus[:5]:
            tr, _ = decode_tight(tight, ex.features, beam_size=3, max_len=8)
            assert tr == decode_asr(asr, ex.features, beam_size=3, max_len=8)

    def test_posteriors_are_prefix_conditioned(self, cascade, corpus):
        ex = corpus[0]
        post = asr_posteriors(cascade, ex.features, ex.transcript)
        assert post.probs.shape == (1, len(ex.transcript), len(cascade.source_vocab))
        post.validate()
        # row j only depends on the first j tokens
        other = list(ex.transcript)
        other[-1] = 4 if other[-1] != 4 else 5
        alt = asr_posteriors(cascade, ex.features, other)
        np.testing.assert_array_equal(alt.probs.data, post.probs.data)

    def test_soft_decode_default_gamma_two(self, cascade, corpus):
        tight = build_tight(cascade)
        ex = corpus[1]
        a = decode_tight(tight, ex.features, beam_size=2, max_len=8)
        b = decode_tight(tight, ex.features, BridgeConfig(gamma=7.0, decode_gamma=2.0), beam_size=2, max_len=8)
        assert a == b

    def test_empty_source(self, models):
        _, mt = models
        assert decode_mt(mt, []) == []
