"""Model construction, forward passes, freezing and checkpoints."""

import math
import struct

import numpy as np
import pytest

from tightcascade import tensor as T
from tightcascade.bridge import BridgeConfig, PosteriorSequence
from tightcascade.checkpoint import FORMAT_VERSION, MAGIC, dumps, load_checkpoint, loads, save_checkpoint
from tightcascade.models import (
    ComponentGraph,
    Example,
    FreezeMask,
    apply_freeze,
    asr_forward,
    build_cascade,
    build_direct,
    build_tight,
    make_batch,
    mt_forward,
    tight_forward,
)
from tightcascade.nn import BOS, EOS, PAD, Vocabulary

from conftest import tiny_models, tiny_task


def per_token(model, batch):
    loss, n = model.nll(batch)
    return loss / n


class TestBatch:
    def test_framing(self):
        b = make_batch([Example(None, [5, 6, 7], [8]), Example(None, [9], [4, 5])])
        np.testing.assert_array_equal(b.src, [[BOS, 5, 6, 7, EOS], [BOS, 9, EOS, PAD, PAD]])
        np.testing.assert_array_equal(b.src_lengths, [5, 3])
        src, lengths = b.src_content
        np.testing.assert_array_equal(src, [[5, 6, 7], [9, EOS, PAD]])
        np.testing.assert_array_equal(lengths, [3, 1])
        assert b.frames is None

    def test_frames_padded(self):
        b = make_batch([Example(np.ones((3, 2)), [5]), Example(np.ones((1, 2)), [5])])
        assert b.frames.shape == (2, 3, 2)
        np.testing.assert_array_equal(b.frames[1, 1:], 0.0)
        np.testing.assert_array_equal(b.frame_lengths, [3, 1])


class TestUntrainedLoss:
    @pytest.mark.parametrize("kind", ["asr", "mt", "tight", "direct"])
    def test_near_log_vocab(self, kind, corpus):
        task = tiny_task()
        asr, mt = tiny_models(task)
        model = {
            "asr": asr,
            "mt": mt,
            "tight": build_tight(build_cascade(asr, mt)),
            "direct": build_direct(asr, mt),
        }[kind]
        value = per_token(model, make_batch(corpus))
        assert value == pytest.approx(math.log(task.vocab_size), rel=0.15)


class TestBridgeEquivalence:
    def test_hard_tokens_equal_one_hot_rows(self, models, corpus):
        _, mt = models
        batch = make_batch(corpus)
        src, lengths = batch.src_content
        hard, n1 = mt_forward(mt, src, lengths, batch.tgt, batch.tgt_lengths)
        probs = np.eye(len(mt.source_vocab))[src]
        post = PosteriorSequence(T.Tensor(probs), mt.source_vocab, lengths)
        soft, n2 = mt_forward(mt, post, lengths, batch.tgt, batch.tgt_lengths, bridge=BridgeConfig(gamma=1.0))
        assert n1 == n2
        assert hard.item() == soft.item()

    def test_vocab_mismatch_rejected(self, models, corpus):
        _, mt = models
        batch = make_batch(corpus[:2])
        src, lengths = batch.src_content
        other = Vocabulary(list(mt.source_vocab.symbols[:-1]) + ["zz"])
        post = PosteriorSequence(T.Tensor(np.eye(len(other))[src]), other, lengths)
        with pytest.raises(ValueError, match="vocab"):
            mt_forward(mt, post, lengths, batch.tgt, batch.tgt_lengths)

    def test_one_hot_cascade_loss_equals_mt_on_argmax(self, cascade, models, corpus):
        _, mt = models
        batch = make_batch(corpus)
        post, _, _ = asr_forward(cascade, batch)
        src, lengths = batch.src_content
        argmax = post.probs.data[:, : src.shape[1]].argmax(-1)
        # padded positions are ignored by the encoder, any token will do
        ref, _ = mt_forward(mt, argmax, lengths, batch.tgt, batch.tgt_lengths)
        got, _ = tight_forward(cascade, batch)
        assert got.item() == pytest.approx(ref.item(), abs=1e-10)


class TestConstruction:
    def test_cascade_carries_every_tensor(self, models):
        asr, mt = models
        casc = build_cascade(asr, mt)
        assert set(casc.names()) == set(asr.names()) | set(mt.names())
        assert casc.num_values() == asr.num_values() + mt.num_values()
        for src in (asr, mt):
            for n, p in src.params.items():
                assert casc.params[n].data.tobytes() == p.data.tobytes()
                assert casc.params[n] is not p

    def test_tight_keeps_cascade_parameters(self, cascade):
        tight = build_tight(cascade, BridgeConfig(train_gamma=1.0, decode_gamma=2.0))
        assert tight.kind == "tight"
        assert tight.names() == cascade.names()
        assert tight.num_values() == cascade.num_values()
        assert tight.bridge.decode_gamma == 2.0

    def test_direct_drops_asr_decoder_and_mt_encoder(self, models):
        asr, mt = models
        direct = build_direct(asr, mt)
        names = direct.names()
        assert not any(n.startswith(("asr.decoder", "mt.encoder")) for n in names)
        enc = sum(p.size for n, p in asr.params.items() if n.startswith("asr.encoder."))
        dec = sum(p.size for n, p in mt.params.items() if n.startswith("mt.decoder."))
        w = direct.params["direct.adapter.w"]
        assert direct.num_values() == enc + dec + w.size + direct.params["direct.adapter.b"].size
        assert w.shape == (2 * asr.arch["asr"]["encoder"]["hidden"], mt.params["mt.decoder.att.w_k"].shape[0])

    def test_direct_adapter_dim_checked(self, models):
        with pytest.raises(ValueError):
            build_direct(*models, adapter_dim=999)

    def test_wrong_inputs(self, models):
        asr, mt = models
        with pytest.raises(ValueError):
            build_cascade(mt, asr)
        with pytest.raises(ValueError):
            build_tight(asr)
        with pytest.raises(ValueError):
            ComponentGraph("lm", {}, {})

    def test_cascade_vocab_mismatch(self):
        asr, _ = tiny_models(tiny_task())
        _, mt = tiny_models(tiny_task(vocab_size=11))
        with pytest.raises(ValueError, match="vocab mismatch"):
            build_cascade(asr, mt)


class TestFreeze:
    def test_flags(self, cascade):
        apply_freeze(cascade, "asr.encoder,mt.decoder")
        for n in cascade.names():
            assert cascade.freeze[n] == n.startswith(("asr.encoder.", "mt.decoder."))
        assert {n for n, _ in cascade.trainable()} == {n for n in cascade.names() if not cascade.freeze[n]}

    def test_group_prefix(self, cascade):
        apply_freeze(cascade, FreezeMask(["asr"]))
        assert all(cascade.freeze[n] == n.startswith("asr.") for n in cascade.names())

    def test_empty_mask_unfreezes(self, cascade):
        apply_freeze(cascade, ["asr"])
        apply_freeze(cascade, None)
        assert not any(cascade.freeze.values())

    def test_unknown_prefix(self, cascade):
        with pytest.raises(ValueError, match="unknown freeze prefix"):
            apply_freeze(cascade, "asr.encode")

    def test_parse(self):
        assert FreezeMask.parse(" asr.encoder , mt ").frozen_prefixes == ["asr.encoder", "mt"]
        assert FreezeMask.parse("").frozen_prefixes == []


class TestGradientFlow:
    def _grads(self, model, corpus):
        model.zero_grad()
        loss, _ = tight_forward(model, make_batch(corpus[:4]))
        loss.backward()
        return {n: p.grad for n, p in model.params.items()}

    def test_soft_bridge_reaches_speech_encoder(self, cascade, corpus):
        grads = self._grads(build_tight(cascade), corpus)
        enc = [g for n, g in grads.items() if n.startswith("asr.encoder.")]
        assert enc and all(g is not None for g in enc)
        assert sum(float(np.abs(g).sum()) for g in enc) > 0

    def test_one_hot_bridge_blocks_asr(self, cascade, corpus):
        grads = self._grads(cascade, corpus)
        for n, g in grads.items():
            if n.startswith("asr."):
                assert g is None or not np.any(g)

    def test_finite_difference_through_bridge(self, cascade, corpus):
        tight = build_tight(cascade)
        batch = make_batch(corpus[:2])
        grads = self._grads(tight, corpus[:2])
        rng = np.random.default_rng(0)
        eps = 1e-6
        for name in ("asr.encoder.layer0.fwd.w_x", "asr.decoder.out.w", "mt.encoder.embed"):
            p = tight.params[name]
            for _ in range(3):
                idx = tuple(int(rng.integers(s)) for s in p.shape)
                old = p.data[idx]
                p.data[idx] = old + eps
                up, _ = tight.nll(batch)
                p.data[idx] = old - eps
                down, _ = tight.nll(batch)
                p.data[idx] = old
                assert grads[name][idx] == pytest.approx((up - down) / (2 * eps), abs=1e-6, rel=1e-4)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, cascade):
        tight = apply_freeze(build_tight(cascade, BridgeConfig(decode_gamma=4.0)), "asr")
        save_checkpoint(tight, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.kind == "tight" and back.arch == tight.arch and back.freeze == tight.freeze
        assert back.names() == tight.names()
        for n in tight.names():
            assert back.params[n].data.tobytes() == tight.params[n].data.tobytes()
        assert dumps(back) == dumps(tight)

    def test_no_temp_files_left(self, tmp_path, models):
        save_checkpoint(models[0], tmp_path / "a.ckpt")
        assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]

    def test_bad_magic(self, models):
        with pytest.raises(ValueError, match="magic"):
            loads(b"NOTACKPT" + dumps(models[0])[8:])

    def test_bad_version(self, models):
        blob = dumps(models[0])
        blob = MAGIC + struct.pack("<I", FORMAT_VERSION + 1) + blob[len(MAGIC) + 4 :]
        with pytest.raises(ValueError, match="version"):
            loads(blob)

    def test_truncated_and_trailing(self, models):
        blob = dumps(models[0])
        with pytest.raises(ValueError, match="truncated"):
            loads(blob[:-3])
        with pytest.raises(ValueError, match="trailing"):
            loads(blob + b"\0")
