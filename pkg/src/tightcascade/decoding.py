"""Greedy and beam-search decoding, plus the two-pass cascade / tight decoders.

A step function maps ``(state, prev_tokens[n]) -> (log_probs[n, V], new_state)``
where ``state`` is a tuple of arrays whose leading axis indexes hypotheses.
Beam search ranks by raw accumulated log-probability (no length
normalization); ties go to the lexicographically smallest token sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from . import tensor as T
from .bridge import BridgeConfig, PosteriorSequence, from_tokens
from .models import AttentionDecoder, ComponentGraph, ForwardContext, Memory, asr_forward, direct_encode, make_batch, Example, mt_encode
from .nn import BOS, EOS
from .tensor import Tensor

DEFAULT_MAX_LEN = 75

StepFn = Callable[[tuple, np.ndarray], tuple[np.ndarray, tuple]]


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    log_prob: float
    state: Any = None
    finished: bool = False

    def content(self, eos: int = EOS) -> list[int]:
        toks = list(self.tokens)
        if toks and toks[-1] == eos:
            toks.pop()
        return toks


def _select(state: tuple, idx: np.ndarray) -> tuple:
    return tuple(s[idx] for s in state)


def greedy_decode(step: StepFn, init_state: tuple, max_len: int = DEFAULT_MAX_LEN, bos: int = BOS, eos: int = EOS) -> Hypothesis:
    """Argmax (lowest id on ties) until EOS or max_len tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    state = init_state
    prev = bos
    tokens: list[int] = []
    score = 0.0
    while True:
        logp, state = step(state, np.array([prev]))
        tok = int(np.argmax(logp[0]))
        score = score + logp[0, tok]
        tokens.append(tok)
        prev = tok
        if tok == eos or len(tokens) == max_len:
            return Hypothesis(tuple(tokens), float(score), None, True)


def beam_search(
    step: StepFn,
    init_state: tuple,
    beam_size: int = 12,
    max_len: int = DEFAULT_MAX_LEN,
    bos: int = BOS,
    eos: int = EOS,
) -> list[Hypothesis]:
    """Return the finished hypotheses, best first (at most beam_size of them)."""
    if beam_size < 1 or max_len < 1:
        raise ValueError("beam_size and max_len must be >= 1")
    live = [Hypothesis((), 0.0, 0)]
    state = init_state
    finished: list[Hypothesis] = []
    for t in range(max_len):
        prev = np.array([h.tokens[-1] if h.tokens else bos for h in live])
        logp, new_state = step(state, prev)
        n, V = logp.shape
        # live hypotheses all have length t, so lexicographic order of the
        # extended sequences is (rank of parent, token id)
        parent_rank = np.empty(n, dtype=np.int64)
        parent_rank[sorted(range(n), key=lambda i: live[i].tokens)] = np.arange(n)
        scores = np.array([h.log_prob for h in live])[:, None] + logp
        flat = scores.reshape(-1)
        parents = np.repeat(np.arange(n), V)
        toks = np.tile(np.arange(V), n)
        order = np.lexsort((toks, parent_rank[parents], -flat))[:beam_size]
        next_live: list[Hypothesis] = []
        keep_idx = []
        for k in order:
            i, v = int(parents[k]), int(toks[k])
            hyp = Hypothesis(live[i].tokens + (v,), float(scores[i, v]))
            if v == eos or t + 1 == max_len:
                hyp.finished = True
                finished.append(hyp)
            else:
                hyp.state = len(keep_idx)
                keep_idx.append(i)
                next_live.append(hyp)
        if not next_live:
            break
        state = _select(new_state, np.array(keep_idx))
        live = next_live
        best_done = max((h.log_prob for h in finished), default=-np.inf)
        if best_done > max(h.log_prob for h in live):
            break
    finished.sort(key=lambda h: (-h.log_prob, h.tokens))
    return finished[:beam_size]


# ---------------------------------------------------------------------------
# model step functions


class DecoderStep:
    """Step function for an attention decoder over a single utterance's memory."""

    def __init__(self, dec: AttentionDecoder, memory: Memory):
        self.dec = dec
        self.memory = memory
        self._cache: dict[int, Memory] = {}

    def initial(self) -> tuple:
        return tuple(t.data for t in self.dec.initial_state(1))

    def _mem(self, n: int) -> Memory:
        mem = self._cache.get(n)
        if mem is None:
            mem = self.memory.select(np.zeros(n, dtype=np.int64))
            self._cache[n] = mem
        return mem

    def __call__(self, state: tuple, prev: np.ndarray):
        with T.no_grad():
            emb = T.take_rows(self.dec.p("embed"), prev)
            r, (h, c, ctx) = self.dec.step(emb, tuple(Tensor(s) for s in state), self._mem(len(prev)))
            logp = T.log_softmax(self.dec.logits(r), axis=-1)
        return logp.data, (h.data, c.data, ctx.data)


def _frames_tensor(frames: np.ndarray) -> tuple[Tensor, np.ndarray]:
    frames = np.asarray(frames, dtype=T.get_default_dtype())
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError("empty frames")
    return Tensor(frames[None]), np.array([frames.shape[0]])


def asr_stepper(model: ComponentGraph, frames: np.ndarray) -> DecoderStep:
    x, lengths = _frames_tensor(frames)
    with T.no_grad():
        enc, out_len = model.speech_encoder()(x, lengths)
        dec = model.asr_decoder()
        mem = dec.memory(enc, out_len)
    return DecoderStep(dec, mem)


def mt_stepper(model: ComponentGraph, source, bridge: BridgeConfig | None = None) -> DecoderStep:
    """`source` is a list of content token ids or a [1, J, V] PosteriorSequence."""
    with T.no_grad():
        if isinstance(source, PosteriorSequence):
            lengths = np.array([source.probs.shape[1]])
            enc, out_len = mt_encode(model, source, lengths, ForwardContext(), bridge)
        else:
            src = np.asarray(source, dtype=np.int64)[None]
            enc, out_len = mt_encode(model, src, np.array([src.shape[1]]), ForwardContext())
        dec = model.mt_decoder()
        mem = dec.memory(enc, out_len)
    return DecoderStep(dec, mem)


def direct_stepper(model: ComponentGraph, frames: np.ndarray) -> DecoderStep:
    x, lengths = _frames_tensor(frames)
    with T.no_grad():
        enc, out_len = direct_encode(model, x, lengths, ForwardContext())
        dec = model.mt_decoder()
        mem = dec.memory(enc, out_len)
    return DecoderStep(dec, mem)


def _run(stepper: DecoderStep, beam_size: int, max_len: int) -> Hypothesis:
    return beam_search(stepper, stepper.initial(), beam_size, max_len)[0]


def decode_asr(model: ComponentGraph, frames: np.ndarray, beam_size: int = 12, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    return _run(asr_stepper(model, frames), beam_size, max_len).content()


def decode_mt(model: ComponentGraph, source, beam_size: int = 12, max_len: int = DEFAULT_MAX_LEN, bridge: BridgeConfig | None = None) -> list[int]:
    if isinstance(source, PosteriorSequence):
        if source.probs.shape[1] == 0:
            return []
    elif len(source) == 0:
        return []
    return _run(mt_stepper(model, source, bridge), beam_size, max_len).content()


def decode_direct(model: ComponentGraph, frames: np.ndarray, beam_size: int = 12, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    return _run(direct_stepper(model, frames), beam_size, max_len).content()


def asr_posteriors(model: ComponentGraph, frames: np.ndarray, transcript: Sequence[int]) -> PosteriorSequence:
    """Full ASR distributions at each position of `transcript`, conditioned on its prefix.

    Row j is p(. | transcript[:j], frames); the returned sequence has one row
    per content token (the final EOS prediction is dropped).
    """
    ex = Example(np.asarray(frames, dtype=T.get_default_dtype()), list(transcript))
    with T.no_grad():
        post, _, _ = asr_forward(model, make_batch([ex]))
    J = len(transcript)
    return PosteriorSequence(
        Tensor(post.probs.data[:, :J]), post.vocab, np.array([J]), Tensor(post.log_probs.data[:, :J])
    )


def decode_cascade(asr: ComponentGraph, mt: ComponentGraph | None, frames: np.ndarray, beam_size: int = 12, max_len: int = DEFAULT_MAX_LEN):
    """Vanilla two-pass cascade: ASR beam -> discrete transcript -> MT beam."""
    mt = asr if mt is None else mt
    transcript = decode_asr(asr, frames, beam_size, max_len)
    return transcript, decode_mt(mt, transcript, beam_size, max_len)


def translate_transcript(
    model: ComponentGraph,
    frames: np.ndarray,
    transcript: list[int],
    bridge: BridgeConfig,
    beam_size: int = 12,
    max_len: int = DEFAULT_MAX_LEN,
    posteriors: PosteriorSequence | None = None,
) -> list[int]:
    """Second pass of the tight decoder for an already decoded transcript."""
    if not transcript:
        return []
    vocab = model.source_vocab
    if bridge.mode == "one_hot":
        dist = from_tokens(np.asarray(transcript)[None], vocab)
    else:
        dist = posteriors if posteriors is not None else asr_posteriors(model, frames, transcript)
    return decode_mt(model, dist, beam_size, max_len, bridge)


def decode_tight(
    model: ComponentGraph,
    frames: np.ndarray,
    bridge: BridgeConfig | None = None,
    beam_size: int = 12,
    max_len: int = DEFAULT_MAX_LEN,
) -> tuple[list[int], list[int]]:
    """Transcript and translation from one tight model.

    Pass 1 beam-searches the ASR; pass 2 bridges that transcript into the MT
    (soft: prefix-conditioned posteriors sharpened with decode_gamma; one_hot:
    the transcript tokens themselves) and beam-searches the translation.
    """
    bridge = (bridge or model.bridge).for_decoding()
    transcript = decode_asr(model, frames, beam_size, max_len)
    return transcript, translate_transcript(model, frames, transcript, bridge, beam_size, max_len)
