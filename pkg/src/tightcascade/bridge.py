"""Sharpened source-word posteriors as soft MT input.

Each row of an ASR posterior sequence is raised to an exponent gamma and
renormalized, p_j(v)^gamma / sum_v' p_j(v')^gamma, then fed to the MT encoder
as the expected source embedding.  gamma = 0 gives the uniform distribution,
gamma = 1 the posterior itself, and large gamma approaches the argmax one-hot
vector.  The sharpening is computed in log space so that underflow of the
normalizer is practically unreachable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .nn import Vocabulary, embed, one_hot
from .tensor import Tensor, make_node

MODES = ("soft", "one_hot")


@dataclass
class PosteriorSequence:
    """Row-stochastic [J, V] (or batched [B, J, V]) source-word distributions.

    `log_probs`, when present, is the log of `probs` as produced by the model
    and is used in place of log(probs) to avoid a round trip.
    """

    probs: Tensor
    vocab: Vocabulary | None = None
    lengths: np.ndarray | None = None
    log_probs: Tensor | None = None

    def __post_init__(self):
        if not isinstance(self.probs, Tensor):
            self.probs = Tensor(self.probs)

    @property
    def width(self) -> int:
        return self.probs.shape[-1]

    def validate(self, atol: float = 1e-9) -> None:
        p = self.probs.data
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("posterior entries must lie in [0, 1]")
        if np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
            raise ValueError("posterior rows must sum to 1")

    def argmax(self) -> np.ndarray:
        return self.probs.data.argmax(axis=-1)


@dataclass
class BridgeConfig:
    """Bridge settings; `gamma` is the exponent currently in effect."""

    gamma: float = 1.0
    mode: str = "soft"
    train_gamma: float = 1.0
    decode_gamma: float = 2.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown bridge mode {self.mode!r}")
        for g in (self.gamma, self.train_gamma, self.decode_gamma):
            if not np.isfinite(g) or g < 0:
                raise ValueError("gamma must be finite and non-negative")

    def for_training(self) -> "BridgeConfig":
        return replace(self, gamma=self.train_gamma)

    def for_decoding(self) -> "BridgeConfig":
        return replace(self, gamma=self.decode_gamma)

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "mode": self.mode, "train_gamma": self.train_gamma, "decode_gamma": self.decode_gamma}


def _sharpen(log_p: Tensor, gamma: float) -> Tensor:
    """softmax(gamma * log_p) along the last axis, tolerating -inf entries."""
    s = gamma * log_p.data
    m = s.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("degenerate row: sharpened distribution has no mass")
    with np.errstate(invalid="ignore"):
        e = np.exp(s - m)
    z = e.sum(axis=-1, keepdims=True)
    out = e / z

    def bw(g, grad_of):
        gl = grad_of(log_p)
        if gl is not None:
            d = gamma * out * (g - (g * out).sum(axis=-1, keepdims=True))
            gl += np.where(out > 0, d, 0.0)

    return make_node(out, (log_p,), bw, "sharpen")


def renormalize(dist: PosteriorSequence, gamma: float) -> PosteriorSequence:
    """Raise every row to `gamma` and renormalize.  gamma = 1 returns `dist` itself."""
    gamma = float(gamma)
    if not np.isfinite(gamma) or gamma < 0:
        raise ValueError("gamma must be finite and non-negative")
    if gamma == 1.0:
        return dist
    p = dist.probs.data
    if gamma == 0.0:
        if np.any(p <= 0):
            raise ValueError("degenerate row: gamma = 0 requires full support")
        uniform = np.full_like(p, 1.0 / p.shape[-1])
        return PosteriorSequence(Tensor(uniform), dist.vocab, dist.lengths)
    log_p = dist.log_probs if dist.log_probs is not None else T.log(dist.probs)
    out = _sharpen(log_p, gamma)
    return PosteriorSequence(out, dist.vocab, dist.lengths)


def renormalize_rows(probs: np.ndarray, gamma: float) -> np.ndarray:
    """Array convenience wrapper around `renormalize`."""
    with T.no_grad():
        return renormalize(PosteriorSequence(Tensor(probs)), gamma).probs.data


def to_one_hot(dist: PosteriorSequence) -> PosteriorSequence:
    """One-hot at each row's argmax; ties go to the lowest token id."""
    ids = dist.probs.data.argmax(axis=-1)
    return PosteriorSequence(Tensor(one_hot(ids, dist.width)), dist.vocab, dist.lengths)


def from_tokens(ids, vocab: Vocabulary) -> PosteriorSequence:
    """Degenerate posteriors that put all mass on the given tokens."""
    ids = np.asarray(ids, dtype=np.int64)
    return PosteriorSequence(Tensor(one_hot(ids, len(vocab))), vocab, np.array([ids.shape[-1]]))


def bridge_forward(dist: PosteriorSequence, cfg: BridgeConfig, table: Tensor, vocab: Vocabulary | None = None) -> Tensor:
    """Embed posteriors into the MT source embedding space.

    soft mode sharpens with cfg.gamma and takes the expected embedding; the
    result stays differentiable back into whatever produced `dist`.  one_hot
    mode embeds the argmax tokens, which reproduces the discrete cascade.
    """
    if dist.width != table.shape[0]:
        raise ValueError("bridge vocabulary mismatch")
    if vocab is not None and dist.vocab is not None and vocab != dist.vocab:
        raise ValueError("bridge vocabulary mismatch")
    if cfg.mode == "one_hot":
        return embed(to_one_hot(dist).probs, table)
    return embed(renormalize(dist, cfg.gamma).probs, table)
