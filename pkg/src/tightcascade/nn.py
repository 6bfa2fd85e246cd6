"""Neural building blocks on top of the tensor engine.

Gate order for all LSTM weights is [input, forget, cell, output].  Batched
sequences are right-padded; a boolean mask of shape [B, T] marks the valid
positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, make_node

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")

NEG_INF = -1e30


class Vocabulary:
    """Dense symbol <-> id map with the four reserved symbols at ids 0..3."""

    def __init__(self, symbols: Sequence[str]):
        symbols = list(symbols)
        if symbols[: len(RESERVED)] != list(RESERVED):
            symbols = list(RESERVED) + [s for s in symbols if s not in RESERVED]
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate symbols in vocabulary")
        self.symbols = symbols
        self.ids = {s: i for i, s in enumerate(symbols)}

    pad, bos, eos, unk = PAD, BOS, EOS, UNK

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.symbols == other.symbols

    def __hash__(self) -> int:
        return hash(tuple(self.symbols))

    def __repr__(self) -> str:
        return f"Vocabulary({len(self)} symbols)"

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.ids.get(w, UNK) for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.symbols[i] for i in ids]


@dataclass
class EncoderConfig:
    num_layers: int = 2
    hidden: int = 64
    pool_factors: list[int] = field(default_factory=lambda: [2])
    embed_dim: int = 32

    def __post_init__(self):
        self.pool_factors = [int(f) for f in self.pool_factors]
        if self.num_layers < 1 or self.hidden < 1:
            raise ValueError("encoder needs at least one layer and a positive hidden size")
        if any(f < 1 for f in self.pool_factors):
            raise ValueError("pool factors must be positive")
        if len(self.pool_factors) > self.num_layers:
            raise ValueError("more pool factors than encoder layers")

    @property
    def reduction(self) -> int:
        return int(np.prod(self.pool_factors)) if self.pool_factors else 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DecoderConfig:
    hidden: int = 64
    embed_dim: int = 32
    attention_dim: int = 64

    def __post_init__(self):
        if min(self.hidden, self.embed_dim, self.attention_dim) <= 0:
            raise ValueError("decoder dims must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def init_uniform(rng: np.random.Generator, shape, scale: float | None = None) -> np.ndarray:
    if scale is None:
        fan_in = shape[0] if len(shape) > 1 else shape[0]
        scale = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-scale, scale, size=shape).astype(T.get_default_dtype())


# ---------------------------------------------------------------------------
# embeddings


def embed(inputs, table: Tensor, atol: float = 1e-6) -> Tensor:
    """Look up token ids, or take the expected embedding of distributions.

    Integer arrays select rows; a float Tensor/array whose last axis has size
    |V| is treated as a stack of distributions and multiplied into the table.
    """
    if isinstance(inputs, Tensor) or (isinstance(inputs, np.ndarray) and inputs.dtype.kind == "f"):
        dist = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
        if dist.shape[-1] != table.shape[0]:
            raise ValueError(f"distribution width {dist.shape[-1]} does not match vocabulary size {table.shape[0]}")
        sums = dist.data.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > atol):
            raise ValueError("distribution row is not normalized")
        return T.matmul(dist, table)
    ids = np.asarray(inputs)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("token id out of range")
    return T.take_rows(table, ids)


def one_hot(ids, size: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros(ids.shape + (size,), dtype=T.get_default_dtype())
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


# ---------------------------------------------------------------------------
# LSTM


def lstm_step(x: Tensor, h: Tensor, c: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step: x[B, dx], h/c[B, H], w[dx+H, 4H], b[4H] -> (h', c')."""
    hidden = h.shape[-1]
    if w.shape != (x.shape[-1] + hidden, 4 * hidden) or c.shape != h.shape:
        raise ValueError(f"lstm_step: dim mismatch x{x.shape} h{h.shape} c{c.shape} w{w.shape}")
    z = T.linear(T.concat([x, h], axis=-1), w, b)
    i = T.sigmoid(z[..., 0:hidden])
    f = T.sigmoid(z[..., hidden : 2 * hidden])
    g = T.tanh(z[..., 2 * hidden : 3 * hidden])
    o = T.sigmoid(z[..., 3 * hidden :])
    c_new = f * c + i * g
    h_new = o * T.tanh(c_new)
    return h_new, c_new


_sig = T._sigmoid


def lstm_sequence(xproj: Tensor, w_h: Tensor, mask: np.ndarray | None = None, reverse: bool = False) -> Tensor:
    """Run an LSTM over a whole padded batch as one tape node.

    xproj holds the input projections (x @ w_x + b) with shape [B, T, 4H].
    Positions where mask is False leave the state untouched, so a reversed
    pass starts from a zero state at each sequence's true end.  Returns the
    hidden states [B, T, H], with zeros at masked positions.
    """
    B, steps, four_h = xproj.shape
    H = four_h // 4
    if w_h.shape != (H, four_h):
        raise ValueError(f"lstm_sequence: w_h shape {w_h.shape} != {(H, four_h)}")
    m = np.ones((B, steps), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    dt = xproj.data.dtype
    W = w_h.data
    h = np.zeros((B, H), dtype=dt)
    c = np.zeros((B, H), dtype=dt)
    hs = np.zeros((B, steps, H), dtype=dt)
    cache = []
    for t in order:
        z = xproj.data[:, t] + h @ W
        i = _sig(z[:, :H])
        f = _sig(z[:, H : 2 * H])
        g = np.tanh(z[:, 2 * H : 3 * H])
        o = _sig(z[:, 3 * H :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        mt = m[:, t][:, None]
        cache.append((t, h, c, i, f, g, o, tc, mt))
        h = np.where(mt, h_new, h)
        c = np.where(mt, c_new, c)
        hs[:, t] = np.where(mt, h, 0.0)

    def bw(gout, grad_of):
        gx, gw = grad_of(xproj), grad_of(w_h)
        dh = np.zeros((B, H), dtype=dt)
        dc = np.zeros((B, H), dtype=dt)
        for t, h_prev, c_prev, i, f, g, o, tc, mt in reversed(cache):
            dh = dh + np.where(mt, gout[:, t], 0.0)
            dh_new = np.where(mt, dh, 0.0)
            dc_new = np.where(mt, dc, 0.0) + dh_new * o * (1.0 - tc * tc)
            dz = np.concatenate(
                [dc_new * g * i * (1.0 - i), dc_new * c_prev * f * (1.0 - f), dc_new * i * (1.0 - g * g), dh_new * tc * o * (1.0 - o)],
                axis=1,
            )
            if gx is not None:
                gx[:, t] += dz
            if gw is not None:
                gw += h_prev.T @ dz
            dh = np.where(mt, 0.0, dh) + dz @ W.T
            dc = np.where(mt, 0.0, dc) + dc_new * f

    return make_node(hs, (xproj, w_h), bw, "lstm_sequence")


# ---------------------------------------------------------------------------
# pooling


def pooled_lengths(lengths, factor: int) -> np.ndarray:
    return -(-np.asarray(lengths) // factor)


def max_pool_time(x: Tensor, factor: int, lengths: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Max-pool [B, T, D] over time with ceil output length.

    A window that runs past a sequence's end sees that sequence's last valid
    frame repeated, which is the same as ignoring the padded positions.
    """
    B, steps, D = x.shape
    lengths = np.full(B, steps) if lengths is None else np.asarray(lengths)
    if factor == 1:
        return x, lengths
    out_steps = -(-steps // factor)
    padded = np.full((B, out_steps * factor, D), -np.inf, dtype=x.data.dtype)
    valid = np.arange(steps)[None, :] < lengths[:, None]
    padded[:, :steps] = np.where(valid[..., None], x.data, -np.inf)
    win = padded.reshape(B, out_steps, factor, D)
    arg = win.argmax(axis=2)
    out = np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :]
    out_len = pooled_lengths(lengths, factor)
    out = np.where(np.isfinite(out), out, 0.0)
    src_t = np.arange(out_steps)[None, :, None] * factor + arg
    keep = (np.arange(out_steps)[None, :] < out_len[:, None])[..., None] & (src_t < steps)

    def bw(g, grad_of):
        gx = grad_of(x)
        if gx is None:
            return
        b_idx, o_idx, d_idx = np.nonzero(keep)
        np.add.at(gx, (b_idx, src_t[b_idx, o_idx, d_idx], d_idx), g[b_idx, o_idx, d_idx])

    return make_node(np.ascontiguousarray(out), (x,), bw, "max_pool_time"), out_len


# ---------------------------------------------------------------------------
# encoder


def lengths_to_mask(lengths, steps: int) -> np.ndarray:
    return np.arange(steps)[None, :] < np.asarray(lengths)[:, None]


def encoder_layer_names(prefix: str, layer: int) -> list[str]:
    return [f"{prefix}.layer{layer}.{d}.{n}" for d in ("fwd", "bwd") for n in ("w_x", "w_h", "b")]


def init_encoder_layer(params: dict, prefix: str, layer: int, input_dim: int, hidden: int, rng: np.random.Generator) -> None:
    for d in ("fwd", "bwd"):
        base = f"{prefix}.layer{layer}.{d}"
        params[f"{base}.w_x"] = Tensor(init_uniform(rng, (input_dim, 4 * hidden)), requires_grad=True)
        params[f"{base}.w_h"] = Tensor(init_uniform(rng, (hidden, 4 * hidden)), requires_grad=True)
        bias = np.zeros(4 * hidden, dtype=T.get_default_dtype())
        bias[hidden : 2 * hidden] = 1.0
        params[f"{base}.b"] = Tensor(bias, requires_grad=True)


def count_encoder_layers(params: dict, prefix: str) -> int:
    n = 0
    while f"{prefix}.layer{n}.fwd.w_x" in params:
        n += 1
    return n


def bilstm_encode(
    x: Tensor,
    params: dict,
    prefix: str,
    cfg: EncoderConfig,
    lengths: np.ndarray | None = None,
    num_layers: int | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Stacked biLSTM over [B, T, D]; pool_factors[k] max-pools after layer k.

    Returns outputs [B, T', 2H] and the per-sequence output lengths.
    """
    B, steps, _ = x.shape
    if steps == 0 or B == 0:
        raise ValueError("empty input to encoder")
    lengths = np.full(B, steps) if lengths is None else np.asarray(lengths)
    if np.any(lengths <= 0):
        raise ValueError("empty input to encoder")
    layers = count_encoder_layers(params, prefix) if num_layers is None else num_layers
    h = x
    for layer in range(layers):
        mask = lengths_to_mask(lengths, h.shape[1])
        outs = []
        for d, rev in (("fwd", False), ("bwd", True)):
            base = f"{prefix}.layer{layer}.{d}"
            xproj = T.linear(h, params[f"{base}.w_x"], params[f"{base}.b"])
            outs.append(lstm_sequence(xproj, params[f"{base}.w_h"], mask, reverse=rev))
        h = T.concat(outs, axis=-1)
        if layer < len(cfg.pool_factors):
            h, lengths = max_pool_time(h, cfg.pool_factors[layer], lengths)
    return h, lengths


# ---------------------------------------------------------------------------
# attention


def additive_scores(qp: Tensor, kp: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """e[b, t] = v . tanh(kp[b, t] + qp[b]); masked positions get a large negative score."""
    B, steps, A = kp.shape
    if qp.shape != (B, A) or v.shape != (A,):
        raise ValueError(f"additive_scores: shapes qp{qp.shape} kp{kp.shape} v{v.shape}")
    u = np.tanh(kp.data + qp.data[:, None, :])
    e = u @ v.data
    m = None if mask is None else np.asarray(mask, dtype=bool)
    if m is not None:
        e = np.where(m, e, NEG_INF)

    def bw(g, grad_of):
        gq, gk, gv = grad_of(qp), grad_of(kp), grad_of(v)
        if m is not None:
            g = np.where(m, g, 0.0)
        if gv is not None:
            gv += np.einsum("bt,bta->a", g, u)
        du = g[:, :, None] * v.data[None, None, :] * (1.0 - u * u)
        if gk is not None:
            gk += du
        if gq is not None:
            gq += du.sum(axis=1)

    return make_node(e, (qp, kp, v), bw, "additive_scores")


def additive_attention(
    query: Tensor,
    keys: Tensor,
    values: Tensor,
    w_q: Tensor,
    v: Tensor,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Single-head additive attention.

    `keys` are the already projected keys [B, T, A]; `values` are [B, T, K].
    Returns (context [B, K], weights [B, T]).
    """
    if keys.shape[1] == 0:
        raise ValueError("attention over zero positions")
    scores = additive_scores(T.matmul(query, w_q), keys, v, mask)
    weights = T.softmax(scores, axis=-1)
    B, steps = weights.shape
    context = T.bmm(T.reshape(weights, (B, 1, steps)), values)
    return T.reshape(context, (B, values.shape[2])), weights


# ---------------------------------------------------------------------------
# losses and regularizers


def smoothed_targets(targets: np.ndarray, vocab_size: int, ratio: float) -> np.ndarray:
    q = one_hot(targets, vocab_size) * (1.0 - ratio)
    q += ratio / vocab_size
    return q


def label_smoothed_ce(logits: Tensor, target: int, ratio: float = 0.0) -> Tensor:
    """-sum_v q(v) log p(v) with q = (1-ratio) onehot + ratio/|V|."""
    V = logits.shape[-1]
    if not 0 <= target < V:
        raise IndexError(f"target {target} out of range for {V} classes")
    if not 0.0 <= ratio < 1.0:
        raise ValueError("smoothing ratio must be in [0, 1)")
    lp = T.log_softmax(logits, axis=-1)
    q = Tensor(smoothed_targets(np.asarray(target), V, ratio))
    return -T.tsum(lp * q)


def sequence_ce(logits: Tensor, targets: np.ndarray, mask: np.ndarray, ratio: float = 0.0) -> Tensor:
    """Summed label-smoothed cross entropy over the valid positions of [B, I, V] logits."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError("smoothing ratio must be in [0, 1)")
    V = logits.shape[-1]
    lp = T.log_softmax(logits, axis=-1)
    q = smoothed_targets(targets, V, ratio) * np.asarray(mask, dtype=lp.data.dtype)[..., None]
    return -T.tsum(lp * Tensor(q))


def dropout(t: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or rate == 0.0:
        return t
    keep = rng.random(t.shape) >= rate
    return t * Tensor(keep / (1.0 - rate))


def feature_mask(
    frames, num_time_masks: int, num_feat_masks: int, max_width: int, rng: np.random.Generator, min_width: int = 0
):
    """Zero random contiguous time rows and feature columns of a [T, d] array or Tensor.

    Mask widths are drawn uniformly from [min_width, max_width], clipped to the
    axis length.
    """
    data = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    steps, dim = data.shape[-2], data.shape[-1]
    keep = np.ones((steps, dim), dtype=data.dtype)
    for _ in range(num_time_masks):
        w = int(rng.integers(min(min_width, steps), min(max_width, steps) + 1))
        start = int(rng.integers(0, steps - w + 1))
        keep[start : start + w, :] = 0.0
    for _ in range(num_feat_masks):
        w = int(rng.integers(min(min_width, dim), min(max_width, dim) + 1))
        start = int(rng.integers(0, dim - w + 1))
        keep[:, start : start + w] = 0.0
    if isinstance(frames, Tensor):
        return frames * Tensor(np.broadcast_to(keep, data.shape).copy())
    return data * keep
