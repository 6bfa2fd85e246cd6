"""ASR, MT, direct and cascade/tight speech-translation models.

A model is a `ComponentGraph`: a flat dict of hierarchically named parameter
tensors (``asr.encoder.layer0.fwd.w_x``, ``mt.decoder.out.b``, ...), the
architecture metadata needed to interpret them, and per-tensor freeze flags.
The forward functions below read the parameters by name, so assembling a
cascade or tight model is only a matter of merging dicts.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .bridge import BridgeConfig, PosteriorSequence, bridge_forward
from .nn import (
    BOS,
    EOS,
    PAD,
    DecoderConfig,
    EncoderConfig,
    Vocabulary,
    additive_attention,
    bilstm_encode,
    count_encoder_layers,
    dropout,
    embed,
    feature_mask,
    init_encoder_layer,
    init_uniform,
    lengths_to_mask,
    lstm_step,
    sequence_ce,
)
from .tensor import Tensor

KINDS = ("asr", "mt", "direct", "cascade", "tight")
FREEZE_GROUPS = ("asr.encoder", "asr.decoder", "mt.encoder", "mt.decoder")


# ---------------------------------------------------------------------------
# batches


@dataclass
class Example:
    """One utterance.  Token lists hold content ids without BOS/EOS."""

    features: np.ndarray | None
    transcript: list[int] | None
    translation: list[int] | None = None
    uid: str = ""


@dataclass
class Batch:
    frames: np.ndarray | None = None  # [B, T, d]
    frame_lengths: np.ndarray | None = None
    src: np.ndarray | None = None  # [B, J+2] framed with BOS/EOS, PAD-padded
    src_lengths: np.ndarray | None = None  # framed lengths
    tgt: np.ndarray | None = None
    tgt_lengths: np.ndarray | None = None
    size: int = 0

    @property
    def src_content(self) -> tuple[np.ndarray, np.ndarray]:
        lengths = self.src_lengths - 2
        width = int(lengths.max())
        return self.src[:, 1 : 1 + width], lengths


def frame_tokens(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) + 2 for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s) + 2] = [BOS, *s, EOS]
    return out, lengths


def make_batch(examples: Sequence[Example]) -> Batch:
    b = Batch(size=len(examples))
    if all(e.features is not None for e in examples):
        lengths = np.array([len(e.features) for e in examples], dtype=np.int64)
        dim = examples[0].features.shape[1]
        frames = np.zeros((len(examples), int(lengths.max()), dim), dtype=T.get_default_dtype())
        for i, e in enumerate(examples):
            frames[i, : len(e.features)] = e.features
        b.frames, b.frame_lengths = frames, lengths
    if all(e.transcript is not None for e in examples):
        b.src, b.src_lengths = frame_tokens([e.transcript for e in examples])
    if all(e.translation is not None for e in examples):
        b.tgt, b.tgt_lengths = frame_tokens([e.translation for e in examples])
    return b


# ---------------------------------------------------------------------------
# parameter graph


@dataclass
class FreezeMask:
    frozen_prefixes: list[str] = field(default_factory=list)

    @classmethod
    def parse(cls, text: str | Iterable[str] | None) -> "FreezeMask":
        if text is None:
            return cls([])
        items = text.split(",") if isinstance(text, str) else list(text)
        return cls([i.strip() for i in items if i.strip()])


def _matches(name: str, prefix: str) -> bool:
    return name == prefix or name.startswith(prefix + ".")


class ComponentGraph:
    """Named parameters + architecture metadata + freeze flags."""

    def __init__(self, kind: str, params: dict[str, Tensor], arch: dict, freeze: dict[str, bool] | None = None):
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.params = params
        self.arch = arch
        self.freeze = {name: False for name in params}
        if freeze:
            unknown = set(freeze) - set(params)
            if unknown:
                raise ValueError(f"freeze flags for unknown parameters: {sorted(unknown)[:3]}")
            self.freeze.update(freeze)

    def __repr__(self) -> str:
        return f"ComponentGraph(kind={self.kind}, tensors={len(self.params)}, values={self.num_values()})"

    def num_values(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def names(self) -> list[str]:
        return list(self.params)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.params.items() if not self.freeze.get(n, False)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "ComponentGraph":
        params = {n: Tensor(p.data.copy(), requires_grad=True) for n, p in self.params.items()}
        return ComponentGraph(self.kind, params, copy.deepcopy(self.arch), dict(self.freeze))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, arr in snap.items():
            self.params[n].data = arr.copy()

    # -- vocabularies -----------------------------------------------------
    @property
    def source_vocab(self) -> Vocabulary:
        if "asr" in self.arch and "vocab" in self.arch["asr"]:
            return Vocabulary(self.arch["asr"]["vocab"])
        return Vocabulary(self.arch["mt"]["src_vocab"])

    @property
    def target_vocab(self) -> Vocabulary:
        return Vocabulary(self.arch["mt"]["tgt_vocab"])

    @property
    def bridge(self) -> BridgeConfig:
        return BridgeConfig(**self.arch.get("bridge", {}))

    # -- views ------------------------------------------------------------
    def speech_encoder(self) -> "Encoder":
        a = self.arch["asr"]
        return Encoder(self.params, "asr.encoder", EncoderConfig(**a["encoder"]))

    def text_encoder(self) -> "Encoder":
        a = self.arch["mt"]
        return Encoder(self.params, "mt.encoder", EncoderConfig(**a["encoder"]))

    def asr_decoder(self) -> "AttentionDecoder":
        return AttentionDecoder(self.params, "asr.decoder")

    def mt_decoder(self) -> "AttentionDecoder":
        return AttentionDecoder(self.params, "mt.decoder")

    # -- training interface -------------------------------------------------
    def loss(self, batch: Batch, ctx: "ForwardContext") -> tuple[Tensor, int]:
        """Summed training loss and the number of target tokens it covers."""
        if self.kind == "asr":
            _, loss, n = asr_forward(self, batch, ctx)
            return loss, n
        if self.kind == "mt":
            src, lengths = batch.src_content
            return mt_forward(self, src, lengths, batch.tgt, batch.tgt_lengths, ctx)
        if self.kind == "direct":
            return direct_forward(self, batch, ctx)
        if self.kind in ("tight", "cascade"):
            return tight_forward(self, batch, ctx)
        raise ValueError(self.kind)

    def nll(self, batch: Batch, gamma: float | None = None) -> tuple[float, int]:
        """Teacher-forced negative log-likelihood without smoothing or dropout."""
        ctx = ForwardContext(gamma=gamma)
        with T.no_grad():
            loss, n = self.loss(batch, ctx)
        return float(loss.item()), n


@dataclass
class ForwardContext:
    training: bool = False
    rng: np.random.Generator | None = None
    dropout: float = 0.0
    label_smoothing: float = 0.0
    gamma: float | None = None  # bridge exponent override
    aux_asr_weight: float = 0.0
    time_masks: int = 0
    feat_masks: int = 0
    mask_width: int = 0

    def drop(self, t: Tensor) -> Tensor:
        return dropout(t, self.dropout, self.training, self.rng)


# ---------------------------------------------------------------------------
# layers bound to parameter names


class Encoder:
    """Stacked biLSTM encoder; text encoders own an input embedding table."""

    def __init__(self, params: dict, prefix: str, cfg: EncoderConfig):
        self.params = params
        self.prefix = prefix
        self.cfg = cfg

    @property
    def num_layers(self) -> int:
        return count_encoder_layers(self.params, self.prefix)

    @property
    def output_dim(self) -> int:
        return 2 * self.cfg.hidden

    @property
    def embedding(self) -> Tensor:
        return self.params[f"{self.prefix}.embed"]

    def __call__(self, x: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        return bilstm_encode(x, self.params, self.prefix, self.cfg, lengths)

    @staticmethod
    def init_params(params: dict, prefix: str, cfg: EncoderConfig, input_dim: int, rng, num_layers: int | None = None, vocab_size: int | None = None):
        if vocab_size is not None:
            params[f"{prefix}.embed"] = Tensor(init_uniform(rng, (vocab_size, cfg.embed_dim), 0.1), requires_grad=True)
            input_dim = cfg.embed_dim
        n = cfg.num_layers if num_layers is None else num_layers
        for layer in range(n):
            init_encoder_layer(params, prefix, layer, input_dim if layer == 0 else 2 * cfg.hidden, cfg.hidden, rng)


@dataclass
class Memory:
    values: Tensor  # [B, T, K]
    keys: Tensor  # [B, T, A]
    mask: np.ndarray  # [B, T]

    def select(self, idx: np.ndarray) -> "Memory":
        return Memory(Tensor(self.values.data[idx]), Tensor(self.keys.data[idx]), self.mask[idx])


class AttentionDecoder:
    """1-layer LSTM decoder with input feeding and additive attention."""

    def __init__(self, params: dict, prefix: str):
        self.params = params
        self.prefix = prefix
        self.hidden = params[f"{prefix}.att.w_q"].shape[0]
        self.memory_dim = params[f"{prefix}.att.w_k"].shape[0]
        self.vocab_size = params[f"{prefix}.out.b"].shape[0]

    def p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    @staticmethod
    def init_params(params: dict, prefix: str, cfg: DecoderConfig, vocab_size: int, memory_dim: int, rng) -> None:
        H, E, A, K = cfg.hidden, cfg.embed_dim, cfg.attention_dim, memory_dim

        def add(name, arr):
            params[f"{prefix}.{name}"] = Tensor(arr, requires_grad=True)

        dt = T.get_default_dtype()
        add("embed", init_uniform(rng, (vocab_size, E), 0.1))
        add("lstm.w", init_uniform(rng, (E + K + H, 4 * H)))
        bias = np.zeros(4 * H, dtype=dt)
        bias[H : 2 * H] = 1.0
        add("lstm.b", bias)
        add("att.w_q", init_uniform(rng, (H, A)))
        add("att.w_k", init_uniform(rng, (K, A)))
        add("att.v", init_uniform(rng, (A,), 1.0 / np.sqrt(A)))
        add("readout.w", init_uniform(rng, (H + K, H)))
        add("readout.b", np.zeros(H, dtype=dt))
        add("out.w", init_uniform(rng, (H, vocab_size)))
        add("out.b", np.zeros(vocab_size, dtype=dt))

    def memory(self, enc: Tensor, lengths: np.ndarray) -> Memory:
        return Memory(enc, T.matmul(enc, self.p("att.w_k")), lengths_to_mask(lengths, enc.shape[1]))

    def initial_state(self, batch: int) -> tuple[Tensor, Tensor, Tensor]:
        dt = T.get_default_dtype()
        return (
            Tensor(np.zeros((batch, self.hidden), dtype=dt)),
            Tensor(np.zeros((batch, self.hidden), dtype=dt)),
            Tensor(np.zeros((batch, self.memory_dim), dtype=dt)),
        )

    def step(self, emb: Tensor, state, memory: Memory):
        h, c, ctx = state
        h, c = lstm_step(T.concat([emb, ctx], axis=-1), h, c, self.p("lstm.w"), self.p("lstm.b"))
        ctx, _ = additive_attention(h, memory.keys, memory.values, self.p("att.w_q"), self.p("att.v"), memory.mask)
        readout = T.tanh(T.linear(T.concat([h, ctx], axis=-1), self.p("readout.w"), self.p("readout.b")))
        return readout, (h, c, ctx)

    def logits(self, readout: Tensor) -> Tensor:
        return T.linear(readout, self.p("out.w"), self.p("out.b"))

    def teacher_force(self, memory: Memory, tgt_in: np.ndarray, ctx: ForwardContext) -> Tensor:
        """Logits [B, I, V] for every input position of the framed target prefix."""
        B, steps = tgt_in.shape
        embs = ctx.drop(embed(tgt_in, self.p("embed")))
        state = self.initial_state(B)
        outs = []
        for i in range(steps):
            r, state = self.step(embs[:, i, :], state, memory)
            outs.append(r)
        return self.logits(T.stack(outs, axis=1))


def _target_split(tgt: np.ndarray, lengths: np.ndarray):
    tgt_in, tgt_out = tgt[:, :-1], tgt[:, 1:]
    mask = lengths_to_mask(lengths - 1, tgt_in.shape[1])
    return tgt_in, tgt_out, mask


# ---------------------------------------------------------------------------
# forward passes


def _speech_memory(model: ComponentGraph, batch: Batch, ctx: ForwardContext):
    if batch.frames is None or batch.frames.shape[1] == 0:
        raise ValueError("empty frames")
    frames = batch.frames
    if ctx.training and (ctx.time_masks or ctx.feat_masks):
        frames = frames.copy()
        for i, n in enumerate(batch.frame_lengths):
            frames[i, :n] = feature_mask(frames[i, :n], ctx.time_masks, ctx.feat_masks, ctx.mask_width, ctx.rng)
    enc, lengths = model.speech_encoder()(Tensor(frames), batch.frame_lengths)
    return ctx.drop(enc), lengths


def asr_forward(model: ComponentGraph, batch: Batch, ctx: ForwardContext | None = None):
    """Teacher-forced ASR pass.

    Returns the per-step posteriors over the source vocabulary (rows 0..J of
    each framed transcript: the J content tokens followed by EOS), the summed
    label-smoothed cross entropy and the number of predicted tokens.
    """
    ctx = ctx or ForwardContext()
    if batch.src is None or np.any(batch.src_lengths < 2):
        raise ValueError("empty transcript")
    enc, lengths = _speech_memory(model, batch, ctx)
    dec = model.asr_decoder()
    tgt_in, tgt_out, mask = _target_split(batch.src, batch.src_lengths)
    logits = dec.teacher_force(dec.memory(enc, lengths), tgt_in, ctx)
    loss = sequence_ce(logits, tgt_out, mask, ctx.label_smoothing)
    log_probs = T.log_softmax(logits, axis=-1)
    probs = T.exp(log_probs)
    post = PosteriorSequence(probs, model.source_vocab, batch.src_lengths - 1, log_probs)
    return post, loss, int(mask.sum())


def mt_encode(model: ComponentGraph, source, lengths: np.ndarray, ctx: ForwardContext, bridge: BridgeConfig | None = None):
    """Encode hard tokens [B, J] or a PosteriorSequence [B, J, V|F|]."""
    enc = model.text_encoder()
    if isinstance(source, PosteriorSequence):
        if source.width != enc.embedding.shape[0]:
            raise ValueError("bridge vocabulary mismatch")
        x = bridge_forward(source, bridge or BridgeConfig(), enc.embedding)
    else:
        source = np.asarray(source)
        if source.size == 0 or source.shape[-1] == 0:
            raise ValueError("empty source")
        x = embed(source, enc.embedding)
    if np.any(np.asarray(lengths) <= 0):
        raise ValueError("empty source")
    h, out_len = enc(x, lengths)
    return ctx.drop(h), out_len


def mt_forward(model, source, src_lengths, tgt, tgt_lengths, ctx: ForwardContext | None = None, bridge: BridgeConfig | None = None):
    """Teacher-forced MT loss (summed) and number of target tokens."""
    ctx = ctx or ForwardContext()
    if isinstance(source, PosteriorSequence) and source.vocab is not None and source.vocab != Vocabulary(model.arch["mt"]["src_vocab"]):
        raise ValueError("bridge vocabulary mismatch")
    enc, lengths = mt_encode(model, source, src_lengths, ctx, bridge)
    dec = model.mt_decoder()
    tgt_in, tgt_out, mask = _target_split(tgt, tgt_lengths)
    logits = dec.teacher_force(dec.memory(enc, lengths), tgt_in, ctx)
    return sequence_ce(logits, tgt_out, mask, ctx.label_smoothing), int(mask.sum())


def tight_forward(model: ComponentGraph, batch: Batch, ctx: ForwardContext | None = None):
    """ASR posteriors (teacher forced on the transcript) -> bridge -> MT loss."""
    ctx = ctx or ForwardContext()
    if batch.src is None:
        raise ValueError("tight training needs transcripts for teacher forcing")
    post, asr_loss, asr_n = asr_forward(model, batch, ctx)
    lengths = batch.src_lengths - 2
    width = int(lengths.max())
    rows = PosteriorSequence(post.probs[:, :width, :], post.vocab, lengths, post.log_probs[:, :width, :])
    bridge = model.bridge
    if model.kind == "cascade":
        bridge = BridgeConfig(mode="one_hot")
    gamma = bridge.train_gamma if ctx.gamma is None else ctx.gamma
    bridge = BridgeConfig(gamma=gamma, mode=bridge.mode, train_gamma=bridge.train_gamma, decode_gamma=bridge.decode_gamma)
    loss, n = mt_forward(model, rows, lengths, batch.tgt, batch.tgt_lengths, ctx, bridge)
    if ctx.aux_asr_weight > 0.0:
        # rescale so the auxiliary term is a per-token average like the main loss
        loss = loss + asr_loss * (ctx.aux_asr_weight * n / max(asr_n, 1))
    return loss, n


def direct_encode(model: ComponentGraph, frames: Tensor, lengths: np.ndarray, ctx: ForwardContext):
    enc, lengths = model.speech_encoder()(frames, lengths)
    enc = ctx.drop(enc)
    return T.linear(enc, model.params["direct.adapter.w"], model.params["direct.adapter.b"]), lengths


def direct_forward(model: ComponentGraph, batch: Batch, ctx: ForwardContext | None = None):
    ctx = ctx or ForwardContext()
    if batch.frames is None:
        raise ValueError("empty frames")
    enc, lengths = direct_encode(model, Tensor(batch.frames), batch.frame_lengths, ctx)
    dec = model.mt_decoder()
    tgt_in, tgt_out, mask = _target_split(batch.tgt, batch.tgt_lengths)
    logits = dec.teacher_force(dec.memory(enc, lengths), tgt_in, ctx)
    return sequence_ce(logits, tgt_out, mask, ctx.label_smoothing), int(mask.sum())


# ---------------------------------------------------------------------------
# construction


def new_asr(
    vocab: Vocabulary,
    input_dim: int,
    encoder: EncoderConfig | None = None,
    decoder: DecoderConfig | None = None,
    seed: int = 0,
    initial_layers: int | None = None,
) -> ComponentGraph:
    """Fresh ASR model.  `initial_layers` < encoder.num_layers starts a layer-wise schedule."""
    encoder = encoder or EncoderConfig()
    decoder = decoder or DecoderConfig()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    Encoder.init_params(params, "asr.encoder", encoder, input_dim, rng, num_layers=initial_layers)
    AttentionDecoder.init_params(params, "asr.decoder", decoder, len(vocab), 2 * encoder.hidden, rng)
    arch = {"asr": {"input_dim": input_dim, "encoder": encoder.to_dict(), "decoder": decoder.to_dict(), "vocab": list(vocab.symbols)}}
    return ComponentGraph("asr", params, arch)


def new_mt(
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    encoder: EncoderConfig | None = None,
    decoder: DecoderConfig | None = None,
    seed: int = 0,
    initial_layers: int | None = None,
) -> ComponentGraph:
    encoder = encoder or EncoderConfig(pool_factors=[])
    decoder = decoder or DecoderConfig()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    Encoder.init_params(params, "mt.encoder", encoder, encoder.embed_dim, rng, num_layers=initial_layers, vocab_size=len(src_vocab))
    AttentionDecoder.init_params(params, "mt.decoder", decoder, len(tgt_vocab), 2 * encoder.hidden, rng)
    arch = {
        "mt": {
            "encoder": encoder.to_dict(),
            "decoder": decoder.to_dict(),
            "src_vocab": list(src_vocab.symbols),
            "tgt_vocab": list(tgt_vocab.symbols),
        }
    }
    return ComponentGraph("mt", params, arch)


def _copy_params(model: ComponentGraph, prefixes: Sequence[str]) -> dict[str, Tensor]:
    return {
        n: Tensor(p.data.copy(), requires_grad=True)
        for n, p in model.params.items()
        if any(_matches(n, pre) for pre in prefixes)
    }


def build_cascade(asr: ComponentGraph, mt: ComponentGraph) -> ComponentGraph:
    """Concatenate pretrained ASR and MT; every tensor is carried over unchanged."""
    if asr.kind != "asr" or mt.kind != "mt":
        raise ValueError("build_cascade expects an asr and an mt model")
    if Vocabulary(asr.arch["asr"]["vocab"]) != Vocabulary(mt.arch["mt"]["src_vocab"]):
        raise ValueError("vocab mismatch: ASR output vocabulary must equal MT source vocabulary")
    params = _copy_params(asr, ["asr"])
    params.update(_copy_params(mt, ["mt"]))
    arch = {"asr": copy.deepcopy(asr.arch["asr"]), "mt": copy.deepcopy(mt.arch["mt"])}
    return ComponentGraph("cascade", params, arch)


def build_tight(cascade: ComponentGraph, bridge: BridgeConfig | None = None) -> ComponentGraph:
    """Collapse a cascade into one differentiable network (no parameter discarded)."""
    if cascade.kind not in ("cascade", "tight"):
        raise ValueError("build_tight expects a cascade model")
    bridge = bridge or BridgeConfig()
    params = _copy_params(cascade, ["asr", "mt"])
    arch = copy.deepcopy(cascade.arch)
    arch["bridge"] = bridge.to_dict()
    return ComponentGraph("tight", params, arch)


def build_direct(asr: ComponentGraph, mt: ComponentGraph, adapter_dim: int | None = None, seed: int = 0) -> ComponentGraph:
    """Speech encoder from ASR + fresh affine adapter + target decoder from MT.

    The ASR decoder and MT encoder are not part of the result.
    """
    a = asr.arch["asr"]
    m = mt.arch["mt"]
    in_dim = 2 * a["encoder"]["hidden"]
    out_dim = mt.params["mt.decoder.att.w_k"].shape[0]
    if adapter_dim is not None and adapter_dim != out_dim:
        raise ValueError(f"adapter_dim {adapter_dim} must equal the MT decoder memory size {out_dim}")
    params = _copy_params(asr, ["asr.encoder"])
    params.update(_copy_params(mt, ["mt.decoder"]))
    rng = np.random.default_rng(seed)
    params["direct.adapter.w"] = Tensor(init_uniform(rng, (in_dim, out_dim)), requires_grad=True)
    params["direct.adapter.b"] = Tensor(np.zeros(out_dim, dtype=T.get_default_dtype()), requires_grad=True)
    arch = {
        "asr": {"input_dim": a["input_dim"], "encoder": copy.deepcopy(a["encoder"]), "vocab": list(a["vocab"])},
        "mt": {"decoder": copy.deepcopy(m["decoder"]), "tgt_vocab": list(m["tgt_vocab"]), "src_vocab": list(m["src_vocab"])},
        "adapter": {"in_dim": in_dim, "out_dim": out_dim},
    }
    return ComponentGraph("direct", params, arch)


def apply_freeze(model: ComponentGraph, mask: FreezeMask | Sequence[str] | str | None) -> ComponentGraph:
    """Flag every tensor under one of the mask prefixes as frozen (in place)."""
    if not isinstance(mask, FreezeMask):
        mask = FreezeMask.parse(mask)
    for prefix in mask.frozen_prefixes:
        if not any(_matches(n, prefix) for n in model.params):
            raise ValueError(f"unknown freeze prefix {prefix!r}")
    model.freeze = {n: any(_matches(n, pre) for pre in mask.frozen_prefixes) for n in model.params}
    return model
