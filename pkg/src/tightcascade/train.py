"""Adam, dev-perplexity learning-rate decay, layer-wise growth and the training loops.

A "checkpoint" is one pass over the training corpus.  After every checkpoint
the dev perplexity is measured; the learning rate is multiplied by
``lr_decay`` once the best dev perplexity has not improved for
``patience_checkpoints`` consecutive checkpoints, and the best-scoring
parameters are kept.
"""

from __future__ import annotations

import contextlib
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .metrics import perplexity
from .models import ComponentGraph, Example, ForwardContext, FreezeMask, apply_freeze, make_batch
from .nn import EncoderConfig, count_encoder_layers, init_encoder_layer
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_decay: float = 0.8
    patience_checkpoints: int = 6
    label_smoothing: float = 0.1
    dropout: float = 0.3
    max_seq_len: int = 75
    batch_size: int = 32
    seed: int = 0
    epochs: int = 10
    grad_clip: float = 5.0
    grow_every: int = 2
    finetune_lr: float = 5e-5
    finetune_label_smoothing: float = 0.0
    finetune_epochs: int = 4
    aux_asr_weight: float = 0.0
    time_masks: int = 0
    feat_masks: int = 0
    mask_width: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0.8 <= self.lr_decay <= 0.9:
            raise ValueError("lr_decay must lie in [0.8, 0.9]")
        if self.patience_checkpoints < 1:
            raise ValueError("patience_checkpoints must be >= 1")
        if not 1e-5 <= self.finetune_lr <= 8e-5:
            raise ValueError("finetune_lr must lie in [1e-5, 8e-5]")
        if self.finetune_label_smoothing != 0.0:
            raise ValueError("finetune_label_smoothing must be 0")
        if not 0.0 <= self.label_smoothing < 1.0 or not 0.0 <= self.dropout < 1.0:
            raise ValueError("label_smoothing and dropout must lie in [0, 1)")
        if min(self.batch_size, self.max_seq_len, self.grow_every) < 1 or self.epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("batch_size, max_seq_len and grow_every must be >= 1; epoch counts >= 0")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def parse_config(text: str, overrides: dict | None = None, base: TrainConfig | None = None) -> TrainConfig:
    """Parse flat ``key = value`` lines (``#`` starts a comment).

    Every key must be a TrainConfig field; `overrides` (e.g. from CLI flags)
    win over file values.
    """
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    values.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    kwargs = dataclasses.asdict(base) if base else {}
    for key, value in values.items():
        if key not in _FIELD_TYPES:
            raise ValueError(f"invalid config key {key!r}")
        kind = _FIELD_TYPES[key]
        try:
            kwargs[key] = int(value) if kind in ("int", int) else float(value)
        except ValueError:
            raise ValueError(f"invalid value {value!r} for config key {key!r}") from None
    return TrainConfig(**kwargs)


def load_config(path: str | os.PathLike | None, overrides: dict | None = None) -> TrainConfig:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    return parse_config(text, overrides)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState, lr: float, frozen: set[str] | frozenset = frozenset()) -> None:
    """One bias-corrected Adam update, in place.

    Names in `frozen` or missing from `grads` are left untouched.  Moment
    buffers are created lazily, so tensors added mid-training start fresh.
    """
    active = [n for n in params if n not in frozen and n in grads]
    for n in active:
        g = grads[n]
        if g.shape != params[n].data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {n} {params[n].data.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {n}")
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for n in active:
        g = grads[n]
        m = state.m.get(n)
        if m is None:
            m = state.m[n] = np.zeros_like(g)
            state.v[n] = np.zeros_like(g)
        v = state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[n].data = params[n].data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# learning-rate schedule


class PlateauScheduler:
    """Decays the learning rate after `patience` checkpoints without a new best."""

    def __init__(self, lr: float, decay: float, patience: int):
        self.lr = lr
        self.decay = decay
        self.patience = patience
        self.best = math.inf
        self.bad = 0

    def update(self, dev_perplexity: float) -> bool:
        """Record one checkpoint; return True when it is a new best."""
        if dev_perplexity < self.best:
            self.best = dev_perplexity
            self.bad = 0
            return True
        self.bad += 1
        if self.bad >= self.patience:
            self.lr *= self.decay
            self.bad = 0
        return False


def lr_schedule(history: Sequence[float], cfg: TrainConfig, lr: float | None = None) -> float:
    """Learning rate after replaying a dev-perplexity history from `lr` (default cfg.lr)."""
    if len(history) == 0:
        raise ValueError("empty perplexity history")
    sched = PlateauScheduler(cfg.lr if lr is None else lr, cfg.lr_decay, cfg.patience_checkpoints)
    for ppl in history:
        sched.update(ppl)
    return sched.lr


# ---------------------------------------------------------------------------
# layer-wise growth


def encoder_prefixes(model: ComponentGraph) -> list[tuple[str, EncoderConfig]]:
    out = []
    if "asr" in model.arch and "asr.encoder.layer0.fwd.w_x" in model.params:
        out.append(("asr.encoder", EncoderConfig(**model.arch["asr"]["encoder"])))
    if "mt" in model.arch and "encoder" in model.arch["mt"]:
        out.append(("mt.encoder", EncoderConfig(**model.arch["mt"]["encoder"])))
    return out


def layerwise_grow(model: ComponentGraph, prefix: str, rng: np.random.Generator) -> ComponentGraph:
    """Append one freshly initialized biLSTM layer to the encoder under `prefix`.

    Existing tensors are left untouched.  The target depth is the encoder
    config's ``num_layers``; growing beyond it is an error.
    """
    cfgs = dict(encoder_prefixes(model))
    if prefix not in cfgs:
        raise ValueError(f"no encoder {prefix!r} in model")
    cfg = cfgs[prefix]
    current = count_encoder_layers(model.params, prefix)
    if current >= cfg.num_layers:
        raise ValueError(f"cannot grow {prefix} beyond {cfg.num_layers} layers")
    before = set(model.params)
    init_encoder_layer(model.params, prefix, current, 2 * cfg.hidden, cfg.hidden, rng)
    for n in set(model.params) - before:
        model.freeze[n] = False
    return model


def growth_due(epoch: int, cfg: TrainConfig) -> bool:
    """Growth happens after every `grow_every` completed epochs."""
    return epoch > 0 and epoch % cfg.grow_every == 0


# ---------------------------------------------------------------------------
# batching


def _source_length(ex: Example) -> int:
    if ex.features is not None:
        return len(ex.features)
    return len(ex.transcript or ())


def filter_length(corpus: Sequence[Example], max_len: int) -> list[Example]:
    """Drop examples whose transcript or translation exceeds `max_len` tokens."""
    return [
        ex
        for ex in corpus
        if (ex.transcript is None or len(ex.transcript) <= max_len) and (ex.translation is None or len(ex.translation) <= max_len)
    ]


def bucket_batches(corpus: Sequence[Example], batch_size: int, rng: np.random.Generator | None = None) -> list[list[Example]]:
    """Batches of similar source length; batch order shuffled when `rng` is given."""
    order = sorted(range(len(corpus)), key=lambda i: (_source_length(corpus[i]), i))
    batches = [[corpus[i] for i in order[s : s + batch_size]] for s in range(0, len(order), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def _as_examples(corpus) -> list[Example]:
    return [c.to_example() if hasattr(c, "to_example") else c for c in corpus]


# ---------------------------------------------------------------------------
# loops


@contextlib.contextmanager
def _frozen_without_grad(model: ComponentGraph):
    """Frozen tensors do not need gradients; skipping them saves backward work."""
    saved = {n: p.requires_grad for n, p in model.params.items()}
    for n, p in model.params.items():
        p.requires_grad = not model.freeze.get(n, False)
    try:
        yield
    finally:
        for n, p in model.params.items():
            p.requires_grad = saved[n]


def train_step(model: ComponentGraph, batch, ctx: ForwardContext, opt: OptimizerState, lr: float, grad_clip: float) -> tuple[float, int]:
    """Forward, backward and one Adam update on the per-token mean loss."""
    model.zero_grad()
    loss, n = model.loss(batch, ctx)
    mean_loss = loss * (1.0 / max(n, 1))
    mean_loss.backward()
    grads = {name: p.grad for name, p in model.trainable() if p.grad is not None}
    clip_by_global_norm(grads, grad_clip)
    adam_step(model.params, grads, opt, lr)
    model.zero_grad()
    return float(loss.item()), n


@dataclass
class TrainResult:
    model: ComponentGraph
    history: list[dict] = field(default_factory=list)

    @property
    def dev_perplexities(self) -> list[float]:
        return [h["dev_ppl"] for h in self.history]


def run_training(
    model: ComponentGraph,
    train: Sequence,
    dev: Sequence,
    cfg: TrainConfig,
    *,
    lr: float,
    epochs: int,
    label_smoothing: float,
    grow: bool = False,
    checkpoint_path: str | os.PathLike | None = None,
    on_checkpoint: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Generic loop: one checkpoint per epoch, dev-perplexity LR decay, keep the best."""
    train = filter_length(_as_examples(train), cfg.max_seq_len)
    dev = _as_examples(dev)
    if not train:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState()
    sched = PlateauScheduler(lr, cfg.lr_decay, cfg.patience_checkpoints)
    ctx = ForwardContext(
        training=True,
        rng=rng,
        dropout=cfg.dropout,
        label_smoothing=label_smoothing,
        aux_asr_weight=cfg.aux_asr_weight,
        time_masks=cfg.time_masks,
        feat_masks=cfg.feat_masks,
        mask_width=cfg.mask_width,
    )
    result = TrainResult(model)
    best = model.snapshot() if dev else None
    best_ppl = perplexity(model, dev).value if dev else math.inf
    sched.best = best_ppl
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        with _frozen_without_grad(model):
            for batch in bucket_batches(train, cfg.batch_size, rng):
                loss, n = train_step(model, make_batch(batch), ctx, opt, sched.lr, cfg.grad_clip)
                total += loss
                count += n
        record = {"epoch": epoch, "lr": sched.lr, "train_loss": total / max(count, 1)}
        if dev:
            record["dev_ppl"] = perplexity(model, dev).value
            if sched.update(record["dev_ppl"]):
                best = model.snapshot()
                record["best"] = True
        if grow and growth_due(epoch, cfg):
            for prefix, enc_cfg in encoder_prefixes(model):
                if count_encoder_layers(model.params, prefix) < enc_cfg.num_layers:
                    layerwise_grow(model, prefix, rng)
                    record.setdefault("grew", []).append(prefix)
                    best = None  # the grown model is not comparable to older snapshots
                    sched.best = math.inf
        result.history.append(record)
        log.info("checkpoint %s", record)
        if on_checkpoint:
            on_checkpoint(record)
    if best is not None and set(best) == set(model.params):
        model.restore(best)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return result


def pretrain(model: ComponentGraph, train: Sequence, dev: Sequence, cfg: TrainConfig, **kwargs) -> TrainResult:
    """Stage 1: train a stand-alone ASR or MT model from scratch."""
    if model.kind not in ("asr", "mt"):
        raise ValueError("pretrain expects an asr or mt model")
    examples = _as_examples(train)
    if not examples:
        raise ValueError("empty corpus")
    if model.kind == "asr" and any(e.features is None or e.transcript is None for e in examples):
        raise ValueError("ASR pretraining needs features and transcripts")
    if model.kind == "mt" and any(e.transcript is None or e.translation is None for e in examples):
        raise ValueError("MT pretraining needs transcripts and translations")
    return run_training(model, examples, dev, cfg, lr=cfg.lr, epochs=cfg.epochs, label_smoothing=cfg.label_smoothing, grow=True, **kwargs)


def finetune_tight(tight: ComponentGraph, train: Sequence, dev: Sequence, mask: FreezeMask | str | None, cfg: TrainConfig, **kwargs) -> TrainResult:
    """Stage 4: end-to-end training on speech/translation pairs through the bridge.

    Posteriors are computed with teacher forcing on the gold transcript and
    sharpened with the bridge's train_gamma; the loss is target-side cross
    entropy (plus the optional auxiliary ASR term).
    """
    if tight.kind != "tight":
        raise ValueError("finetune_tight expects a tight model")
    examples = _as_examples(train)
    if not examples:
        raise ValueError("empty corpus")
    if any(e.transcript is None for e in examples):
        raise ValueError("corpus is missing transcripts needed for teacher forcing")
    if any(e.features is None or e.translation is None for e in examples):
        raise ValueError("fine-tuning needs features and translations")
    apply_freeze(tight, mask)
    return run_training(
        tight, examples, dev, cfg, lr=cfg.finetune_lr, epochs=cfg.finetune_epochs, label_smoothing=cfg.finetune_label_smoothing, **kwargs
    )


def train_direct(direct: ComponentGraph, train: Sequence, dev: Sequence, cfg: TrainConfig, **kwargs) -> TrainResult:
    """Train a direct model (pretrained speech encoder and target decoder, fresh adapter)."""
    if direct.kind != "direct":
        raise ValueError("train_direct expects a direct model")
    return run_training(direct, train, dev, cfg, lr=cfg.lr, epochs=cfg.finetune_epochs, label_smoothing=cfg.label_smoothing, **kwargs)
