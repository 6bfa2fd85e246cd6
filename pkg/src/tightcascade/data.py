"""Synthetic speech-translation triples.

Each source symbol owns a fixed random feature signature.  An utterance is
rendered by repeating every symbol's signature a random number of frames and
adding Gaussian noise; the translation is a fixed symbol permutation of the
transcript (optionally reversed).  Raising the noise level produces ASR
errors, which then propagate into the translation.
"""

from __future__ import annotations

import json
import os
import string
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import atomic_write_bytes
from .models import Example
from .nn import RESERVED, Vocabulary

TARGET_RULES = ("cipher", "cipher_reverse")
CORPUS_HEADER = "#tightcascade-corpus v1"


@dataclass
class SyntheticTaskSpec:
    vocab_size: int = 30  # including the 4 reserved symbols
    feature_dim: int = 16
    frames_per_token: tuple[int, int] = (2, 5)
    noise_sigma: float = 1.0
    min_len: int = 3
    max_len: int = 12
    target_rule: str = "cipher_reverse"
    seed: int = 0
    signatures: list | None = field(default=None, repr=False)
    permutation: list | None = None

    def __post_init__(self):
        if self.vocab_size < 5:
            raise ValueError("vocab_size must be >= 5")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.target_rule not in TARGET_RULES:
            raise ValueError(f"unknown target rule {self.target_rule!r}")
        lo, hi = self.frames_per_token
        self.frames_per_token = (int(lo), int(hi))
        if not 1 <= lo <= hi:
            raise ValueError("frames_per_token must be a range with 1 <= lo <= hi")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        n = self.num_symbols
        rng = np.random.default_rng([self.seed, 0xACE])
        if self.signatures is None:
            self.signatures = rng.standard_normal((n, self.feature_dim)).tolist()
        if self.permutation is None:
            self.permutation = rng.permutation(n).tolist()

    @property
    def num_symbols(self) -> int:
        return self.vocab_size - len(RESERVED)

    @property
    def signature_array(self) -> np.ndarray:
        return np.asarray(self.signatures, dtype=np.float64)

    def source_vocab(self) -> Vocabulary:
        return Vocabulary(list(RESERVED) + _symbols(self.num_symbols, lower=True))

    def target_vocab(self) -> Vocabulary:
        return Vocabulary(list(RESERVED) + _symbols(self.num_symbols, lower=False))

    def translate(self, transcript: Sequence[int]) -> list[int]:
        """Apply the target rule to content ids (ids include the reserved offset)."""
        off = len(RESERVED)
        mapped = [self.permutation[t - off] + off for t in transcript]
        return mapped[::-1] if self.target_rule == "cipher_reverse" else mapped

    def to_json(self) -> str:
        d = asdict(self)
        d["frames_per_token"] = list(self.frames_per_token)
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticTaskSpec":
        d = json.loads(text)
        d["frames_per_token"] = tuple(d["frames_per_token"])
        return cls(**d)


def _symbols(n: int, lower: bool) -> list[str]:
    letters = string.ascii_lowercase if lower else string.ascii_uppercase
    if n <= len(letters):
        return list(letters[:n])
    return [("f" if lower else "E") + str(i) for i in range(n)]


@dataclass
class CorpusTriple:
    uid: str
    features: np.ndarray | None
    transcript: list[int] | None
    translation: list[int] | None = None

    def to_example(self) -> Example:
        return Example(self.features, self.transcript, self.translation, self.uid)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CorpusTriple):
            return NotImplemented
        if (self.features is None) != (other.features is None):
            return False
        same_feats = self.features is None or (
            self.features.shape == other.features.shape and self.features.tobytes() == other.features.tobytes()
        )
        return (
            self.uid == other.uid
            and same_feats
            and self.transcript == other.transcript
            and self.translation == other.translation
        )


def render_features(transcript: Sequence[int], spec: SyntheticTaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Repeat each symbol's signature uniform(frames_per_token) times and add noise."""
    if len(transcript) == 0:
        raise ValueError("cannot render an empty transcript")
    sig = spec.signature_array
    lo, hi = spec.frames_per_token
    off = len(RESERVED)
    reps = rng.integers(lo, hi + 1, size=len(transcript))
    frames = np.repeat(sig[np.asarray(transcript) - off], reps, axis=0)
    if spec.noise_sigma > 0:
        frames = frames + rng.normal(0.0, spec.noise_sigma, size=frames.shape)
    return frames


def gen_corpus(spec: SyntheticTaskSpec, n: int, prefix: str = "utt", stream: int = 0, with_features: bool = True) -> list[CorpusTriple]:
    """`n` triples; utterance i uses its own seed derived from (spec.seed, stream, i)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    off = len(RESERVED)
    out = []
    for i in range(n):
        rng = np.random.default_rng([spec.seed, stream, i])
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        transcript = (rng.integers(0, spec.num_symbols, size=length) + off).tolist()
        feats = render_features(transcript, spec, rng) if with_features else None
        out.append(CorpusTriple(f"{prefix}{i:06d}", feats, transcript, spec.translate(transcript)))
    return out


def split(corpus: Sequence, fractions: Sequence[float], seed: int = 0) -> tuple[list, ...]:
    """Disjoint, exhaustive, seeded random split."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    perm = np.random.default_rng(seed).permutation(len(corpus))
    sizes = [int(round(f * len(corpus))) for f in fractions[:-1]]
    sizes.append(len(corpus) - sum(sizes))
    if sizes[-1] < 0:
        raise ValueError("split fractions produce a negative part")
    parts, start = [], 0
    for s in sizes:
        parts.append([corpus[i] for i in sorted(perm[start : start + s])])
        start += s
    return tuple(parts)


# ---------------------------------------------------------------------------
# corpus files
#
# <name>.txt: header line, then one record per line with TAB-separated fields
#     uid  feature_ref  transcript  [translation]
# feature_ref is "<blob file>@<byte offset>" or "-" when absent; token fields
# are space-separated symbols (an empty transcript field means none).
# <name>.bin: concatenated blobs, each: uint32 T, uint32 d, T*d float64 (<f8).


def write_corpus(path: str | os.PathLike, corpus: Sequence[CorpusTriple], src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> None:
    path = Path(path)
    blob_name = path.with_suffix(".bin").name
    blob = bytearray()
    lines = [CORPUS_HEADER]
    for c in corpus:
        if c.features is not None:
            ref = f"{blob_name}@{len(blob)}"
            T_, d = c.features.shape
            blob += struct.pack("<II", T_, d)
            blob += np.ascontiguousarray(c.features, dtype="<f8").tobytes()
        else:
            ref = "-"
        fields = [c.uid, ref, " ".join(src_vocab.decode(c.transcript)) if c.transcript is not None else "-"]
        if c.translation is not None:
            fields.append(" ".join(tgt_vocab.decode(c.translation)))
        lines.append("\t".join(fields))
    atomic_write_bytes(path.with_suffix(".bin"), bytes(blob))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_corpus(path: str | os.PathLike, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> list[CorpusTriple]:
    path = Path(path)
    text = path.read_text(encoding="utf-8").splitlines()
    if not text or text[0] != CORPUS_HEADER:
        raise ValueError(f"{path}:1: missing corpus header")
    blobs: dict[str, bytes] = {}
    out = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) not in (3, 4):
            raise ValueError(f"{path}:{lineno}: malformed record (expected 3 or 4 fields, got {len(fields)})")
        uid, ref, src = fields[:3]
        feats = None
        if ref != "-":
            try:
                name, offset = ref.rsplit("@", 1)
                offset = int(offset)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed feature reference {ref!r}") from None
            if name not in blobs:
                blobs[name] = (path.parent / name).read_bytes()
            feats = _read_blob(blobs[name], offset, uid)
        transcript = None if src == "-" else _encode(src, src_vocab, path, lineno)
        translation = _encode(fields[3], tgt_vocab, path, lineno) if len(fields) == 4 else None
        out.append(CorpusTriple(uid, feats, transcript, translation))
    return out


def _encode(text: str, vocab: Vocabulary, path, lineno) -> list[int]:
    words = text.split()
    unknown = [w for w in words if w not in vocab.ids]
    if unknown:
        raise ValueError(f"{path}:{lineno}: unknown symbol {unknown[0]!r}")
    return vocab.encode(words)


def _read_blob(blob: bytes, offset: int, uid: str) -> np.ndarray:
    if offset + 8 > len(blob):
        raise ValueError(f"truncated feature blob for utterance {uid}")
    T_, d = struct.unpack_from("<II", blob, offset)
    end = offset + 8 + 8 * T_ * d
    if end > len(blob):
        raise ValueError(f"truncated feature blob for utterance {uid}")
    return np.frombuffer(blob[offset + 8 : end], dtype="<f8").astype(np.float64).reshape(T_, d)


def save_task(path: str | os.PathLike, spec: SyntheticTaskSpec) -> None:
    atomic_write_bytes(path, spec.to_json().encode("utf-8"))


def load_task(path: str | os.PathLike) -> SyntheticTaskSpec:
    return SyntheticTaskSpec.from_json(Path(path).read_text(encoding="utf-8"))


def nearest_signature_decode(frames: np.ndarray, spec: SyntheticTaskSpec) -> list[int]:
    """Label each frame with its nearest signature and collapse runs.

    Only exact for noiseless frames without adjacent repeated symbols (a run
    of one symbol is indistinguishable from two adjacent copies).
    """
    sig = spec.signature_array
    d = ((frames[:, None, :] - sig[None]) ** 2).sum(-1)
    labels = d.argmin(axis=1) + len(RESERVED)
    out = [int(labels[0])]
    for lab in labels[1:]:
        if lab != out[-1]:
            out.append(int(lab))
    return out
