"""WER, BLEU, a simplified TER and perplexity on token-id sequences."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Sequence

Seq = Sequence[Hashable]


@dataclass
class ScoreReport:
    metric: str
    value: float
    counts: dict = field(default_factory=dict)

    def to_line(self) -> str:
        """One line of structured text: name, value, then key=value components."""
        parts = [self.metric, f"{self.value:.6f}"]
        parts += [f"{k}={_fmt(v)}" for k, v in self.counts.items()]
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "ScoreReport":
        head = line.split()
        counts = {}
        for item in head[2:]:
            k, v = item.split("=", 1)
            counts[k] = _parse(v)
        return cls(head[0], float(head[1]), counts)


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(v: str):
    if "," in v:
        return [_parse(x) for x in v.split(",")]
    try:
        return int(v)
    except ValueError:
        return float(v)


def edit_distance(ref: Seq, hyp: Seq) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j - 1] + (r != h), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def wer(refs: Sequence[Seq], hyps: Sequence[Seq]) -> ScoreReport:
    if len(refs) != len(hyps):
        raise ValueError("reference and hypothesis lists differ in length")
    edits = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    ref_len = sum(len(r) for r in refs)
    value = edits / ref_len if ref_len else float(edits > 0)
    return ScoreReport("wer", value, {"edits": edits, "ref_len": ref_len})


def _ngrams(seq: Seq, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu(refs: Sequence[Seq], hyps: Sequence[Seq], max_n: int = 4) -> ScoreReport:
    """Corpus BLEU with clipped counts and brevity penalty, no smoothing.

    Any order with zero matches (including orders with no candidate n-grams)
    makes the score 0.
    """
    if len(refs) != len(hyps):
        raise ValueError("reference and hypothesis lists differ in length")
    if not refs:
        raise ValueError("empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for r, h in zip(refs, hyps):
        r, h = list(r), list(h)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    counts = {"matches": matches, "totals": totals, "hyp_len": hyp_len, "ref_len": ref_len}
    if min(matches) == 0:
        return ScoreReport("bleu", 0.0, counts | {"bp": _bp(hyp_len, ref_len)})
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = _bp(hyp_len, ref_len)
    return ScoreReport("bleu", bp * math.exp(log_p), counts | {"bp": bp})


def _bp(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    return 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)


def _shift(seq: list, start: int, length: int, dest: int) -> list:
    block = seq[start : start + length]
    rest = seq[:start] + seq[start + length :]
    return rest[:dest] + block + rest[dest:]


def _best_shift(ref: list, hyp: list, current: int):
    """The block shift of `hyp` that lowers edit distance the most (None if none does)."""
    ref_phrases = {tuple(ref[i : i + n]) for n in range(1, len(ref) + 1) for i in range(len(ref) - n + 1)}
    best = None
    best_cost = current
    for length in range(1, len(hyp)):
        for start in range(len(hyp) - length + 1):
            if tuple(hyp[start : start + length]) not in ref_phrases:
                continue
            for dest in range(len(hyp) - length + 1):
                if dest == start:
                    continue
                cand = _shift(hyp, start, length, dest)
                cost = edit_distance(ref, cand)
                if cost < best_cost:
                    best, best_cost = cand, cost
    return best, best_cost


def ter_pair(ref: Seq, hyp: Seq) -> tuple[int, int]:
    """(shifts, remaining edits) after greedy block shifting."""
    ref, hyp = list(ref), list(hyp)
    edits = edit_distance(ref, hyp)
    shifts = 0
    while edits > 0:
        cand, cost = _best_shift(ref, hyp, edits)
        if cand is None:
            break
        hyp, edits = cand, cost
        shifts += 1
    return shifts, edits


def ter_simplified(refs: Sequence[Seq], hyps: Sequence[Seq]) -> ScoreReport:
    """Edits plus greedy block shifts over reference length.

    Candidate blocks are hypothesis phrases that also occur in the reference;
    each applied shift must strictly reduce the edit distance and costs 1.
    This is a tercom-style heuristic, not a bit-compatible reimplementation.
    """
    if len(refs) != len(hyps):
        raise ValueError("reference and hypothesis lists differ in length")
    shifts = edits = 0
    for r, h in zip(refs, hyps):
        s, e = ter_pair(r, h)
        shifts += s
        edits += e
    ref_len = sum(len(r) for r in refs)
    value = (shifts + edits) / ref_len if ref_len else float(shifts + edits > 0)
    return ScoreReport("ter", value, {"shifts": shifts, "edits": edits, "ref_len": ref_len})


def perplexity_from_nll(total_nll: float, n_tokens: int) -> ScoreReport:
    if n_tokens <= 0:
        raise ValueError("empty corpus")
    return ScoreReport("ppl", math.exp(total_nll / n_tokens), {"nll": total_nll, "tokens": n_tokens})


def perplexity(model, corpus, batch_size: int = 64, **kwargs) -> ScoreReport:
    """exp(total unsmoothed cross entropy / total target tokens).

    `model` needs ``nll(batch, **kwargs) -> (total_nll, n_tokens)``; `corpus`
    is a sequence of examples accepted by `models.make_batch`.
    """
    from .models import make_batch

    if len(corpus) == 0:
        raise ValueError("empty corpus")
    total, count = 0.0, 0
    for i in range(0, len(corpus), batch_size):
        nll, n = model.nll(make_batch(corpus[i : i + batch_size]), **kwargs)
        total += nll
        count += n
    return perplexity_from_nll(total, count)
