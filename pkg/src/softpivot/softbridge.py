"""Soft bridge between the two cascade halves.

Holds the per-position pivot distributions, the exponent re-normalisation
that sharpens them, inconsistency detection after beam search, and the
decode-time correction heuristics.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union

import numpy as np

from .autodiff import Tensor, _make

# Inconsistent rows with the generated token still at or below the best
# competitor after a literal edit get lifted above it by the mode's increment.
_INCREMENT = {"eq1": 1.0, "add1": 1.0, "add05": 0.5}


class CorrectionMode(str, enum.Enum):
    NONE = "none"
    EQ1 = "eq1"
    ADD1 = "add1"
    ADD05 = "add05"
    EXC = "exc"


@dataclass
class ProbDistSeq:
    """Generated pivot tokens with the full distribution seen at each step.

    Row ``t`` of ``dists`` is the distribution the token ``tokens[t]`` was
    chosen from.
    """

    tokens: np.ndarray
    dists: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.dists = np.asarray(self.dists, dtype=np.float64)
        if self.dists.ndim != 2 or len(self.tokens) != self.dists.shape[0]:
            raise ValueError(
                f"{len(self.tokens)} tokens but dists of shape {self.dists.shape}"
            )

    def __len__(self) -> int:
        return len(self.tokens)

    def check_stochastic(self, tol: float = 1e-6) -> None:
        if np.any(self.dists < 0):
            raise ValueError("negative probability")
        sums = self.dists.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > tol):
            raise ValueError(f"rows do not sum to 1: {sums}")


@dataclass(frozen=True)
class BridgeConfig:
    alpha_train: float = 1.0
    alpha_decode: float = 1.0
    correction: CorrectionMode = CorrectionMode.EQ1
    normalize_after_correction: bool = False

    def __post_init__(self):
        if self.alpha_train <= 0 or self.alpha_decode <= 0:
            raise ValueError("alpha must be strictly positive")
        object.__setattr__(self, "correction", CorrectionMode(self.correction))


def _renormalize_np(p: np.ndarray, alpha: float) -> np.ndarray:
    if np.any(p < 0):
        raise ValueError("renormalize: negative probability")
    m = p.max(axis=-1, keepdims=True)
    if np.any(m <= 0):
        raise ValueError("renormalize: all-zero row")
    q = (p / m) ** alpha
    return q / q.sum(axis=-1, keepdims=True)


def renormalize(dist: Union[np.ndarray, Tensor], alpha: float):
    """Raise each row to ``alpha`` and rescale to sum 1 (last axis).

    Rows are divided by their max before exponentiation so large ``alpha``
    cannot underflow the leading entry.  Accepts a Tensor, in which case the
    result is differentiable; zero entries get a zero gradient when
    ``alpha < 1``.
    """
    if not isinstance(dist, Tensor):
        return _renormalize_np(np.asarray(dist, dtype=np.float64), alpha)
    p = dist.data
    out = _renormalize_np(p, alpha)
    m = p.max(axis=-1, keepdims=True)
    q = p / m
    sq = (q**alpha).sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        dq = np.where(q > 0, q ** (alpha - 1), 0.0) if alpha < 1 else q ** (alpha - 1)
    scale = alpha * dq / (m * sq)

    def backward(g):
        return (scale * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (dist,), backward)


def detect_inconsistencies(seq: ProbDistSeq) -> list[int]:
    """Positions whose generated token is not the row argmax (lowest id wins ties)."""
    if len(seq) == 0:
        return []
    return np.flatnonzero(seq.dists.argmax(axis=1) != seq.tokens).tolist()


def correct(
    seq: ProbDistSeq,
    mode: Union[CorrectionMode, str],
    normalize: bool = False,
) -> ProbDistSeq:
    mode = CorrectionMode(mode)
    dists = seq.dists.copy()
    if mode is CorrectionMode.NONE:
        return ProbDistSeq(seq.tokens.copy(), dists)
    for t in detect_inconsistencies(seq):
        row, tok = dists[t], seq.tokens[t]
        best = int(row.argmax())
        if mode is CorrectionMode.EXC:
            row[tok], row[best] = row[best], row[tok]
            continue
        if mode is CorrectionMode.EQ1:
            row[tok] = 1.0
        else:
            row[tok] += _INCREMENT[mode.value]
        rival = np.delete(row, tok).max()
        if row[tok] <= rival:
            row[tok] = rival + _INCREMENT[mode.value]
        if normalize:
            row /= row.sum()
    return ProbDistSeq(seq.tokens.copy(), dists)


def bridge_weights(seq, cfg: BridgeConfig, phase: str = "train"):
    """Weights fed to the pivot-target encoder.

    ``phase="train"``: ``seq`` is a ProbDistSeq or a (differentiable) Tensor
    of rows; only the training exponent is applied.  ``phase="decode"``:
    ``seq`` must be a ProbDistSeq; rows are sharpened with the decoding
    exponent and then corrected.
    """
    if phase == "train":
        dists = seq.dists if isinstance(seq, ProbDistSeq) else seq
        return renormalize(dists, cfg.alpha_train)
    if phase != "decode":
        raise ValueError(f"unknown phase {phase!r}")
    sharpened = ProbDistSeq(seq.tokens, renormalize(seq.dists, cfg.alpha_decode))
    return correct(sharpened, cfg.correction, cfg.normalize_after_correction).dists


def dumps_probdist(seq: ProbDistSeq, threshold: float = 1e-6) -> str:
    lines = []
    for tok, row in zip(seq.tokens, seq.dists):
        pairs = " ".join(f"{i}:{float(row[i])!r}" for i in np.flatnonzero(row > threshold))
        lines.append(f"{int(tok)}\t{pairs}")
    return "".join(line + "\n" for line in lines)


def loads_probdist(text: str, vocab_size: int) -> ProbDistSeq:
    tokens, rows = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        tok, _, rest = line.partition("\t")
        row = np.zeros(vocab_size)
        for pair in rest.split():
            i, _, p = pair.partition(":")
            if not 0 <= int(i) < vocab_size:
                raise ValueError(f"line {lineno}: id {i} outside vocabulary of {vocab_size}")
            row[int(i)] = float(p)
        tokens.append(int(tok))
        rows.append(row)
    return ProbDistSeq(np.array(tokens, dtype=np.int64), np.array(rows).reshape(-1, vocab_size))
