"""Greedy and beam search that keep the full next-token distribution of every
chosen step, and two-stage (source -> pivot -> target) decoding over n pivot
and m target candidates.

Search runs over many inputs at once: a *model* here is anything with a
``prepare(srcs)`` method returning ``step(src_idx, prefixes) -> probs``
(see :meth:`softpivot.transformer.TransformerModel.prepare`).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import BOS, EOS
from .softbridge import BridgeConfig, ProbDistSeq, bridge_weights

StepFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class BeamConfig:
    beam_size: int = 5
    n_best: Optional[int] = None
    max_len: int = 15
    length_penalty: float = 1.0

    def __post_init__(self):
        if self.n_best is None:
            self.n_best = self.beam_size
        if self.beam_size < 1 or not 1 <= self.n_best <= self.beam_size:
            raise ValueError(f"need 1 <= n_best <= beam_size, got {self.n_best}, {self.beam_size}")
        if self.max_len < 1 or self.length_penalty < 0:
            raise ValueError("max_len must be >= 1 and length_penalty >= 0")


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    dists: np.ndarray
    finished: bool = True
    length_penalty: float = 1.0

    @property
    def truncated(self) -> bool:
        return not self.finished

    @property
    def norm_score(self) -> float:
        return self.score / max(len(self.tokens), 1) ** self.length_penalty

    @property
    def dist_seq(self) -> ProbDistSeq:
        return ProbDistSeq(np.asarray(self.tokens, dtype=np.int64), self.dists)

    def content(self) -> list[int]:
        """Tokens without the trailing EOS."""
        return self.tokens[:-1] if self.finished and self.tokens else list(self.tokens)


def _log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def search(step: StepFn, n_src: int, cfg: BeamConfig) -> list[list[Hypothesis]]:
    """Beam search for ``n_src`` inputs in lock-step.

    Each step scores ``beam_size`` live prefixes per input; among the top
    ``2 * beam_size`` expansions, EOS-terminated ones ranked within the first
    ``beam_size`` are finalised and the best ``beam_size`` others stay live.
    An input stops once ``beam_size`` hypotheses are final; at ``max_len``
    all live prefixes are finalised as truncated.  Returns ``n_best``
    hypotheses per input, best length-normalised score first.
    """
    k = cfg.beam_size
    lp = cfg.length_penalty
    live: list[list[tuple[list[int], float, list[np.ndarray]]]] = [[([], 0.0, [])] for _ in range(n_src)]
    final: list[list[Hypothesis]] = [[] for _ in range(n_src)]
    for t in range(cfg.max_len):
        active = [i for i in range(n_src) if live[i]]
        if not active:
            break
        src_idx = np.array([i for i in active for _ in live[i]], dtype=np.int64)
        prefixes = np.array([[BOS] + h[0] for i in active for h in live[i]], dtype=np.int64)
        probs = step(src_idx, prefixes)
        row = 0
        for i in active:
            hyps = live[i]
            block = probs[row : row + len(hyps)]
            row += len(hyps)
            scores = np.array([h[1] for h in hyps])[:, None] + _log(block)
            flat = scores.reshape(-1)
            order = np.argsort(-flat, kind="stable")[: 2 * k]
            V = block.shape[1]
            nxt = []
            for rank, c in enumerate(order):
                h, tok = divmod(int(c), V)
                toks, _, rows = hyps[h]
                item = (toks + [tok], float(flat[c]), rows + [block[h]])
                if tok == EOS:
                    if rank < k:
                        final[i].append(Hypothesis(item[0], item[1], np.array(item[2]), True, lp))
                elif len(nxt) < k:
                    nxt.append(item)
            live[i] = [] if len(final[i]) >= k else nxt
    for i in range(n_src):
        if len(final[i]) < k:
            final[i].extend(Hypothesis(toks, s, np.array(rows), False, lp) for toks, s, rows in live[i])
        final[i].sort(key=lambda h: -h.norm_score)
        final[i] = final[i][: cfg.n_best]
    return final


def greedy_search(step: StepFn, n_src: int, max_len: int) -> list[Hypothesis]:
    """Argmax at each step; the chosen token is always its row's argmax."""
    toks: list[list[int]] = [[] for _ in range(n_src)]
    scores = [0.0] * n_src
    rows: list[list[np.ndarray]] = [[] for _ in range(n_src)]
    done = [False] * n_src
    for _ in range(max_len):
        active = [i for i in range(n_src) if not done[i]]
        if not active:
            break
        probs = step(np.array(active, dtype=np.int64), np.array([[BOS] + toks[i] for i in active], dtype=np.int64))
        logp = _log(probs)
        for j, i in enumerate(active):
            tok = int(np.argmax(probs[j]))
            toks[i].append(tok)
            scores[i] = scores[i] + float(logp[j, tok])
            rows[i].append(probs[j])
            done[i] = tok == EOS
    return [Hypothesis(toks[i], scores[i], np.array(rows[i]), done[i]) for i in range(n_src)]


def _max_len(model, max_len: Optional[int]) -> int:
    if max_len is not None:
        return max_len
    return model.config.max_len - 1 if hasattr(model, "config") else 15


def greedy_decode_batch(model, srcs: Sequence, max_len: Optional[int] = None) -> list[Hypothesis]:
    return greedy_search(model.prepare(srcs), len(srcs), _max_len(model, max_len))


def greedy_decode(model, src, max_len: Optional[int] = None) -> Hypothesis:
    return greedy_decode_batch(model, [src], max_len)[0]


def beam_search_batch(model, srcs: Sequence, cfg: BeamConfig) -> list[list[Hypothesis]]:
    if not srcs:
        return []
    return search(model.prepare(srcs), len(srcs), cfg)


def beam_search(model, src, cfg: BeamConfig) -> list[Hypothesis]:
    return beam_search_batch(model, [src], cfg)[0]


# ----------------------------------------------------------------------
# two-stage decoding


@dataclass
class Candidate:
    pivot: Hypothesis
    target: Hypothesis
    score: float


@dataclass
class CascadeResult:
    best: Candidate
    candidates: list[Candidate] = field(default_factory=list)


def select_score(pivot: Hypothesis, target: Hypothesis, rule: str = "combined") -> float:
    if rule == "combined":
        return pivot.norm_score + target.norm_score
    if rule == "target":
        return target.norm_score
    raise ValueError(f"unknown selection rule {rule!r}")


def _two_stage(sp, pt, srcs, pivot_cfg, n_pivot, target_cfg, m_target, to_input, rule):
    if not 1 <= n_pivot <= pivot_cfg.beam_size:
        raise ValueError(f"n_pivot={n_pivot} outside [1, {pivot_cfg.beam_size}]")
    if not 1 <= m_target <= target_cfg.beam_size:
        raise ValueError(f"m_target={m_target} outside [1, {target_cfg.beam_size}]")
    if not srcs:
        return []
    pivots = beam_search_batch(sp, srcs, BeamConfig(pivot_cfg.beam_size, n_pivot, pivot_cfg.max_len, pivot_cfg.length_penalty))
    flat = [(i, p) for i, hyps in enumerate(pivots) for p in hyps]
    targets = beam_search_batch(
        pt,
        [to_input(p) for _, p in flat],
        BeamConfig(target_cfg.beam_size, m_target, target_cfg.max_len, target_cfg.length_penalty),
    )
    grouped: list[list[Candidate]] = [[] for _ in srcs]
    for (i, p), ts in zip(flat, targets):
        grouped[i].extend(Candidate(p, t, select_score(p, t, rule)) for t in ts)
    results = []
    for cands in grouped:
        best = max(cands, key=lambda c: c.score)
        results.append(CascadeResult(best, cands))
    return results


def cascade_decode_batch(
    cm,
    srcs: Sequence,
    pivot_cfg: BeamConfig,
    n_pivot: int,
    target_cfg: BeamConfig,
    m_target: int,
    bridge: Optional[BridgeConfig] = None,
    rule: str = "combined",
) -> list[CascadeResult]:
    """Soft cascade: each of the top ``n_pivot`` pivots is bridged (sharpened and
    corrected) and translated into ``m_target`` targets; the best of the
    ``n*m`` candidates wins under ``rule``."""
    bridge = bridge or cm.bridge

    def to_input(p: Hypothesis) -> np.ndarray:
        return np.asarray(bridge_weights(p.dist_seq, bridge, "decode"), dtype=np.float64)

    return _two_stage(cm.sp, cm.pt, srcs, pivot_cfg, n_pivot, target_cfg, m_target, to_input, rule)


def cascade_decode(cm, src, pivot_cfg, n_pivot, target_cfg, m_target, bridge=None, rule="combined") -> CascadeResult:
    return cascade_decode_batch(cm, [src], pivot_cfg, n_pivot, target_cfg, m_target, bridge, rule)[0]


def hard_cascade_decode_batch(
    sp, pt, srcs, pivot_cfg, n_pivot, target_cfg, m_target, rule: str = "combined"
) -> list[CascadeResult]:
    """Classic pivot translation: pivot tokens (with EOS) are fed as ids."""
    return _two_stage(sp, pt, srcs, pivot_cfg, n_pivot, target_cfg, m_target, lambda p: list(p.tokens), rule)


def write_decode_output(path, results: Sequence[CascadeResult], detok, with_candidates: bool = False) -> None:
    """One JSON object per line: selected target, its score, optional candidates.

    ``detok`` is a pair ``(pivot_vocab, target_vocab)`` used to render ids.
    """
    piv_vocab, tgt_vocab = detok
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for i, r in enumerate(results):
            rec = {"id": i, "target": tgt_vocab.decode(r.best.target.tokens), "score": r.best.score}
            if with_candidates:
                rec["candidates"] = [
                    {
                        "pivot": piv_vocab.decode(c.pivot.tokens),
                        "pivot_score": c.pivot.norm_score,
                        "target": tgt_vocab.decode(c.target.tokens),
                        "target_score": c.target.norm_score,
                        "score": c.score,
                    }
                    for c in r.candidates
                ]
            f.write(json.dumps(rec) + "\n")


def read_decode_output(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
