"""Vocabularies, plain-text corpora, token batching and the synthetic task."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")


class Vocab:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, tok: str) -> int:
        if tok not in self.stoi:
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        return self.stoi[tok]

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, sentence: str) -> list[int]:
        return [self.stoi.get(t, UNK) for t in sentence.split()]

    def decode(self, ids: Iterable[int]) -> str:
        """Ids to text; stops at EOS and drops PAD/BOS."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return " ".join(out)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for tok in self.itos[len(RESERVED):]:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return cls(line.rstrip("\n") for line in f if line.strip())


def build_vocab(corpora: Iterable[Iterable[str]]) -> Vocab:
    """Reserved ids first, then whitespace tokens in first-seen order."""
    vocab = Vocab()
    for sentences in corpora:
        for s in sentences:
            for tok in s.split():
                vocab.add(tok)
    if len(vocab) == len(RESERVED):
        raise ValueError("build_vocab: no tokens")
    return vocab


@dataclass
class ParallelCorpus:
    src: list[str]
    tgt: list[str]

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise ValueError(f"{len(self.src)} source vs {len(self.tgt)} target sentences")
        for i, (s, t) in enumerate(zip(self.src, self.tgt), 1):
            if not s.split() or not t.split():
                raise ValueError(f"pair {i}: empty side")

    def __len__(self) -> int:
        return len(self.src)


@dataclass
class TrilingualCorpus:
    src: list[str]
    piv: list[str]
    tgt: list[str]

    def __post_init__(self):
        if not len(self.src) == len(self.piv) == len(self.tgt):
            raise ValueError("trilingual sides differ in length")

    def __len__(self) -> int:
        return len(self.src)


def _read_lines(path: Path) -> list[str]:
    with open(path, encoding="utf-8", newline="\n") as f:
        return [line.rstrip("\n") for line in f]


def read_corpus(prefix):
    """Read ``prefix.src``/``prefix.tgt`` (and ``prefix.piv`` when present)."""
    prefix = Path(prefix)
    sides = {ext: _read_lines(prefix.with_name(prefix.name + "." + ext)) for ext in ("src", "tgt")}
    piv_path = prefix.with_name(prefix.name + ".piv")
    if piv_path.exists():
        sides["piv"] = _read_lines(piv_path)
    n = min(len(v) for v in sides.values())
    if any(len(v) != n for v in sides.values()):
        counts = ", ".join(f"{k}={len(v)}" for k, v in sides.items())
        raise ValueError(f"{prefix}: line {n + 1}: line counts differ ({counts})")
    for ext, lines in sides.items():
        for i, line in enumerate(lines, 1):
            if not line.split():
                raise ValueError(f"{prefix}.{ext}: line {i}: empty sentence")
    if "piv" in sides:
        return TrilingualCorpus(sides["src"], sides["piv"], sides["tgt"])
    return ParallelCorpus(sides["src"], sides["tgt"])


def write_corpus(prefix, corpus) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    sides = {"src": corpus.src, "tgt": corpus.tgt}
    if isinstance(corpus, TrilingualCorpus):
        sides["piv"] = corpus.piv
    for ext, lines in sides.items():
        with open(prefix.with_name(prefix.name + "." + ext), "w", encoding="utf-8", newline="\n") as f:
            f.writelines(line + "\n" for line in lines)


# ----------------------------------------------------------------------
# batching


@dataclass
class Batch:
    indices: np.ndarray
    fields: list[np.ndarray]  # one [n, L_field] PAD-padded array per example field

    def __len__(self) -> int:
        return len(self.indices)


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> np.ndarray:
    width = max((len(s) for s in seqs), default=0)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def batch_iter(
    examples: Sequence[Sequence[Sequence[int]]],
    max_tokens: int,
    seed: int,
    epoch: int = 0,
) -> Iterator[Batch]:
    """One epoch of length-bucketed, padded batches.

    ``examples[i]`` is a tuple of id sequences (e.g. encoder input, decoder
    input, decoder output).  A batch holds at most ``max_tokens`` padded
    positions, measured on its longest field.  Batch order is shuffled with
    ``(seed, epoch)``; every example appears exactly once.
    """
    lengths = np.array([max(len(f) for f in ex) for ex in examples], dtype=np.int64)
    too_long = np.flatnonzero(lengths > max_tokens)
    if too_long.size:
        i = int(too_long[0])
        raise ValueError(f"example {i} has {lengths[i]} tokens > max_tokens={max_tokens}: {examples[i]}")
    rng = np.random.default_rng([seed, epoch])
    order = np.lexsort((rng.random(len(examples)), lengths))
    batches: list[list[int]] = []
    cur: list[int] = []
    width = 0
    for i in order:
        w = max(width, int(lengths[i]))
        if cur and w * (len(cur) + 1) > max_tokens:
            batches.append(cur)
            cur, w = [], int(lengths[i])
        cur.append(int(i))
        width = w
    if cur:
        batches.append(cur)
    for b in rng.permutation(len(batches)):
        idx = np.array(batches[b], dtype=np.int64)
        n_fields = len(examples[idx[0]])
        yield Batch(idx, [pad_batch([examples[i][k] for i in idx]) for k in range(n_fields)])


# ----------------------------------------------------------------------
# synthetic trilingual task


@dataclass
class SyntheticTaskSpec:
    """Latent id sequences rendered into three toy languages.

    Source token ``s{v}``, pivot token ``p{(v+shift_sp) % V}``, target token
    ``t{(v+shift_pt) % V}`` with the target sentence optionally reversed.
    """

    latent_vocab_size: int = 20
    min_len: int = 3
    max_len: int = 12
    shift_sp: int = 3
    shift_pt: int = 7
    target_transform: str = "reverse"
    size_sp: int = 20000
    size_pt: int = 20000
    size_st: int = 800
    size_dev: int = 200
    size_test: int = 500
    seed: int = 13

    def __post_init__(self):
        if self.latent_vocab_size < 4:
            raise ValueError("latent_vocab_size must be >= 4")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"bad length range [{self.min_len}, {self.max_len}]")
        if self.target_transform not in ("identity", "reverse"):
            raise ValueError(f"unknown target_transform {self.target_transform!r}")

    def check_model_len(self, model_max_len: int) -> None:
        if self.max_len > model_max_len - 2:
            raise ValueError(f"sentences up to {self.max_len} need model max_len >= {self.max_len + 2}")


@dataclass
class SyntheticTask:
    spec: SyntheticTaskSpec
    sp: ParallelCorpus  # (source, pivot)
    pt: ParallelCorpus  # (pivot, target)
    st: ParallelCorpus  # small (source, target)
    dev: ParallelCorpus
    test: ParallelCorpus
    corpora: dict = field(init=False)

    def __post_init__(self):
        self.corpora = {"sp": self.sp, "pt": self.pt, "st": self.st, "dev": self.dev, "test": self.test}

    def _latent(self, sentence: str, prefix: str, shift: int) -> list[int]:
        V = self.spec.latent_vocab_size
        return [(int(tok[len(prefix):]) - shift) % V for tok in sentence.split()]

    def oracle_sp(self, src: str) -> str:
        return render_pivot(self._latent(src, "s", 0), self.spec)

    def oracle_pt(self, piv: str) -> str:
        return render_target(self._latent(piv, "p", self.spec.shift_sp), self.spec)

    def oracle_st(self, src: str) -> str:
        return render_target(self._latent(src, "s", 0), self.spec)


def render_source(v: Sequence[int], spec: SyntheticTaskSpec) -> str:
    return " ".join(f"s{x}" for x in v)


def render_pivot(v: Sequence[int], spec: SyntheticTaskSpec) -> str:
    V = spec.latent_vocab_size
    return " ".join(f"p{(x + spec.shift_sp) % V}" for x in v)


def render_target(v: Sequence[int], spec: SyntheticTaskSpec) -> str:
    V = spec.latent_vocab_size
    toks = [f"t{(x + spec.shift_pt) % V}" for x in v]
    if spec.target_transform == "reverse":
        toks.reverse()
    return " ".join(toks)


def _latents(rng: np.random.Generator, n: int, spec: SyntheticTaskSpec) -> list[list[int]]:
    lens = rng.integers(spec.min_len, spec.max_len + 1, size=n)
    return [rng.integers(0, spec.latent_vocab_size, size=k).tolist() for k in lens]


def generate_synthetic(spec: Optional[SyntheticTaskSpec] = None) -> SyntheticTask:
    """Deterministic corpora for the three language pairs plus held-out sets.

    Each corpus draws from its own child of ``SeedSequence(spec.seed)``, so
    changing one corpus size leaves the others untouched.
    """
    spec = spec or SyntheticTaskSpec()
    children = np.random.SeedSequence(spec.seed).spawn(5)
    sizes = (spec.size_sp, spec.size_pt, spec.size_st, spec.size_dev, spec.size_test)
    latents = [_latents(np.random.default_rng(c), n, spec) for c, n in zip(children, sizes)]
    sp, pt, st, dev, test = latents
    return SyntheticTask(
        spec,
        sp=ParallelCorpus([render_source(v, spec) for v in sp], [render_pivot(v, spec) for v in sp]),
        pt=ParallelCorpus([render_pivot(v, spec) for v in pt], [render_target(v, spec) for v in pt]),
        st=ParallelCorpus([render_source(v, spec) for v in st], [render_target(v, spec) for v in st]),
        dev=ParallelCorpus([render_source(v, spec) for v in dev], [render_target(v, spec) for v in dev]),
        test=ParallelCorpus([render_source(v, spec) for v in test], [render_target(v, spec) for v in test]),
    )
