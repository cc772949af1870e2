"""Tiny pre-norm encoder-decoder transformer on top of :mod:`softpivot.autodiff`.

The encoder takes either token ids or per-position weight rows over the
source vocabulary; in the latter case the input embedding at each position
is the weighted sum of embedding rows.  All activations carry a leading
batch axis, single sequences use a batch of one.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BOS, EOS, PAD, pad_batch


@dataclass
class TransformerConfig:
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 128
    src_vocab_size: int = 32
    tgt_vocab_size: int = 32
    max_len: int = 16
    dropout_rate: float = 0.1
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if min(self.num_layers, self.d_model, self.d_ff, self.max_len) < 1:
            raise ValueError("sizes must be positive")


@dataclass
class EncoderOutput:
    states: Tensor  # [B, L, d_model]
    mask: np.ndarray  # [B, L], True at real positions


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


class TransformerModel:
    def __init__(self, config: TransformerConfig, params: dict[str, Tensor], seed: int = 0):
        self.config = config
        self.params = params
        self.training = True
        self.rng = np.random.default_rng(seed)
        self._pe = sinusoidal_positions(config.max_len, config.d_model)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def train(self, mode: bool = True) -> "TransformerModel":
        self.training = mode
        return self

    def eval(self) -> "TransformerModel":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    def copy(self) -> "TransformerModel":
        clone = TransformerModel(
            dataclasses.replace(self.config),
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()},
        )
        clone.training = self.training
        clone.rng = np.random.default_rng(self.rng.bit_generator.random_raw())
        return clone

    def prepare(self, srcs: Sequence) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
        """Encode a list of inputs once for incremental search.

        Returns ``step(src_idx, prefixes) -> probs``: for each row of
        ``prefixes`` (all the same length, BOS first) the next-token
        distribution given the encoder input ``srcs[src_idx[row]]``.
        """
        with ad.no_grad():
            enc = encode_batch(self, srcs)

        def step(src_idx, prefixes):
            idx = np.asarray(src_idx, dtype=np.int64)
            sub = EncoderOutput(Tensor(enc.states.data[idx]), enc.mask[idx])
            return decode_step(self, sub, np.atleast_2d(prefixes))

        return step


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_model(config: TransformerConfig, seed: int = 0) -> TransformerModel:
    """Xavier-uniform projections, N(0, d^-1/2) embeddings, zero biases, unit norms."""
    rng = np.random.default_rng(seed)
    d, f = config.d_model, config.d_ff
    p: dict[str, np.ndarray] = {}
    p["enc.embed"] = rng.normal(0.0, d**-0.5, size=(config.src_vocab_size, d))
    p["dec.embed"] = rng.normal(0.0, d**-0.5, size=(config.tgt_vocab_size, d))

    def attn(prefix):
        for name in ("q", "k", "v", "o"):
            p[f"{prefix}.w{name}"] = _xavier(rng, d, d)
            p[f"{prefix}.b{name}"] = np.zeros(d)

    def norm(prefix):
        p[f"{prefix}.g"] = np.ones(d)
        p[f"{prefix}.b"] = np.zeros(d)

    def ffn(prefix):
        p[f"{prefix}.w1"] = _xavier(rng, d, f)
        p[f"{prefix}.b1"] = np.zeros(f)
        p[f"{prefix}.w2"] = _xavier(rng, f, d)
        p[f"{prefix}.b2"] = np.zeros(d)

    for i in range(config.num_layers):
        norm(f"enc.{i}.ln1")
        attn(f"enc.{i}.self")
        norm(f"enc.{i}.ln2")
        ffn(f"enc.{i}.ff")
    norm("enc.ln")
    for i in range(config.num_layers):
        norm(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        norm(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross")
        norm(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ff")
    norm("dec.ln")
    p["out.w"] = _xavier(rng, d, config.tgt_vocab_size)
    p["out.b"] = np.zeros(config.tgt_vocab_size)
    params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}
    return TransformerModel(config, params, seed=seed + 1)


# ----------------------------------------------------------------------
# building blocks


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.matmul(x, w) + b


def _norm(m: TransformerModel, x: Tensor, prefix: str) -> Tensor:
    return ad.layer_norm(x, m[f"{prefix}.g"], m[f"{prefix}.b"])


def _drop(m: TransformerModel, x: Tensor) -> Tensor:
    return ad.dropout(x, m.config.dropout_rate, m.rng, m.training)


def _attention(m: TransformerModel, prefix: str, q_in: Tensor, kv_in: Tensor, mask) -> Tensor:
    B, Tq, d = q_in.shape
    Tk = kv_in.shape[1]
    H = m.config.num_heads
    dh = d // H

    def heads(x, name, T):
        x = _linear(x, m[f"{prefix}.w{name}"], m[f"{prefix}.b{name}"])
        return ad.transpose(ad.reshape(x, (B, T, H, dh)), (0, 2, 1, 3))

    q = heads(q_in, "q", Tq)
    k = heads(kv_in, "k", Tk)
    v = heads(kv_in, "v", Tk)
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    weights = _drop(m, ad.softmax(scores, axis=-1, mask=mask))
    ctx = ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3))
    return _linear(ad.reshape(ctx, (B, Tq, d)), m[f"{prefix}.wo"], m[f"{prefix}.bo"])


def _ffn(m: TransformerModel, prefix: str, x: Tensor) -> Tensor:
    h = _drop(m, ad.relu(_linear(x, m[f"{prefix}.w1"], m[f"{prefix}.b1"])))
    return _linear(h, m[f"{prefix}.w2"], m[f"{prefix}.b2"])


def _with_positions(m: TransformerModel, x: Tensor) -> Tensor:
    L = x.shape[1]
    if L > m.config.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len={m.config.max_len}")
    x = x * np.sqrt(m.config.d_model) + m._pe[:L]
    return _drop(m, x)


def _encoder_stack(m: TransformerModel, x: Tensor, mask: np.ndarray) -> EncoderOutput:
    h = _with_positions(m, x)
    key_mask = mask[:, None, None, :]
    for i in range(m.config.num_layers):
        x = _norm(m, h, f"enc.{i}.ln1")
        h = h + _drop(m, _attention(m, f"enc.{i}.self", x, x, key_mask))
        h = h + _drop(m, _ffn(m, f"enc.{i}.ff", _norm(m, h, f"enc.{i}.ln2")))
    return EncoderOutput(_norm(m, h, "enc.ln"), mask)


# ----------------------------------------------------------------------
# public forward passes


def encode_hard(m: TransformerModel, tokens, mask: Optional[np.ndarray] = None) -> EncoderOutput:
    """Encode token ids ``[L]`` or padded ``[B, L]``."""
    ids = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if ids.size and (ids.min() < 0 or ids.max() >= m.config.src_vocab_size):
        raise IndexError(f"source id out of range [0, {m.config.src_vocab_size})")
    if mask is None:
        mask = ids != PAD
    return _encoder_stack(m, ad.embedding(m["enc.embed"], ids), np.atleast_2d(mask))


def encode_soft(m: TransformerModel, weights, mask: Optional[np.ndarray] = None) -> EncoderOutput:
    """Encode weight rows ``[L, V]`` or ``[B, L, V]`` over the source vocabulary.

    Each position's input embedding is ``sum_z w[z] * E[z]``.  Rows are used
    as given; any normalisation is the caller's business.
    """
    w = weights if isinstance(weights, Tensor) else Tensor(weights)
    if w.ndim == 2:
        w = ad.reshape(w, (1,) + w.shape)
    if w.shape[-1] != m.config.src_vocab_size:
        raise ValueError(f"weight rows have {w.shape[-1]} entries, vocabulary has {m.config.src_vocab_size}")
    if np.any(w.data < 0):
        raise ValueError("encode_soft: negative weight")
    if mask is None:
        mask = np.ones(w.shape[:2], dtype=bool)
    return _encoder_stack(m, ad.matmul(w, m["enc.embed"]), np.atleast_2d(mask))


def encode(m: TransformerModel, src: Union[np.ndarray, Tensor, list]) -> EncoderOutput:
    """Dispatch on input kind: id sequences go hard, float rows go soft."""
    if isinstance(src, EncoderOutput):
        return src
    if isinstance(src, Tensor):
        return encode_soft(m, src)
    arr = np.asarray(src)
    if arr.dtype.kind == "f" and arr.ndim >= 2:
        return encode_soft(m, arr)
    return encode_hard(m, arr)


def encode_batch(m: TransformerModel, srcs: Sequence) -> EncoderOutput:
    """Pad a list of id sequences (or ``[L_i, V]`` weight rows) and encode them together."""
    if srcs and all(isinstance(s, np.ndarray) and s.dtype.kind == "f" and s.ndim == 2 for s in srcs):
        width = max(len(s) for s in srcs)
        w = np.zeros((len(srcs), width, srcs[0].shape[1]))
        mask = np.zeros((len(srcs), width), dtype=bool)
        for i, s in enumerate(srcs):
            w[i, : len(s)] = s
            mask[i, : len(s)] = True
        return encode_soft(m, w, mask)
    ids = pad_batch([list(s) for s in srcs])
    return encode_hard(m, ids, ids != PAD)


def _causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))[None, None]


def decode_teacher_forced(m: TransformerModel, enc: EncoderOutput, tgt_in) -> Tensor:
    """Logits ``[B, T, V]`` for every position of ``tgt_in`` (causally masked)."""
    ids = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
    B, T = ids.shape
    states, mask = enc.states, enc.mask
    if states.shape[0] != B:
        if states.shape[0] != 1:
            raise ValueError(f"encoder batch {states.shape[0]} vs decoder batch {B}")
        states = states[np.zeros(B, dtype=np.int64)]
        mask = np.repeat(mask, B, axis=0)
    h = _with_positions(m, ad.embedding(m["dec.embed"], ids))
    self_mask = _causal_mask(T)
    cross_mask = mask[:, None, None, :]
    for i in range(m.config.num_layers):
        x = _norm(m, h, f"dec.{i}.ln1")
        h = h + _drop(m, _attention(m, f"dec.{i}.self", x, x, self_mask))
        h = h + _drop(m, _attention(m, f"dec.{i}.cross", _norm(m, h, f"dec.{i}.ln2"), states, cross_mask))
        h = h + _drop(m, _ffn(m, f"dec.{i}.ff", _norm(m, h, f"dec.{i}.ln3")))
    return _linear(_norm(m, h, "dec.ln"), m["out.w"], m["out.b"])


def decode_step(m: TransformerModel, enc: EncoderOutput, prefix) -> np.ndarray:
    """Next-token distribution(s) after ``prefix`` (``[t]`` or ``[N, t]``, BOS first)."""
    ids = np.asarray(prefix, dtype=np.int64)
    single = ids.ndim == 1
    ids = np.atleast_2d(ids)
    if ids.shape[1] == 0 or np.any(ids[:, 0] != BOS):
        raise ValueError("prefix must start with BOS")
    if ids.shape[1] > m.config.max_len:
        raise ValueError(f"prefix length {ids.shape[1]} exceeds max_len={m.config.max_len}")
    with ad.no_grad():
        logits = decode_teacher_forced(m, enc, ids).data[:, -1]
    probs = ad._softmax_np(logits, -1)
    return probs[0] if single else probs


def add_eos(ids) -> list[int]:
    return list(ids) + [EOS]


def add_bos(ids) -> list[int]:
    return [BOS] + list(ids)


# ----------------------------------------------------------------------
# checkpoints
#
# Layout (all text ASCII, LF-terminated):
#   SOFTPIVOT-CKPT <version>
#   <config field>=<value>            one line per TransformerConfig field
#   tensors <N>
#   then N times:
#     <name> <ndim> <d1> ... <dk>
#     prod(d) little-endian float64 values, row-major, no separator

CKPT_MAGIC = b"SOFTPIVOT-CKPT"
CKPT_VERSION = 1


def save_checkpoint(path, m: TransformerModel) -> None:
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + b" %d\n" % CKPT_VERSION)
        for field in dataclasses.fields(m.config):
            f.write(f"{field.name}={getattr(m.config, field.name)!r}\n".encode("ascii"))
        f.write(b"tensors %d\n" % len(m.params))
        for name, t in m.params.items():
            dims = " ".join(str(s) for s in t.shape)
            f.write(f"{name} {t.ndim} {dims}\n".encode("ascii"))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> TransformerModel:
    with open(path, "rb") as f:
        magic, version = f.readline().split()
        if magic != CKPT_MAGIC or int(version) != CKPT_VERSION:
            raise ValueError(f"{path}: not a version-{CKPT_VERSION} checkpoint")
        types = {fl.name: fl.type for fl in dataclasses.fields(TransformerConfig)}
        kwargs = {}
        while True:
            line = f.readline().decode("ascii").rstrip("\n")
            if line.startswith("tensors "):
                n = int(line.split()[1])
                break
            key, _, value = line.partition("=")
            kwargs[key] = float(value) if types[key] in (float, "float") else int(value)
        params = {}
        for _ in range(n):
            head = f.readline().decode("ascii").split()
            name, ndim = head[0], int(head[1])
            shape = tuple(int(s) for s in head[2 : 2 + ndim])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
            params[name] = Tensor(data.astype(np.float64), requires_grad=True)
    return TransformerModel(TransformerConfig(**kwargs), params)
