"""Small reverse-mode autodiff over numpy float64 arrays.

Every differentiable operation builds a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.  The
graph is the tape: :meth:`Tensor.backward` sorts it topologically and walks it
once in reverse.

Broadcasting is deliberately narrow.  Binary elementwise ops accept equal
shapes, scalars, a trailing-suffix operand (bias add) or a same-rank operand
with size-1 axes (row-wise scaling).  Everything else must be reshaped
explicitly.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, decoding)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # ------------------------------------------------------------------
    # backward pass

    def _topo(self) -> list[Tensor]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable leaf that requires grad.

        Leaf gradients accumulate across calls; intermediate gradients live
        only for the duration of the call.
        """
        if self.data.ndim != 0:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that is not on the tape")
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(self._topo()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # ------------------------------------------------------------------
    # operator sugar

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, p: float):
        return power(self, p)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: tuple[int, ...], b: tuple[int, ...]) -> None:
    if a == b or not a or not b:
        return
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    if len(small) < len(big) and big[len(big) - len(small):] == small:
        return
    if len(a) == len(b) and (
        all(s == t or s == 1 for s, t in zip(a, b)) or all(s == t or s == 1 for s, t in zip(b, a))
    ):
        return
    raise ShapeError(f"{op}: unsupported broadcast between {a} and {b}")


# ----------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    return _make(xd**p, (x,), lambda g: (g * p * xd ** (p - 1),))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ----------------------------------------------------------------------
# shape and reduction


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make(x.data.swapaxes(a, b), (x,), lambda g: (g.swapaxes(a, b),))


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


# ----------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes must agree, or ``b`` may be a plain 2-D matrix that
    is shared across the batch.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ, {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``weight[ids]``; gradient scatters back with accumulation."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")
    shape = weight.shape

    def backward(g):
        gw = np.zeros(shape, dtype=DTYPE)
        np.add.at(gw, ids, g)
        return (gw,)

    return _make(weight.data[ids], (weight,), backward)


# ----------------------------------------------------------------------
# normalisations and losses


def _softmax_np(x: np.ndarray, axis: int, mask: Optional[np.ndarray] = None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-shifted softmax.  ``mask`` (True = keep) zeroes excluded entries."""
    y = _softmax_np(x.data, axis, mask)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def _log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = _log_softmax_np(x.data, axis)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(xd.var(axis=-1, keepdims=True) + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), backward)


def cross_entropy(
    logits: Tensor,
    targets,
    label_smoothing: float = 0.0,
    pad_id: Optional[int] = 0,
) -> Tensor:
    """Summed (label-smoothed) negative log-likelihood over non-pad positions.

    ``logits`` is ``[..., V]`` and ``targets`` the matching integer array.  The
    smoothed per-token loss is ``(1-eps)*nll + eps*mean_v(-log p_v)``.
    """
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    keep = np.ones(targets.shape, dtype=bool) if pad_id is None else targets != pad_id
    logp = _log_softmax_np(logits.data)
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    per_tok = (1.0 - label_smoothing) * nll - label_smoothing * logp.mean(axis=-1)
    total = np.where(keep, per_tok, 0.0).sum()

    def backward(g):
        grad = np.exp(logp) - label_smoothing / V
        np.put_along_axis(
            grad,
            targets[..., None],
            np.take_along_axis(grad, targets[..., None], axis=-1) - (1.0 - label_smoothing),
            axis=-1,
        )
        return (grad * keep[..., None] * g,)

    return _make(np.asarray(total), (logits,), backward)


def nonpad_count(targets, pad_id: Optional[int] = 0) -> int:
    targets = np.asarray(targets)
    return int(targets.size if pad_id is None else np.count_nonzero(targets != pad_id))


# ----------------------------------------------------------------------
# verification


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> tuple[bool, float]:
    """Compare backprop against central differences.

    Returns ``(passed, max_err)`` where the error of each element is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    x = np.array(x, dtype=DTYPE)
    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            hi = f(Tensor(x)).item()
        flat[i] = orig - eps
        with no_grad():
            lo = f(Tensor(x)).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    max_err = float(err.max()) if err.size else 0.0
    return max_err < tol, max_err


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_samples: int,
    rng: np.random.Generator,
    eps: float = 1e-5,
) -> tuple[float, list[tuple[int, int, float, float]]]:
    """Spot-check ``d loss / d param`` on randomly chosen scalar entries.

    ``loss_fn`` rebuilds the loss from the current parameter values.  Entries
    are drawn uniformly over all scalars in ``params``.  Returns the max error
    (same measure as :func:`grad_check`) and ``(param, flat_index, analytic,
    numeric)`` per sample.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    sizes = np.array([p.data.size for p in params])
    picks = rng.choice(int(sizes.sum()), size=n_samples, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rows = []
    for flat in np.sort(picks):
        j = int(np.searchsorted(offsets, flat, side="right") - 1)
        i = int(flat - offsets[j])
        p = params[j]
        analytic = float(p.grad.reshape(-1)[i]) if p.grad is not None else 0.0
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        view = p.data.reshape(-1)
        orig = view[i]
        with no_grad():
            view[i] = orig + eps
            hi = loss_fn().item()
            view[i] = orig - eps
            lo = loss_fn().item()
        view[i] = orig
        rows.append((j, i, analytic, (hi - lo) / (2 * eps)))
    errs = [abs(a - n) / max(1.0, abs(a)) for _, _, a, n in rows]
    return max(errs, default=0.0), rows
