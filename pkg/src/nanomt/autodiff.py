"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded in execution
order (which is automatically topological); ``Tape.backward`` replays the
records once, in reverse, accumulating gradients additively. Everything is
64-bit so finite-difference checks and bitwise-equality tests are meaningful.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_LOCAL = threading.local()

# When enabled, every forward op asserts its output is finite. Off by default:
# the checks cost a full pass over each result. Tests turn this on.
DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    global DEBUG_CHECKS
    DEBUG_CHECKS = enabled


def _tape_stack() -> list["Tape"]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked for gradients.

    ``requires_grad`` marks trainable leaves; interior results of recorded
    operations are tracked automatically while a tape is active. ``grad`` is
    allocated lazily and only for tensors that actually need one, so frozen
    parameters never receive a gradient buffer.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64, order="C")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of operations for one reverse pass.

    Tapes nest (innermost wins) and are confined to the thread that opened
    them. Each recorded entry is ``(output, pull)`` where ``pull`` reads the
    output gradient and accumulates into the inputs.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every tracked tensor reachable from ``loss``.

        ``loss`` must be a scalar produced by operations recorded on this
        tape. Visits each entry exactly once, in reverse execution order.
        """
        if loss.data.shape != ():
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if loss.grad is None:
            loss.grad = np.ones((), dtype=np.float64)
        for out, pull in reversed(self._entries):
            if out.grad is None:
                continue
            pull(out.grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._node


def _accumulate(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add ``g`` into ``t.grad``; ``own`` marks ``g`` as freshly allocated.

    Owned arrays are installed directly on first write; shared ones are
    copied so later accumulation cannot corrupt another tensor's gradient.
    """
    if not _tracked(t):
        return
    if t.grad is None:
        t.grad = g if own else np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _make(data: np.ndarray, inputs: Sequence[Tensor],
          pull: Callable[[np.ndarray], None]) -> Tensor:
    if DEBUG_CHECKS:
        assert np.all(np.isfinite(data)), "non-finite value from forward op"
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(_tracked(t) for t in inputs):
        out._node = True
        tape._entries.append((out, pull))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over the axes numpy broadcasting introduced for ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def pull(g: np.ndarray) -> None:
        ga = _unbroadcast(g, a.data.shape)
        _accumulate(a, ga, own=ga is not g)
        gb = _unbroadcast(g, b.data.shape)
        _accumulate(b, gb, own=gb is not g)

    return _make(data, (a, b), pull)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def pull(g: np.ndarray) -> None:
        ga = _unbroadcast(g, a.data.shape)
        _accumulate(a, ga, own=ga is not g)
        _accumulate(b, _unbroadcast(-g, b.data.shape), own=True)

    return _make(data, (a, b), pull)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def pull(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape), own=True)
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape), own=True)

    return _make(data, (a, b), pull)


def matmul(a, b) -> Tensor:
    """Matrix product; leading (batch) dimensions broadcast as in numpy."""
    a, b = _as_tensor(a), _as_tensor(b)
    da, db = a.data, b.data
    if da.ndim < 2 or db.ndim < 2 or da.shape[-1] != db.shape[-2]:
        raise DimensionError(
            f"matmul shapes do not agree: {da.shape} x {db.shape}"
        )

    if db.ndim == 2 and da.ndim > 2:
        # batched input against a shared weight: one flat GEMM instead of a
        # stack of tiny ones, in both the forward and the backward pass
        flat = da.reshape(-1, da.shape[-1])
        data = (flat @ db).reshape(da.shape[:-1] + (db.shape[-1],))

        def pull(g: np.ndarray) -> None:
            g_flat = g.reshape(-1, g.shape[-1])
            if _tracked(a):
                _accumulate(a, (g_flat @ db.T).reshape(da.shape), own=True)
            if _tracked(b):
                _accumulate(b, flat.T @ g_flat, own=True)

        return _make(data, (a, b), pull)

    data = da @ db

    def pull(g: np.ndarray) -> None:
        if _tracked(a):
            _accumulate(a, _unbroadcast(g @ np.swapaxes(db, -1, -2), da.shape),
                        own=True)
        if _tracked(b):
            _accumulate(b, _unbroadcast(np.swapaxes(da, -1, -2) @ g, db.shape),
                        own=True)

    return _make(data, (a, b), pull)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def pull(g: np.ndarray) -> None:
        # gradient is defined as 0 at exactly 0
        _accumulate(x, g * (x.data > 0.0), own=True)

    return _make(data, (x,), pull)


def softmax(x) -> Tensor:
    """Max-subtracted softmax over the last axis."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def pull(g: np.ndarray) -> None:
        inner = (g * data).sum(axis=-1, keepdims=True)
        _accumulate(x, (g - inner) * data, own=True)

    return _make(data, (x,), pull)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Variance uses denominator d (biased) with ``eps`` inside the square root.
    """
    if eps <= 0.0:
        raise ContractError(f"layer_norm eps must be > 0, got {eps}")
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm params must have shape ({d},), got "
            f"{gain.data.shape} and {bias.data.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    data = gain.data * xhat + bias.data

    def pull(g: np.ndarray) -> None:
        batch_axes = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=batch_axes), own=True)
        _accumulate(bias, g.sum(axis=batch_axes), own=True)
        gx = g * gain.data
        gm = gx.mean(axis=-1, keepdims=True)
        gv = (gx * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, (gx - gm - xhat * gv) * inv_std, own=True)

    return _make(data, (x, gain, bias), pull)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; the gradient scatters back additively."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ContractError(
            f"token id out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    data = table.data[ids]

    def pull(g: np.ndarray) -> None:
        if not _tracked(table):
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _make(data, (table,), pull)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def pull(g: np.ndarray) -> None:
        # the reshaped view aliases g, whose owner is finished by now
        _accumulate(x, g.reshape(x.data.shape), own=True)

    return _make(data, (x,), pull)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    data = np.transpose(x.data, axes)
    inverse = np.argsort(axes)

    def pull(g: np.ndarray) -> None:
        _accumulate(x, np.transpose(g, inverse), own=True)

    return _make(data, (x,), pull)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    data = np.asarray(x.data.sum())

    def pull(g: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(g, x.data.shape).copy(), own=True)

    return _make(data, (x,), pull)


def cross_entropy(logits: Tensor, targets: np.ndarray, pad_id: int) -> Tensor:
    """Mean negative log-softmax probability of ``targets`` over non-pad slots.

    ``logits`` has shape ``[..., V]`` and ``targets`` the matching leading
    shape. An all-pad target array yields 0 with zero gradient.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise DimensionError(
            f"targets shape {targets.shape} does not match logits "
            f"{logits.data.shape[:-1]}"
        )
    vocab = logits.data.shape[-1]
    keep = targets != pad_id
    out_of_range = ((targets < 0) | (targets >= vocab)) & keep
    if np.any(out_of_range):
        bad = targets[out_of_range]
        raise ContractError(f"target id {bad.flat[0]} outside [0, {vocab})")
    n = int(keep.sum())
    if n == 0:
        return _make(np.asarray(0.0), (logits,), lambda g: None)

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    safe_targets = np.where(keep, targets, 0)
    picked = np.take_along_axis(log_probs, safe_targets[..., None], axis=-1)[..., 0]
    data = np.asarray(-(picked * keep).sum() / n)

    def pull(g: np.ndarray) -> None:
        probs = np.exp(log_probs)
        grad = probs.copy()
        np.put_along_axis(
            grad, safe_targets[..., None],
            np.take_along_axis(grad, safe_targets[..., None], axis=-1) - 1.0,
            axis=-1,
        )
        grad *= keep[..., None]
        grad *= float(g) / n
        _accumulate(logits, grad, own=True)

    return _make(data, (logits,), pull)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; a no-op when ``rate`` is 0."""
    if rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    Returns the max componentwise relative error
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    x.zero_grad()
    x.requires_grad = True
    with Tape() as tape:
        y = f(x)
        tape.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.zero_grad()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x).data)
        flat[i] = orig - h
        down = float(f(x).data)
        flat[i] = orig
        nflat[i] = (up - down) / (2.0 * h)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
