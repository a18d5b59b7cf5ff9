"""Reverse-mode automatic differentiation over dense float64 arrays.

A small eager tape machine: operations executed while a :class:`Tape` is
active are recorded in execution order (which is automatically a topological
order), and :meth:`Tape.backward` replays the records once, in reverse, to
accumulate gradients into every ``requires_grad`` tensor that the loss
reaches.  Everything is 64-bit so analytic gradients can be validated
tightly against central finite differences.

Usage sketch::

    w = Tensor(np.zeros((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(linear(x, w, b))
    tape.backward(loss)
    w.grad  # populated; zeros for parameters the loss never touched

Ops run outside any tape (e.g. during decoding or finite-difference
probing) compute values only and record nothing.
"""

from __future__ import annotations

import threading
from functools import lru_cache

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "NumericsError",
    "set_finite_checks",
    "backward",
    "hadamard",
    "add",
    "add_n",
    "scale",
    "sum_all",
    "linear",
    "conv2d",
    "conv1d",
    "sigmoid",
    "tanh",
    "relu",
    "global_avg_pool",
    "concat",
    "slice_axis",
    "reshape",
    "broadcast_spatial",
    "embed_row",
    "softmax",
    "softmax_cross_entropy",
    "lstm_cell",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Tape misuse: double backward, recording on a spent tape, wrong tape."""


class NumericsError(ArithmeticError):
    """A forward op produced NaN/Inf while finite checks were enabled."""


_STATE = threading.local()
_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    """Globally toggle post-op NaN/Inf assertions (off by default)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _active_tape():
    return getattr(_STATE, "tape", None)


class Tensor:
    """A dense float64 array plus gradient bookkeeping.

    ``requires_grad`` marks leaves (parameters) the caller wants gradients
    for; op outputs inherit it whenever a tape is recording and any input
    requires grad.  ``grad`` reads as a zero array until a backward pass
    writes to it, so parameters untouched by the loss report an exact zero
    gradient.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray | None:
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.data)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return hadamard(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class Tape:
    """Ordered record of executed ops; one reverse sweep per tape.

    Use as a context manager to capture the forward pass, then call
    :meth:`backward` exactly once.  A spent tape rejects both further
    recording and a second backward; gradient *accumulation* across samples
    is done by running each sample on its own tape, since backward adds
    into ``Tensor.grad`` buffers without clearing them.
    """

    __slots__ = ("_records", "_spent", "_entered")

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._spent = False
        self._entered = False

    def __enter__(self) -> "Tape":
        if getattr(_STATE, "tape", None) is not None:
            raise TapeError("a tape is already active on this thread")
        _STATE.tape = self
        self._entered = True
        return self

    def __exit__(self, *exc) -> None:
        _STATE.tape = None

    def __len__(self) -> int:
        return len(self._records)

    def _append(self, out, inputs, back) -> None:
        if self._spent:
            raise TapeError("cannot record on a tape that has been backpropagated")
        self._records.append((out, inputs, back))

    def backward(self, loss: Tensor) -> None:
        """Populate gradients of everything reachable from ``loss``.

        ``loss`` must be a scalar produced while this tape was recording.
        Visits each record exactly once, newest first.
        """
        if self._spent:
            raise TapeError("tape already backpropagated; run a fresh forward pass")
        if loss.data.shape != ():
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        self._spent = True
        loss._grad = np.ones((), dtype=np.float64)
        for out, inputs, back in reversed(self._records):
            out_grad = out._grad
            if out_grad is None:
                continue  # not reachable from the loss
            for inp, contrib in zip(inputs, back(out_grad)):
                if contrib is None or not inp.requires_grad:
                    continue
                if inp._grad is None:
                    inp._grad = np.zeros_like(inp.data)
                inp._grad += contrib


def backward(loss: Tensor) -> None:
    """Run the backward pass of the tape that produced ``loss``."""
    if loss._tape is None:
        raise TapeError("loss was not produced under an active tape")
    loss._tape.backward(loss)


def _finish(out_data, inputs: tuple[Tensor, ...], back) -> Tensor:
    """Wrap an op result, recording it if a tape is live and grads are wanted."""
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NumericsError("forward op produced a non-finite value")
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._append(out, inputs, back)
    return out


def _trailing_broadcast_ok(a_shape, b_shape) -> bool:
    # b may be repeated along a's leading axes: trailing dims must match.
    if len(b_shape) > len(a_shape):
        return False
    return a_shape[len(a_shape) - len(b_shape):] == b_shape


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product ``a[i] * b[i]``.

    ``b`` may be smaller than ``a`` as long as its shape equals the trailing
    dims of ``a``; it is then repeated along the leading axes.  This is how a
    single-channel spatial attention mask scales every channel of a feature
    map.
    """
    if a.shape != b.shape and not _trailing_broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"hadamard: {a.shape} not maskable by {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g * bd if a.requires_grad else None
        gb = _reduce_to(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _finish(ad * bd, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum, with the same trailing-broadcast rule as hadamard."""
    if a.shape != b.shape and not _trailing_broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add: {a.shape} incompatible with {b.shape}")
    b_shape = b.shape

    def back(g):
        return g, _reduce_to(g, b_shape)

    return _finish(a.data + b.data, (a, b), back)


def add_n(tensors: list[Tensor]) -> Tensor:
    """Sum a non-empty list of same-shape tensors in a single record."""
    if not tensors:
        raise ValueError("add_n needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"add_n: mixed shapes {shape} and {t.shape}")
    total = tensors[0].data.copy()
    for t in tensors[1:]:
        total += t.data

    def back(g):
        return tuple(g for _ in tensors)

    return _finish(total, tuple(tensors), back)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a Python constant (not differentiated w.r.t. the factor)."""
    factor = float(factor)

    def back(g):
        return (g * factor,)

    return _finish(a.data * factor, (a,), back)


def sum_all(a: Tensor) -> Tensor:
    """Sum every element into a scalar."""
    shape = a.shape

    def back(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _finish(np.asarray(a.data.sum()), (a,), back)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, overflow-safe for large ``|x|``; outputs in (0,1)."""
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        return (g * out * (1.0 - out),)

    return _finish(out, (x,), back)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def back(g):
        return (g * (1.0 - out * out),)

    return _finish(out, (x,), back)


def relu(x: Tensor) -> Tensor:
    xd = x.data

    def back(g):
        return (g * (xd > 0),)

    return _finish(np.maximum(xd, 0.0), (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over every non-leading axis: ``[C,H,W] -> [C]`` or ``[C,L] -> [C]``."""
    if x.ndim < 2:
        raise ShapeError(f"global_avg_pool needs rank >= 2, got {x.shape}")
    axes = tuple(range(1, x.ndim))
    count = 1
    for a in axes:
        count *= x.shape[a]
    shape = x.shape

    def back(g):
        return (np.broadcast_to(g.reshape((-1,) + (1,) * (len(shape) - 1)), shape) / count,)

    return _finish(x.data.mean(axis=axes), (x,), back)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    """Juxtapose tensors along ``axis``; backward slices the gradient back."""
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(
                f"concat axis {axis}: {tensors[0].shape} incompatible with {t.shape}"
            )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(piece for piece in np.split(g, offsets, axis=axis))

    return _finish(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _finish(x.data[index].copy(), (x,), back)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape

    def back(g):
        return (g.reshape(old),)

    return _finish(x.data.reshape(shape), (x,), back)


def broadcast_spatial(v: Tensor, dims: tuple[int, ...]) -> Tensor:
    """Tile a vector ``[C]`` over trailing spatial dims: ``[C] -> [C, *dims]``."""
    if v.ndim != 1:
        raise ShapeError(f"broadcast_spatial needs a vector, got {v.shape}")
    n = len(dims)

    def back(g):
        return (g.sum(axis=tuple(range(1, n + 1))),)

    out = np.broadcast_to(v.data.reshape((-1,) + (1,) * n), v.shape + tuple(dims)).copy()
    return _finish(out, (v,), back)


def embed_row(table: Tensor, index: int) -> Tensor:
    """Select row ``index`` of a ``[V, d]`` table (word embedding lookup)."""
    index = int(index)
    if not 0 <= index < table.shape[0]:
        raise IndexError(f"embedding index {index} out of range [0, {table.shape[0]})")
    shape = table.shape

    def back(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _finish(table.data[index].copy(), (table,), back)


# ---------------------------------------------------------------------------
# affine / convolution ops
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``y = W x + b``; a 2-D ``x`` is treated as rows of inputs."""
    if w.ndim != 2 or b.shape != (w.shape[0],):
        raise ShapeError(f"linear: weight {w.shape} / bias {b.shape} malformed")
    if x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    if x.ndim == 1:
        out = wd @ xd + b.data

        def back(g):
            gx = wd.T @ g if x.requires_grad else None
            gw = np.outer(g, xd) if w.requires_grad else None
            return gx, gw, g
    else:
        out = xd @ wd.T + b.data

        def back(g):
            gx = g @ wd if x.requires_grad else None
            gw = g.T @ xd if w.requires_grad else None
            return gx, gw, g.sum(axis=0)

    return _finish(out, (x, w, b), back)


@lru_cache(maxsize=128)
def _conv2d_gather(c_in: int, hp: int, wp: int, k: int, stride: int):
    """Flat indices into a padded [C,Hp,Wp] mapping to an im2col matrix.

    Returns (idx, h_out, w_out) with idx shaped [C*K*K, h_out*w_out].
    """
    h_out = (hp - k) // stride + 1
    w_out = (wp - k) // stride + 1
    base = np.arange(c_in)[:, None, None] * (hp * wp)
    kern = (np.arange(k)[:, None] * wp + np.arange(k)).reshape(-1)
    win = base + kern.reshape(1, k * k, 1)  # [C, K*K, 1]
    tops = (np.arange(h_out)[:, None] * stride * wp + np.arange(w_out) * stride).reshape(-1)
    idx = (win + tops).reshape(c_in * k * k, h_out * w_out)
    return idx, h_out, w_out


def conv2d(x: Tensor, kernels: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation: ``[C,H,W] * [O,C,K,K] -> [O,H',W']``."""
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape}, kernels {kernels.shape}")
    c_in, h, w = x.shape
    c_out, kc, k, k2 = kernels.shape
    if kc != c_in or k != k2 or b.shape != (c_out,):
        raise ShapeError(f"conv2d: kernels {kernels.shape} / bias {b.shape} mismatch input {x.shape}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise ShapeError(f"conv2d: kernel {k}x{k} larger than padded input {hp}x{wp}")
    if padding:
        padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    else:
        padded = x.data
    idx, h_out, w_out = _conv2d_gather(c_in, hp, wp, k, stride)
    col = padded.reshape(-1)[idx]                      # [C*K*K, H'*W']
    w2 = kernels.data.reshape(c_out, -1)
    out = (w2 @ col + b.data[:, None]).reshape(c_out, h_out, w_out)

    def back(g):
        g2 = g.reshape(c_out, -1)
        gk = (g2 @ col.T).reshape(kernels.shape) if kernels.requires_grad else None
        gb = g2.sum(axis=1) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcol = w2.T @ g2
            dpad = np.zeros(c_in * hp * wp)
            np.add.at(dpad, idx.reshape(-1), dcol.reshape(-1))
            dpad = dpad.reshape(c_in, hp, wp)
            gx = dpad[:, padding:padding + h, padding:padding + w] if padding else dpad
        return gx, gk, gb

    return _finish(out, (x, kernels, b), back)


@lru_cache(maxsize=128)
def _conv1d_gather(c_in: int, lp: int, k: int, stride: int):
    l_out = (lp - k) // stride + 1
    base = np.arange(c_in)[:, None, None] * lp
    win = base + np.arange(k).reshape(1, k, 1)
    starts = (np.arange(l_out) * stride).reshape(-1)
    idx = (win + starts).reshape(c_in * k, l_out)
    return idx, l_out


def conv1d(x: Tensor, kernels: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation: ``[C,L] * [O,C,K] -> [O,L']``."""
    if x.ndim != 2 or kernels.ndim != 3:
        raise ShapeError(f"conv1d: input {x.shape}, kernels {kernels.shape}")
    c_in, length = x.shape
    c_out, kc, k = kernels.shape
    if kc != c_in or b.shape != (c_out,):
        raise ShapeError(f"conv1d: kernels {kernels.shape} / bias {b.shape} mismatch input {x.shape}")
    if stride < 1:
        raise ValueError(f"conv1d: stride must be >= 1, got {stride}")
    lp = length + 2 * padding
    if k > lp:
        raise ShapeError(f"conv1d: kernel {k} larger than padded input {lp}")
    padded = np.pad(x.data, ((0, 0), (padding, padding))) if padding else x.data
    idx, l_out = _conv1d_gather(c_in, lp, k, stride)
    col = padded.reshape(-1)[idx]
    w2 = kernels.data.reshape(c_out, -1)
    out = w2 @ col + b.data[:, None]

    def back(g):
        gk = (g @ col.T).reshape(kernels.shape) if kernels.requires_grad else None
        gb = g.sum(axis=1) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcol = w2.T @ g
            dpad = np.zeros(c_in * lp)
            np.add.at(dpad, idx.reshape(-1), dcol.reshape(-1))
            dpad = dpad.reshape(c_in, lp)
            gx = dpad[:, padding:padding + length] if padding else dpad
        return gx, gk, gb

    return _finish(out, (x, kernels, b), back)


# ---------------------------------------------------------------------------
# classification loss
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain-array softmax with max subtraction (reporting helper, no grad)."""
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """``-log softmax(logits)[target]`` for a 1-D logit vector.

    Computed with max subtraction; gradient is ``softmax(logits) - onehot``.
    """
    if logits.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy expects a vector, got {logits.shape}")
    target = int(target)
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"target {target} out of range [0, {logits.shape[0]})")
    z = logits.data - logits.data.max()
    lse = np.log(np.exp(z).sum())
    loss = lse - z[target]
    probs = np.exp(z - lse)

    def back(g):
        gl = probs.copy()
        gl[target] -= 1.0
        return (gl * g,)

    return _finish(np.asarray(loss), (logits,), back)


# ---------------------------------------------------------------------------
# recurrent cell
# ---------------------------------------------------------------------------

def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, w: Tensor, b: Tensor):
    """One LSTM step; returns ``(h, c)``.

    ``w`` is ``[4d, d_in + d]`` and ``b`` is ``[4d]``, gates packed in
    (input, forget, cell, output) order, so ``b[d:2d]`` is the forget bias.
    Built from primitive ops, which makes backpropagation through time fall
    out of the tape for free.
    """
    d = h_prev.shape[0]
    if w.shape != (4 * d, x.shape[0] + d) or b.shape != (4 * d,) or c_prev.shape != (d,):
        raise ShapeError(
            f"lstm_cell: x {x.shape}, h {h_prev.shape}, c {c_prev.shape}, "
            f"w {w.shape}, b {b.shape} are inconsistent"
        )
    z = linear(concat([x, h_prev]), w, b)
    i = sigmoid(slice_axis(z, 0, 0, d))
    f = sigmoid(slice_axis(z, 0, d, 2 * d))
    g = tanh(slice_axis(z, 0, 2 * d, 3 * d))
    o = sigmoid(slice_axis(z, 0, 3 * d, 4 * d))
    c = add(hadamard(f, c_prev), hadamard(i, g))
    h = hadamard(o, tanh(c))
    return h, c
