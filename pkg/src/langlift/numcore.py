"""Dense float tensors with a reverse-mode autodiff tape.

Shapes are explicit: 2-D [rows, cols] for matrices, 1-D for bias/gain
vectors, 0-D for losses. Kernels are plain numpy; the only broadcasting
is bias-add. Every primitive records onto the active tape when some
input requires a gradient, and backward() replays the tape in exact
reverse order.

Default dtype is float32. Float64 inputs are preserved as-is, which the
test suite uses for high-precision finite-difference checks; production
code never constructs float64 tensors.
"""

from __future__ import annotations

import contextlib

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class TapeError(RuntimeError):
    """backward() called on something the tape cannot differentiate."""


class EmptyLossError(ValueError):
    """Loss requested over zero positions."""


class Tensor:
    """A dense float array, optionally tracked for gradients.

    data is row-major; grad, when populated, has identical shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: ComputeTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class ComputeTape:
    """Ordered record of primitive applications.

    Recording order is topological by construction, so backward simply
    walks the entries in reverse. Clearing drops entries and any
    intermediate gradients they hold alive.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], grad_fn) -> None:
        out.requires_grad = True
        out._tape = self
        self._entries.append((out, inputs, grad_fn))

    def clear(self) -> None:
        for out, _, _ in self._entries:
            out.grad = None
            out._tape = None
        self._entries.clear()


_ACTIVE: ComputeTape | None = None


def active_tape() -> ComputeTape | None:
    return _ACTIVE


@contextlib.contextmanager
def tape():
    """Context manager opening a fresh recording tape."""
    global _ACTIVE
    t = ComputeTape()
    prev = _ACTIVE
    _ACTIVE = t
    try:
        yield t
    finally:
        _ACTIVE = prev


def _maybe_record(out: Tensor, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    if _ACTIVE is not None and any(t.requires_grad for t in inputs):
        _ACTIVE.record(out, inputs, grad_fn)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # rebinds instead of += so grads returned by several grad_fns may alias
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Populate gradients of everything that produced a scalar loss.

    Walks the recording tape in exact reverse order. Tensors with
    requires_grad=False never receive a gradient.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward root must be scalar, got shape {loss.data.shape}")
    t = loss._tape
    if t is None:
        raise TapeError("backward root was not produced through recorded primitives")
    loss.grad = np.ones_like(loss.data)
    for out, inputs, grad_fn in reversed(t._entries):
        if out.grad is None:
            continue
        grads = grad_fn(out.grad)
        for inp, g in zip(inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            _accumulate(inp, g)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a [m,k] @ b [k,n] -> [m,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _maybe_record(out, (a, b), grad_fn)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D operand, got {x.shape}")
    out = Tensor(np.ascontiguousarray(x.data.T))

    def grad_fn(g):
        return (np.ascontiguousarray(g.T),)

    return _maybe_record(out, (x,), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; b may be a 1-D bias added to every row of a."""
    bias = a.data.ndim == 2 and b.data.ndim == 1
    if bias:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"bias length {b.shape[0]} does not match columns {a.shape[1]}")
    elif a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def grad_fn(g):
        return g, (g.sum(axis=0) if bias else g)

    return _maybe_record(out, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise multiply of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def grad_fn(g):
        return g * b.data, g * a.data

    return _maybe_record(out, (a, b), grad_fn)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(x.data * x.dtype.type(s))

    def grad_fn(g):
        return (g * s,)

    return _maybe_record(out, (x,), grad_fn)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def grad_fn(g):
        return (g * (x.data > 0),)

    return _maybe_record(out, (x,), grad_fn)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x); the gate nonlinearity."""
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * sig)

    def grad_fn(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return _maybe_record(out, (x,), grad_fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilized by row-max subtraction."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D operand, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def grad_fn(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _maybe_record(out, (x,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization with learned gain and bias."""
    if x.data.ndim != 2 or gain.data.ndim != 1 or bias.data.ndim != 1:
        raise ShapeError("layer_norm expects x [m,n], gain [n], bias [n]")
    if x.shape[1] != gain.shape[0] or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"layer_norm width mismatch: {x.shape} vs {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv_std
    out = Tensor(xhat * gain.data + bias.data)

    def grad_fn(g):
        gy = g * gain.data
        m1 = gy.mean(axis=1, keepdims=True)
        m2 = (gy * xhat).mean(axis=1, keepdims=True)
        gx = inv_std * (gy - m1 - xhat * m2)
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _maybe_record(out, (x, gain, bias), grad_fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of table [V,d] at integer ids -> [len(ids), d]."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("embedding ids must be a flat sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"token id out of range 0..{table.shape[0] - 1}")
    out = Tensor(table.data[idx])

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _maybe_record(out, (table,), grad_fn)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("slice_cols needs a 2-D operand")
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"column slice [{start}:{stop}] out of range for {x.shape}")
    out = Tensor(np.ascontiguousarray(x.data[:, start:stop]))

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _maybe_record(out, (x,), grad_fn)


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    rows = parts[0].shape[0]
    if any(p.data.ndim != 2 or p.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols parts must be 2-D with equal row counts")
    widths = [p.shape[1] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))

    def grad_fn(g):
        grads = []
        offset = 0
        for w in widths:
            grads.append(np.ascontiguousarray(g[:, offset:offset + w]))
            offset += w
        return tuple(grads)

    return _maybe_record(out, tuple(parts), grad_fn)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; caller supplies the generator so runs are replayable."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0,1), got {p}")
    if p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    out = Tensor(x.data * keep)

    def grad_fn(g):
        return (g * keep,)

    return _maybe_record(out, (x,), grad_fn)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-probability of targets over masked positions.

    logits [T,V]; targets length T; mask length T of booleans (None means
    every position counts). Raises EmptyLossError when no position is live.
    """
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy expects logits [T,V]")
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (logits.shape[0],):
        raise ShapeError(f"targets length {tgt.shape} does not match logits rows {logits.shape[0]}")
    if mask is None:
        live = np.ones(logits.shape[0], dtype=bool)
    else:
        live = np.asarray(mask, dtype=bool)
        if live.shape != tgt.shape:
            raise ShapeError("mask length must match targets length")
    n_live = int(live.sum())
    if n_live == 0:
        raise EmptyLossError("cross_entropy mask selects no positions")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= logits.shape[1]):
        raise IndexError("target id out of vocabulary range")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(logits.shape[0])
    nll = log_z - shifted[rows, tgt]
    loss = (nll * live).sum() / logits.dtype.type(n_live)
    out = Tensor(np.asarray(loss, dtype=logits.dtype))

    def grad_fn(g):
        probs = np.exp(shifted - log_z[:, None])
        probs[rows, tgt] -= 1.0
        probs *= (live / n_live)[:, None]
        return (probs * g,)

    return _maybe_record(out, (logits,), grad_fn)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def grad_fn(g):
        return (np.full_like(x.data, 1.0) * g,)

    return _maybe_record(out, (x,), grad_fn)
