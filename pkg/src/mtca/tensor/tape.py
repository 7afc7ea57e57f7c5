"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Design notes:

* Everything is float64 internally, regardless of on-disk precision, so
  finite-difference validation has headroom.
* A :class:`Tape` records operations in creation order (which is already a
  topological order); the backward pass walks it once in reverse and
  accumulates gradients additively at fan-out.
* Ops only record onto the innermost active tape of the current thread, and
  only when some input requires gradients.  Forward passes outside any tape
  are plain evaluation: nothing is retained.
* Every forward op validates finiteness; NaN/Inf anywhere is an error, not a
  value.

Tapes are cheap, single-use objects: one forward + one backward, then build a
new one.  Independent tapes on different threads never share mutable state.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels


class TapeError(RuntimeError):
    """Misuse of the tape lifecycle (no tape, reused tape, non-scalar loss)."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(ArithmeticError):
    """A forward value or gradient came out NaN or infinite."""


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array plus gradient metadata."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"


def param(data, name: str = "") -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    """A leaf tensor that never receives gradients."""
    return Tensor(data, requires_grad=False)


class Tape:
    """Single-use record of one forward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` exactly once on a scalar loss.
    """

    __slots__ = ("_nodes", "_consumed")

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def _record(self, out: Tensor, backward_fn: Callable) -> None:
        self._nodes.append((out, backward_fn))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagates d(loss)/d(tensor) to every recorded tensor.

        Leaves with ``requires_grad`` get their ``.grad`` attribute set.
        Returns the full gradient map keyed by ``id(tensor)`` so parallel
        scorers can read results without touching shared tensors.
        """
        if self._consumed:
            raise TapeError("tape already consumed; build a new tape per backward pass")
        if not self._nodes:
            raise TapeError("tape is empty")
        if loss.data.shape != ():
            raise TapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}

        def accumulate(t: Tensor, g: np.ndarray) -> None:
            if not t.requires_grad:
                return
            if g.size and not (np.isfinite(g.max()) and np.isfinite(g.min())):
                raise NonFiniteError("NaN/Inf gradient encountered during backward")
            key = id(t)
            held = grads.get(key)
            if held is None:
                grads[key] = np.array(g, dtype=np.float64, copy=True)
            else:
                held += g

        for out, backward_fn in reversed(self._nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            backward_fn(g, accumulate)

        for t in self._leaves():
            g = grads.get(id(t))
            if g is not None:
                t.grad = g
        return grads

    def _leaves(self):
        seen = set()
        for out, backward_fn in self._nodes:
            for t in getattr(backward_fn, "parents", ()):
                if id(t) not in seen and t.requires_grad:
                    seen.add(id(t))
                    yield t


def _check_finite(arr: np.ndarray, op: str) -> None:
    # max/min both propagate NaN and catch the two infinities without
    # allocating an intermediate boolean array
    if arr.size and not (np.isfinite(arr.max()) and np.isfinite(arr.min())):
        raise NonFiniteError(f"{op} produced NaN/Inf")


def _emit(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wraps the forward result and records the backward rule if needed."""
    _check_finite(data, op)
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        backward_fn.parents = tuple(parents)
        tape._record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a row-vector bias for 2-D ``a``."""
    if a.data.shape != b.data.shape and not (
        a.data.ndim == 2 and b.data.shape == (a.data.shape[1],)
    ):
        raise DimensionError(f"add: shapes {a.data.shape} and {b.data.shape}")
    data = a.data + b.data

    def bwd(g, acc):
        acc(a, g)
        if b.data.shape == a.data.shape:
            acc(b, g)
        else:
            acc(b, g.sum(axis=0))

    return _emit(data, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"sub: shapes {a.data.shape} and {b.data.shape}")

    def bwd(g, acc):
        acc(a, g)
        acc(b, -g)

    return _emit(a.data - b.data, "sub", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product, identical shapes."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul: shapes {a.data.shape} and {b.data.shape}")

    def bwd(g, acc):
        acc(a, g * b.data)
        acc(b, g * a.data)

    return _emit(a.data * b.data, "mul", (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g, acc):
        acc(a, g * c)

    return _emit(a.data * c, "scale", (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for (m,k)x(k,n) or (k,)x(k,n) operands."""
    if b.data.ndim != 2 or a.data.ndim not in (1, 2) or a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(f"matmul: shapes {a.data.shape} and {b.data.shape}")
    data = a.data @ b.data

    def bwd(g, acc):
        if a.data.ndim == 2:
            acc(a, g @ b.data.T)
            acc(b, a.data.T @ g)
        else:
            acc(a, b.data @ g)
            acc(b, np.outer(a.data, g))

    return _emit(data, "matmul", (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a matrix")

    def bwd(g, acc):
        acc(a, g.T)

    return _emit(np.ascontiguousarray(a.data.T), "transpose", (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g, acc):
        acc(a, np.full(a.data.shape, float(g), dtype=np.float64))

    return _emit(np.asarray(a.data.sum(), dtype=np.float64), "sum", (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``."""
    if not (-a.data.ndim <= axis < a.data.ndim):
        raise DimensionError(f"softmax: axis {axis} invalid for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, acc):
        inner = (g * y).sum(axis=axis, keepdims=True)
        acc(a, y * (g - inner))

    return _emit(y, "softmax", (a,), bwd)


def log_clamped(a: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); below the floor the subgradient is zero."""
    clipped = np.maximum(a.data, floor)

    def bwd(g, acc):
        acc(a, np.where(a.data > floor, g / clipped, 0.0))

    return _emit(np.log(clipped), "log", (a,), bwd)


def pelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU: x where positive, slope*x elsewhere; slope is scalar."""
    if slope.data.shape != ():
        raise DimensionError("pelu slope must be a scalar tensor")
    pos = x.data > 0
    a = float(slope.data)

    def bwd(g, acc):
        acc(x, g * np.where(pos, 1.0, a))
        acc(slope, np.asarray((g * np.where(pos, 0.0, x.data)).sum(), dtype=np.float64))

    return _emit(np.where(pos, x.data, a * x.data), "pelu", (x, slope), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; kept units scale by 1/(1-rate).  rate=0 is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = rng.random(x.data.shape) >= rate
    factor = keep / (1.0 - rate)

    def bwd(g, acc):
        acc(x, g * factor)

    return _emit(x.data * factor, "dropout", (x,), bwd)


# ---------------------------------------------------------------------------
# sequence ops (kernel-backed)


def conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Same-length 1-D convolution; kernel (K, C_in, C_out), K odd."""
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise DimensionError("conv1d expects x (L, C_in) and kernel (K, C_in, C_out)")
    taps, c_in, _ = w.data.shape
    if taps % 2 == 0:
        raise DimensionError(f"conv1d kernel width must be odd, got {taps}")
    if c_in != x.data.shape[1]:
        raise DimensionError(
            f"conv1d channel mismatch: input {x.data.shape[1]}, kernel {c_in}"
        )
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data)
    data = kernels.conv1d_forward(xd, wd)

    def bwd(g, acc):
        gx, gw = kernels.conv1d_backward(xd, wd, np.ascontiguousarray(g))
        acc(x, gx)
        acc(w, gw)

    return _emit(data, "conv1d", (x, w), bwd)


def maxpool2(x: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Stride-2 sequence max-pool honoring a row-validity mask.

    Returns the pooled tensor and the pooled mask.  Gradient routes to the
    argmax row of each window; ties go to the lower index; masked rows never
    win.
    """
    if x.data.shape[0] == 0:
        raise DimensionError("maxpool2 on empty sequence")
    xd = np.ascontiguousarray(x.data)
    m = np.ascontiguousarray(np.asarray(mask, dtype=np.uint8))
    if m.shape != (xd.shape[0],):
        raise DimensionError("maxpool2 mask must have one flag per row")
    data, arg, out_mask = kernels.maxpool2_forward(xd, m)
    length = xd.shape[0]

    def bwd(g, acc):
        acc(x, kernels.maxpool2_backward(np.ascontiguousarray(g), arg, length))

    return _emit(data, "maxpool2", (x,), bwd), out_mask


# ---------------------------------------------------------------------------
# row/column plumbing


def zero_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Forces masked-out rows to exactly zero (and blocks their gradient)."""
    m = np.asarray(mask, dtype=np.float64).reshape(-1, 1)
    if m.shape[0] != x.data.shape[0]:
        raise DimensionError("zero_rows mask length mismatch")

    def bwd(g, acc):
        acc(x, g * m)

    return _emit(x.data * m, "zero_rows", (x,), bwd)


def mean_valid_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over rows where mask is set; errors if nothing is valid."""
    m = np.asarray(mask, dtype=np.float64)
    n = m.sum()
    if n == 0:
        raise DimensionError("mean_valid_rows: no valid rows")

    def bwd(g, acc):
        acc(x, np.outer(m, g) / n)

    return _emit((x.data * m[:, None]).sum(axis=0) / n, "mean_valid_rows", (x,), bwd)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g, acc):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        acc(x, gx)

    return _emit(x.data[idx], "gather_rows", (x,), bwd)


def assemble_rows(
    length: int,
    top: Tensor,
    top_idx: np.ndarray,
    fallback: Tensor,
    fallback_idx: np.ndarray,
) -> Tensor:
    """Builds an (L, C) matrix: attended rows, fallback rows, zeros elsewhere."""
    top_idx = np.asarray(top_idx, dtype=np.int64)
    fallback_idx = np.asarray(fallback_idx, dtype=np.int64)
    channels = top.data.shape[1] if top.data.ndim == 2 else fallback.data.shape[0]
    data = np.zeros((length, channels), dtype=np.float64)
    if top_idx.size:
        data[top_idx] = top.data
    if fallback_idx.size:
        data[fallback_idx] = fallback.data

    def bwd(g, acc):
        if top_idx.size:
            acc(top, g[top_idx])
        if fallback_idx.size:
            acc(fallback, g[fallback_idx].sum(axis=0))

    return _emit(data, "assemble_rows", (top, fallback), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    widths = [p.data.shape[1] for p in parts]

    def bwd(g, acc):
        start = 0
        for p, w in zip(parts, widths):
            acc(p, g[:, start : start + w])
            start += w

    return _emit(np.concatenate([p.data for p in parts], axis=1), "concat_cols", tuple(parts), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    def bwd(g, acc):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        acc(x, gx)

    return _emit(np.ascontiguousarray(x.data[:, start:stop]), "slice_cols", (x,), bwd)
