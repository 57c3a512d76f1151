"""Minimal NHWC tensor engine with tape-based reverse-mode differentiation.

Only the operations the network needs are provided. Tensors are immutable
once produced; an operation records itself on the innermost active
:class:`Tape` (if any), so inference outside a tape costs nothing extra.

Precision is a process-wide switch: float32 for training throughput,
float64 for gradient checks. ``FC2N_PRECISION=float64`` changes the default
at import time; :func:`precision` changes it temporarily.

Reduction order: a 3x3 convolution is either one GEMM over an im2col patch
matrix (expanding convs) or a fixed-order sum of per-tap GEMMs over shifted
views (all others). Both are bit-deterministic for a fixed BLAS thread count.
"""

from __future__ import annotations

import contextlib
import os
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from fc2n.errors import DimensionError, StaleTapeError, UnsupportedKernelError

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_default_dtype = _PRECISIONS[os.environ.get("FC2N_PRECISION", "float32")]


def get_dtype() -> type:
    return _default_dtype


def set_dtype(name: str) -> None:
    global _default_dtype
    _default_dtype = _PRECISIONS[np.dtype(name).name]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the default element type ("float32" or "float64")."""
    global _default_dtype
    old = _default_dtype
    set_dtype(name)
    try:
        yield
    finally:
        _default_dtype = old


class Tensor:
    """Dense array of shape (N, H, W, C); scalars are stored as (1, 1, 1, 1)."""

    __slots__ = ("data", "__weakref__")

    def __init__(self, data, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.dtype})"


def _raise_not_scalar(t: Tensor):
    raise DimensionError(f"tensor of shape {t.shape} is not a scalar")


class Parameter(Tensor):
    """Learnable tensor with gradient accumulator and Adam moment slots."""

    __slots__ = ("name", "grad", "adam_m", "adam_v")

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, dtype)
        if self.data.ndim == 0:
            self.data = self.data.reshape(1, 1, 1, 1)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad.fill(0)

    @property
    def size(self) -> int:
        return self.data.size


class _Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op: str, out: Tensor, inputs: tuple, backward: Callable):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations.

    Usage::

        with Tape() as tape:
            loss = l1_loss(model_forward(model, x), y)
        tape.backward(loss)

    After :meth:`backward`, every reachable :class:`Parameter` has its
    ``grad`` incremented by dLoss/dParam, and :meth:`grad` returns the
    gradient of any leaf tensor that took part in the graph.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_grads: dict[int, np.ndarray] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, op: str, out: Tensor, inputs: tuple, backward: Callable) -> None:
        if self._consumed:
            raise StaleTapeError("cannot record on a tape that already ran backward; call reset()")
        self.nodes.append(_Node(op, out, inputs, backward))

    def op_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for node in self.nodes:
            counts[node.op] = counts.get(node.op, 0) + 1
        return counts

    def reset(self) -> None:
        self.nodes.clear()
        self._leaf_grads.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise StaleTapeError("backward already ran on this tape; call reset() first")
        if not self.nodes:
            raise StaleTapeError("tape is empty")
        if loss.data.size != 1:
            raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
        self._consumed = True

        produced = {id(node.out) for node in self.nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.out), None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.backward(g_out)):
                if g is None:
                    continue
                key = id(inp)
                if isinstance(inp, Parameter):
                    inp.grad += g
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        self._leaf_grads = {k: v for k, v in grads.items() if k not in produced}
        # drop activations; only leaf gradients are kept
        self.nodes.clear()

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the last loss with respect to a leaf tensor (zeros if unreachable)."""
        g = self._leaf_grads.get(id(tensor))
        return np.zeros_like(tensor.data) if g is None else g


def _record(op: str, out: Tensor, inputs: tuple, backward: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None:
        tape.record(op, out, inputs, backward)
    return out


def _check4(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise DimensionError(f"{what} must be rank 4 (N, H, W, C), got shape {x.shape}")
    if min(x.shape) < 1:
        raise DimensionError(f"{what} has an empty dimension: {x.shape}")


# ---------------------------------------------------------------------------
# operations


def _im2col(xp: np.ndarray, k: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, k, k, c), dtype=xp.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, :, dy, dx, :] = xp[:, dy:dy + ho, dx:dx + wo, :]
    return cols.reshape(n * ho * wo, k * k * c)


class _Im2col:
    """One GEMM over an explicit patch matrix; cheapest when C_in < C_out."""

    def __init__(self, xp: np.ndarray, w: np.ndarray, ho: int, wo: int):
        self.xp, self.w, self.ho, self.wo = xp, w, ho, wo
        self.k = w.shape[0]
        self.cols = _im2col(xp, self.k, ho, wo)
        self.wmat = w.reshape(-1, w.shape[3])

    def forward(self) -> np.ndarray:
        n = self.xp.shape[0]
        return (self.cols @ self.wmat).reshape(n, self.ho, self.wo, -1)

    def backward(self, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k, ho, wo, xp = self.k, self.ho, self.wo, self.xp
        g2 = g.reshape(-1, self.w.shape[3])
        gw = (self.cols.T @ g2).reshape(self.w.shape)
        gcols = (g2 @ self.wmat.T).reshape(xp.shape[0], ho, wo, k, k, xp.shape[3])
        gxp = np.zeros_like(xp)
        for dy in range(k):
            for dx in range(k):
                gxp[:, dy:dy + ho, dx:dx + wo, :] += gcols[:, :, :, dy, dx, :]
        return gxp, gw


class _ShiftedGemm:
    """Sum of k*k GEMMs on row-shifted views of the flattened padded input.

    Output row ``q`` of the padded grid collects tap (dy, dx) from input row
    ``q + dy*Wp + dx``; rows that fall in the padding margin are discarded.
    No patch matrix is materialised, which wins when C_in >= C_out.
    """

    def __init__(self, xp: np.ndarray, w: np.ndarray, ho: int, wo: int):
        self.xp, self.w, self.ho, self.wo = xp, w, ho, wo
        self.k = w.shape[0]
        n, hp, wp, c = xp.shape
        self.flat = xp.reshape(-1, c)
        self.span = self.flat.shape[0] - ((self.k - 1) * wp + self.k - 1)
        self.offsets = [dy * wp + dx for dy in range(self.k) for dx in range(self.k)]

    def forward(self) -> np.ndarray:
        n, hp, wp, _ = self.xp.shape
        c_out = self.w.shape[3]
        taps = self.w.reshape(-1, self.w.shape[2], c_out)
        out = np.zeros((n * hp * wp, c_out), dtype=self.xp.dtype)
        span = self.span
        for t, o in enumerate(self.offsets):
            out[:span] += self.flat[o:o + span] @ taps[t]
        return out.reshape(n, hp, wp, c_out)[:, :self.ho, :self.wo]

    def backward(self, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n, hp, wp, _ = self.xp.shape
        c_out = self.w.shape[3]
        taps = self.w.reshape(-1, self.w.shape[2], c_out)
        gfull = np.zeros((n, hp, wp, c_out), dtype=g.dtype)
        gfull[:, :self.ho, :self.wo] = g
        span = self.span
        gfull = gfull.reshape(-1, c_out)[:span]
        gw = np.empty_like(taps)
        gflat = np.zeros_like(self.flat)
        for t, o in enumerate(self.offsets):
            gw[t] = self.flat[o:o + span].T @ gfull
            gflat[o:o + span] += gfull @ taps[t].T
        return gflat.reshape(self.xp.shape), gw.reshape(self.w.shape)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Cross-correlation of an NHWC input with a [k, k, C_in, C_out] kernel.

    ``padding`` defaults to (k - 1) / 2, which preserves spatial size.
    """
    _check4(x, "conv2d input")
    w = kernel.data
    if w.ndim != 4 or w.shape[0] != w.shape[1]:
        raise DimensionError(f"kernel must have shape [k, k, C_in, C_out], got {w.shape}")
    k, _, c_in, c_out = w.shape
    if k % 2 == 0:
        raise UnsupportedKernelError(f"kernel size {k} is even; only odd sizes are supported")
    n, h, wd, c = x.shape
    if c != c_in:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {c_in}")
    if bias is not None and bias.data.size != c_out:
        raise DimensionError(f"conv2d: bias has {bias.data.size} entries, expected {c_out}")
    p = (k - 1) // 2 if padding is None else padding
    ho, wo = h + 2 * p - k + 1, wd + 2 * p - k + 1
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d: output would be empty")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    if k == 1:
        flat = xp.reshape(-1, c_in)
        wmat = w.reshape(c_in, c_out)
        y = (flat @ wmat).reshape(n, ho, wo, c_out)
        impl = None
    else:
        impl = (_Im2col if c_in < c_out else _ShiftedGemm)(xp, w, ho, wo)
        y = impl.forward()
    if bias is not None:
        y = y + bias.data.reshape(c_out)
    out = Tensor(y, dtype=x.dtype)

    if _active_tape() is None:
        return out

    def backward(g: np.ndarray):
        gb = g.reshape(-1, c_out).sum(axis=0).reshape(bias.data.shape) if bias is not None else None
        if impl is None:
            g2 = g.reshape(-1, c_out)
            gxp = (g2 @ wmat.T).reshape(xp.shape)
            gw = (flat.T @ g2).reshape(w.shape)
        else:
            gxp, gw = impl.backward(g)
        gx = gxp[:, p:p + h, p:p + wd, :] if p else gxp
        return gx, gw, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record("conv2d", out, inputs, backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x). The gradient at exactly 0 is taken to be 0."""
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0), dtype=x.dtype)
    return _record("relu", out, (x,), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, dtype=a.dtype)
    return _record("add", out, (a, b), lambda g: (g, g))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis, preserving order."""
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    for t in parts:
        _check4(t, "concat_channels part")
    lead = parts[0].shape[:3]
    for t in parts[1:]:
        if t.shape[:3] != lead:
            raise DimensionError(f"concat_channels: N/H/W mismatch {t.shape[:3]} vs {lead}")
    out = Tensor(np.concatenate([t.data for t in parts], axis=3), dtype=parts[0].dtype)
    bounds = np.cumsum([0] + [t.shape[3] for t in parts])

    def backward(g: np.ndarray):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record("concat", out, tuple(parts), backward)


def scale(x: Tensor, lam: Tensor) -> Tensor:
    """Multiply every element of ``x`` by the scalar ``lam``."""
    if lam.data.size != 1:
        raise DimensionError(f"scale factor must be scalar, got shape {lam.shape}")
    s = lam.data.reshape(())
    out = Tensor(x.data * s, dtype=x.dtype)

    def backward(g: np.ndarray):
        return g * s, np.sum(x.data * g).reshape(lam.data.shape)

    return _record("scale", out, (x, lam), backward)


def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, h, w, c = a.shape
    co = c // (r * r)
    return a.reshape(n, h, w, co, r, r).transpose(0, 1, 4, 2, 5, 3).reshape(n, h * r, w * r, co)


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, hr, wr, co = a.shape
    h, w = hr // r, wr // r
    return a.reshape(n, h, r, w, r, co).transpose(0, 1, 3, 5, 2, 4).reshape(n, h, w, co * r * r)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (N, H, W, C*r*r) into (N, r*H, r*W, C).

    Input channel ``c*r*r + i*r + j`` lands at sub-pixel offset (i, j) of
    output channel ``c``.
    """
    _check4(x, "pixel_shuffle input")
    if r < 1:
        raise ValueError(f"pixel_shuffle factor must be >= 1, got {r}")
    if x.shape[3] % (r * r):
        raise DimensionError(f"pixel_shuffle: {x.shape[3]} channels not divisible by {r * r}")
    out = Tensor(_shuffle(x.data, r), dtype=x.dtype)
    return _record("pixel_shuffle", out, (x,), lambda g: (_unshuffle(g, r),))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    _check4(x, "pixel_unshuffle input")
    if r < 1:
        raise ValueError(f"pixel_unshuffle factor must be >= 1, got {r}")
    if x.shape[1] % r or x.shape[2] % r:
        raise DimensionError(f"pixel_unshuffle: spatial dims {x.shape[1:3]} not divisible by {r}")
    out = Tensor(_unshuffle(x.data, r), dtype=x.dtype)
    return _record("pixel_unshuffle", out, (x,), lambda g: (_shuffle(g, r),))


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over every element."""
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: shapes differ {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    count = diff.size
    out = Tensor(np.abs(diff).sum() / count, dtype=pred.dtype)

    def backward(g: np.ndarray):
        gp = np.sign(diff) * (g.reshape(()) / count)
        return gp, -gp

    return _record("l1_loss", out, (pred, target), backward)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(), dtype=x.dtype)
    return _record("sum", out, (x,), lambda g: (np.full_like(x.data, g.reshape(())),))
