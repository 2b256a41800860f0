"""Dense tensors with tape-based reverse-mode differentiation.

Only the primitives the harmonization networks need are provided: 3D
convolution and its transpose, ReLU, addition, scaling, channel concatenation,
a convex blend of two tensors and the mean squared error.

Operations record themselves on the tape that is active in the current
context (``with Tape() as tape:``); outside a tape they are plain numpy
computations. Arrays are float32 unless a tensor is built with
``dtype=np.float64`` (used by the gradient checks).
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _backend

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "mspharm_active_tape", default=None
)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf turned up where finite values are required."""


class TapeError(RuntimeError):
    """Backward was requested for something the tape did not record."""


class Tensor:
    """N-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dtype = np.float32 if dtype is None else np.dtype(dtype)
        arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, factor: float) -> "Tensor":
        return scale(self, factor)

    __rmul__ = __mul__


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single element, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, np.ndarray) and x.dtype == np.float64:
        dtype = np.float64
    return Tensor(x, dtype=dtype)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class Tape:
    """Ordered log of differentiable operations.

    Single writer. Use as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def op_names(self) -> list[str]:
        return [r.name for r in self.records]

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _emit(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        tape.records.append(_Record(out, inputs, vjp, name))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every tensor that ``loss`` depends on.

    Gradients of leaf tensors accumulate across calls; intermediate tensors
    receive fresh buffers.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if not any(r.out is loss for r in tape.records):
        raise TapeError("loss was not produced under this tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    produced = {id(r.out) for r in tape.records}
    for rec in reversed(tape.records):
        g = pending.pop(id(rec.out), None)
        if g is None:
            continue
        rec.out.grad = g
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in pending:
                pending[key] = pending[key] + gi
            else:
                pending[key] = gi
                owners[key] = inp
    for key, g in pending.items():
        leaf = owners[key]
        if key in produced:
            leaf.grad = g
        elif leaf.grad is None:
            leaf.grad = g.copy()
        else:
            leaf.grad = leaf.grad + g


# ---------------------------------------------------------------------------
# convolution


def _check_dtypes(*ts: Tensor) -> None:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise TypeError(f"dtype mismatch: {dt} vs {t.dtype}")


def conv_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n - k + 2 * pad) // stride + 1


def transposed_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n - 1) * stride - 2 * pad + k


def _batched(x: Tensor, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x.data[None], True
    if x.ndim == 5:
        return x.data, False
    raise ShapeError(f"{name}: expected [C,X,Y,Z] or [N,C,X,Y,Z], got {x.shape}")


def _pad5(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return np.ascontiguousarray(a)
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))


def _crop5(a: np.ndarray, pad: int, dims) -> np.ndarray:
    X, Y, Z = dims
    return np.ascontiguousarray(a[:, :, pad:pad + X, pad:pad + Y, pad:pad + Z])


def _check_kernel(kernel: Tensor, bias: Tensor, stride: int, pad: int, name: str) -> int:
    if kernel.ndim != 5 or not (kernel.shape[2] == kernel.shape[3] == kernel.shape[4]):
        raise ShapeError(f"{name}: kernel must be [A,B,k,k,k], got {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"{name}: need stride >= 1 and pad >= 0, got {stride}, {pad}")
    return kernel.shape[2]


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate ``x`` with ``kernel`` (no flip), zero padding.

    ``x`` is ``[C_in,X,Y,Z]`` or batched ``[N,C_in,X,Y,Z]``; ``kernel`` is
    ``[C_out,C_in,k,k,k]``; ``bias`` is ``[C_out]``.
    """
    k = _check_kernel(kernel, bias, stride, pad, "conv3d")
    _check_dtypes(x, kernel, bias)
    x5, squeeze = _batched(x, "conv3d")
    n, cin, X, Y, Z = x5.shape
    cout = kernel.shape[0]
    if kernel.shape[1] != cin:
        raise ShapeError(f"conv3d: input has {cin} channels, kernel expects {kernel.shape[1]}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({cout},)")
    out_dims = tuple(conv_output_extent(d, k, stride, pad) for d in (X, Y, Z))
    if min(out_dims) < 1 or k > min(X, Y, Z) + 2 * pad:
        raise ShapeError(f"conv3d: non-positive output extent {out_dims} for input {x5.shape[2:]}")

    xp = _pad5(x5, pad)
    wmat = kernel.data.reshape(cout, -1)
    out = np.empty((n, cout) + out_dims, dtype=x5.dtype)
    # one batch element at a time keeps the gathered columns cache resident;
    # the backward pass regathers them instead of holding them in memory
    for i in range(n):
        res = wmat @ _backend.vol2col(xp[i:i + 1], k, stride, *out_dims)
        res += bias.data[:, None]
        out[i] = res.reshape(cout, *out_dims)
    if squeeze:
        out = out[0]

    def vjp(g):
        g5 = g[None] if squeeze else g
        dw = np.zeros_like(wmat)
        dxp = np.empty_like(xp) if x.requires_grad else None
        for i in range(n):
            gmat = g5[i].reshape(cout, -1)
            dw += gmat @ _backend.vol2col(xp[i:i + 1], k, stride, *out_dims).T
            if dxp is not None:
                dxp[i] = _backend.col2vol(wmat.T @ gmat, 1, cin, *xp.shape[2:], k, stride, *out_dims)[0]
        db = g5.sum(axis=(0, 2, 3, 4))
        dx = None
        if dxp is not None:
            dx = _crop5(dxp, pad, (X, Y, Z))
            if squeeze:
                dx = dx[0]
        return dx, dw.reshape(kernel.shape), db

    return _emit("conv3d", out, (x, kernel, bias), vjp)


def transposed_conv3d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of :func:`conv3d` plus bias.

    ``kernel`` is ``[C_in,C_out,k,k,k]``; each output extent is
    ``(n - 1) * stride - 2 * pad + k``.
    """
    k = _check_kernel(kernel, bias, stride, pad, "transposed_conv3d")
    _check_dtypes(x, kernel, bias)
    x5, squeeze = _batched(x, "transposed_conv3d")
    n, cin, X, Y, Z = x5.shape
    cout = kernel.shape[1]
    if kernel.shape[0] != cin:
        raise ShapeError(f"transposed_conv3d: input has {cin} channels, kernel expects {kernel.shape[0]}")
    if bias.shape != (cout,):
        raise ShapeError(f"transposed_conv3d: bias shape {bias.shape} != ({cout},)")
    out_dims = tuple(transposed_output_extent(d, k, stride, pad) for d in (X, Y, Z))
    if min(out_dims) < 1:
        raise ShapeError(f"transposed_conv3d: non-positive output extent {out_dims}")
    full = tuple((d - 1) * stride + k for d in (X, Y, Z))

    wmat = kernel.data.reshape(cin, -1)
    fullvol = np.empty((n, cout) + full, dtype=x5.dtype)
    for i in range(n):
        cols = wmat.T @ x5[i].reshape(cin, -1)
        fullvol[i] = _backend.col2vol(cols, 1, cout, *full, k, stride, X, Y, Z)[0]
    out = _crop5(fullvol, pad, out_dims)
    out += bias.data.reshape(1, cout, 1, 1, 1)
    if squeeze:
        out = out[0]

    def vjp(g):
        g5 = g[None] if squeeze else g
        gfull = np.zeros((n, cout) + full, dtype=g5.dtype)
        gfull[:, :, pad:pad + out_dims[0], pad:pad + out_dims[1], pad:pad + out_dims[2]] = g5
        dw = np.zeros_like(wmat)
        dx5 = np.empty_like(x5) if x.requires_grad else None
        for i in range(n):
            gcols = _backend.vol2col(gfull[i:i + 1], k, stride, X, Y, Z)
            dw += x5[i].reshape(cin, -1) @ gcols.T
            if dx5 is not None:
                dx5[i] = (wmat @ gcols).reshape(cin, X, Y, Z)
        db = g5.sum(axis=(0, 2, 3, 4))
        dx = None
        if dx5 is not None:
            dx = dx5[0] if squeeze else dx5
        return dx, dw.reshape(kernel.shape), db

    return _emit("transposed_conv3d", out, (x, kernel, bias), vjp)


# ---------------------------------------------------------------------------
# elementwise


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data.dtype.type(0))
    return _emit("relu", out, (x,), lambda g: (g * pos,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    _check_dtypes(a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.dtype.type(factor)
    return _emit("scale", a.data * f, (a,), lambda g: (g * f,))


def mul_const(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant array of the same shape (e.g. a weight mask)."""
    m = np.asarray(mask, dtype=a.dtype)
    if m.shape != a.shape:
        raise ShapeError(f"mul_const: shape mismatch {a.shape} vs {m.shape}")
    return _emit("mul_const", a.data * m, (a,), lambda g: (g * m,))


def linear_blend(a: Tensor, b: Tensor, alpha: float) -> Tensor:
    """Return ``(1 - alpha) * a + alpha * b`` for ``alpha`` in [0, 1]."""
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"linear_blend: alpha must lie in [0, 1], got {alpha}")
    _same_shape(a, b, "linear_blend")
    _check_dtypes(a, b)
    t = a.dtype.type
    wa, wb = t(1.0 - alpha), t(alpha)
    out = wa * a.data + wb * b.data
    return _emit("linear_blend", out, (a, b), lambda g: (g * wa, g * wb))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (the channel axis of unbatched data)."""
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    _check_dtypes(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return [np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis)]

    return _emit("concat", out, tuple(tensors), vjp)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    target = as_tensor(target, dtype=pred.dtype)
    _same_shape(pred, target, "mse_loss")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    n = diff.size
    value = np.asarray(np.dot(diff.ravel(), diff.ravel()) / n, dtype=pred.dtype)

    def vjp(g):
        base = (diff * (2.0 * float(g) / n)).astype(pred.dtype)
        return base, -base

    return _emit("mse_loss", value, (pred, target), vjp)


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    """Raise :class:`NonFiniteError` if ``t`` holds any NaN or Inf."""
    if not np.all(np.isfinite(t.data)):
        bad = int(np.count_nonzero(~np.isfinite(t.data)))
        raise NonFiniteError(f"{what}: {bad} non-finite element(s)")
    return t
