"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value in the model is a `Tensor` wrapping a numpy float64 array.
Operations executed while gradients are enabled append a record to the
active tape; `backward(loss)` replays the tape in reverse and accumulates
dLoss/dX into `.grad` of every tensor with `requires_grad=True`.

Design constraints kept deliberately tight so backward rules stay auditable:

* all arithmetic in float64,
* broadcasting restricted to scalar operands and leading-axis broadcast
  (the shorter shape must match the trailing axes of the longer one),
* anything fancier (softmax, layernorm, bilinear sampling) is a fused op
  with a hand-derived backward.
"""

from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

# When enabled every op asserts its output is finite. Slow; used in tests.
DEBUG_FINITE = False


class TensorError(ValueError):
    """Contract violation in a tensor operation."""


# ---------------------------------------------------------------------------
# tape


class _OpRecord:
    __slots__ = ("inputs", "out", "backward_fn")

    def __init__(self, inputs, out, backward_fn):
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops, walked once in reverse by backward()."""

    def __init__(self):
        self.records: list[_OpRecord] = []

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records.clear()


_tape_stack: list[Tape] = [Tape()]
_grad_enabled: bool = True


def active_tape() -> Tape:
    return _tape_stack[-1]


def clear_tape() -> None:
    active_tape().clear()


@contextlib.contextmanager
def fresh_tape():
    """Run a computation on its own tape (used by grad_check and training steps)."""
    _tape_stack.append(Tape())
    try:
        yield _tape_stack[-1]
    finally:
        _tape_stack.pop()


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def grad_enabled() -> bool:
    return _grad_enabled


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Trainable tensor initialized uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(max(1, fan_in))
    return parameter(rng.uniform(-bound, bound, size=shape))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# op plumbing


def _record(inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    if DEBUG_FINITE and not np.all(np.isfinite(out_data)):
        raise TensorError("non-finite value produced by op")
    req = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    if req:
        active_tape().records.append(_OpRecord(inputs, out, backward_fn))
    return out


def _check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...]) -> None:
    """Allow equal shapes, scalar operands, or leading-axis broadcast.

    Leading-axis broadcast: the shorter shape may start with size-1 axes but
    must then match the longer shape's trailing axes exactly. Anything else
    (middle or trailing expansion) must be spelled out with repeat_axis.
    """
    if sa == sb:
        return
    if int(np.prod(sa)) == 1 or int(np.prod(sb)) == 1:
        return
    rank = max(len(sa), len(sb))
    pa = (1,) * (rank - len(sa)) + sa
    pb = (1,) * (rank - len(sb)) + sb

    def leading_only(s, o):
        seen_real = False
        for ds, do in zip(s, o):
            if ds == 1 and do != 1:
                if seen_real:
                    return False
            elif ds != 1:
                seen_real = True
                if do != 1 and do != ds:
                    return False
        return True

    if not (leading_only(pa, pb) and leading_only(pb, pa)):
        raise TensorError(f"unsupported broadcast {sa} vs {sb}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record((a, b), out, backward_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data - b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record((a, b), out, backward_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data * b.data

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record((a, b), out, backward_fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data / b.data

    def backward_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record((a, b), out, backward_fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record((a,), -a.data, lambda g: (-g,))


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = np.minimum(a.data, b.data)

    def backward_fn(g):
        take_a = (a.data <= b.data).astype(np.float64)
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * (1.0 - take_a), b.shape)

    return _record((a, b), out, backward_fn)


def maximum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = np.maximum(a.data, b.data)

    def backward_fn(g):
        take_a = (a.data >= b.data).astype(np.float64)
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * (1.0 - take_a), b.shape)

    return _record((a, b), out, backward_fn)


# ---------------------------------------------------------------------------
# unary maps


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    return _record((a,), a.data * mask, lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # stable in both tails
    out = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
                   np.exp(np.minimum(a.data, 0)) / (1.0 + np.exp(np.minimum(a.data, 0))))

    def backward_fn(g):
        return (g * out * (1.0 - out),)

    return _record((a,), out, backward_fn)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record((a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise TensorError("log of non-positive value")
    return _record((a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise TensorError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _record((a,), out, lambda g: (g * 0.5 / np.maximum(out, 1e-300),))


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    return _record((a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def pow_const(a, c: float) -> Tensor:
    """a**c for a constant exponent; defined for a >= 0 when c is fractional."""
    a = _as_tensor(a)
    out = np.power(a.data, c)

    def backward_fn(g):
        return (g * c * np.power(a.data, c - 1.0),)

    return _record((a,), out, backward_fn)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return _record((a,), out, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(np.float64),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(np.float64),)

    return _record((a,), out, backward_fn)


def tmean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# fused normalizers


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record((a,), out, backward_fn)


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise TensorError("layernorm gain/bias must match last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward_fn(g):
        dxhat = g * gain.data
        dvar = (dxhat * xc * (-0.5) * inv ** 3).sum(axis=-1, keepdims=True)
        dmu = (-dxhat * inv).sum(axis=-1, keepdims=True) + dvar * (-2.0 * xc).mean(axis=-1, keepdims=True)
        dx = dxhat * inv + dvar * 2.0 * xc / d + dmu / d
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        return dx, dgain, dbias

    return _record((x, gain, bias), out, backward_fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise TensorError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _record((a, b), out, backward_fn)


def bmm(a, b) -> Tensor:
    """Batched matmul over a shared leading axis: [B,m,k] @ [B,k,n] -> [B,m,n]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise TensorError(f"bmm shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward_fn(g):
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return _record((a, b), out, backward_fn)


# ---------------------------------------------------------------------------
# shape surgery


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _record((a,), out, lambda g: (g.reshape(a.shape),))


def permute(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record((a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(parts, out, backward_fn)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]

    def backward_fn(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return _record((a,), out, backward_fn)


def gather_rows(a, indices) -> Tensor:
    """Select rows (axis 0) by integer index; duplicate indices accumulate grads."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]

    def backward_fn(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record((a,), out, backward_fn)


def repeat_axis(a, axis: int, n: int) -> Tensor:
    """Repeat each slice along `axis` n times (explicit stand-in for middle-axis broadcast)."""
    a = _as_tensor(a)
    out = np.repeat(a.data, n, axis=axis)

    def backward_fn(g):
        shape = a.shape[:axis + 1] + (n,) + a.shape[axis + 1:]
        return (g.reshape(shape).sum(axis=axis + 1),)

    return _record((a,), out, backward_fn)


# ---------------------------------------------------------------------------
# structured ops for convolution and deformable sampling


def im2col(x, kernel: int, stride: int, pad: int) -> Tensor:
    """Unfold an [H,W,C] image into [(Ho*Wo), kernel*kernel*C] patch rows."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise TensorError("im2col expects [H,W,C]")
    h, w, c = x.shape
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (w + 2 * pad - kernel) // stride + 1
    if ho <= 0 or wo <= 0:
        raise TensorError("im2col output would be empty")
    padded = np.zeros((h + 2 * pad, w + 2 * pad, c))
    padded[pad:pad + h, pad:pad + w, :] = x.data
    cols = np.empty((ho, wo, kernel, kernel, c))
    for di in range(kernel):
        for dj in range(kernel):
            cols[:, :, di, dj, :] = padded[di:di + ho * stride:stride, dj:dj + wo * stride:stride, :]
    out = cols.reshape(ho * wo, kernel * kernel * c)

    def backward_fn(g):
        gc = g.reshape(ho, wo, kernel, kernel, c)
        gpad = np.zeros_like(padded)
        for di in range(kernel):
            for dj in range(kernel):
                gpad[di:di + ho * stride:stride, dj:dj + wo * stride:stride, :] += gc[:, :, di, dj, :]
        return (gpad[pad:pad + h, pad:pad + w, :],)

    return _record((x,), out, backward_fn)


def bilinear_gather(values, points, hw: tuple[int, int]) -> Tensor:
    """Bilinearly sample rows of a flattened [H*W, C] map at normalized (x, y) points.

    Pixel centers sit at ((j + 0.5)/W, (i + 0.5)/H); samples outside the map
    read zeros. Differentiable in both the map values and the points.
    """
    values, points = _as_tensor(values), _as_tensor(points)
    h, w = hw
    if values.ndim != 2 or values.shape[0] != h * w:
        raise TensorError(f"bilinear_gather values shape {values.shape} does not match hw {hw}")
    if points.ndim != 2 or points.shape[1] != 2:
        raise TensorError("bilinear_gather points must be [K,2]")
    u = points.data[:, 0] * w - 0.5
    v = points.data[:, 1] * h - 0.5
    j0 = np.floor(u).astype(np.int64)
    i0 = np.floor(v).astype(np.int64)
    fu = u - j0
    fv = v - i0

    corners = []
    for ii, jj, wt, dwu, dwv in (
        (i0, j0, (1 - fu) * (1 - fv), -(1 - fv), -(1 - fu)),
        (i0, j0 + 1, fu * (1 - fv), (1 - fv), -fu),
        (i0 + 1, j0, (1 - fu) * fv, -fv, (1 - fu)),
        (i0 + 1, j0 + 1, fu * fv, fv, fu),
    ):
        valid = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
        flat = np.where(valid, ii * w + jj, 0)
        val = values.data[flat] * valid[:, None]
        corners.append((flat, valid, wt, dwu, dwv, val))

    out = np.zeros((points.shape[0], values.shape[1]))
    for _, _, wt, _, _, val in corners:
        out += wt[:, None] * val

    def backward_fn(g):
        gv = np.zeros(values.shape)
        gp = np.zeros(points.shape)
        for flat, valid, wt, dwu, dwv, val in corners:
            np.add.at(gv, flat[valid], (wt[valid, None] * g[valid]))
            contrib = (val * g).sum(axis=1)
            gp[:, 0] += dwu * contrib * w
            gp[:, 1] += dwv * contrib * h
        return gv, gp

    return _record((values, points), out, backward_fn)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dX into .grad for every requires_grad tensor on the tape.

    The tape is walked exactly once in reverse execution order. Grads touched
    by this tape are zeroed first so repeated calls are reproducible.
    """
    if loss.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    if not tape.records:
        raise TensorError("backward on an empty tape")
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad:
                t.grad = None
        rec.out.grad = None
    loss.grad = np.ones(loss.shape)
    for rec in reversed(tape.records):
        gout = rec.out.grad
        if gout is None:
            continue
        grads = rec.backward_fn(gout)
        for t, g in zip(rec.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.zeros(t.shape)
            t.grad += g


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Compare analytic gradients of scalar-valued f against central differences.

    Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    with fresh_tape():
        out = f(probe)
        backward(out)
        analytic = np.zeros(probe.shape) if probe.grad is None else probe.grad.copy()
    numeric = np.zeros(probe.shape)
    flat = probe.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            hi = f(probe).item()
            flat[i] = keep - h
            lo = f(probe).item()
            flat[i] = keep
            nflat[i] = (hi - lo) / (2.0 * h)
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# key -> tensor checkpoint format

_MAGIC = b"TMAP\x01"


def save_tensors(path, entries: dict[str, "Tensor | np.ndarray"]) -> None:
    """Write a key->tensor map: shape headers plus little-endian float64 payloads."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(entries)))
        for name in sorted(entries):
            arr = entries[name]
            data = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8", order="C")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", data.ndim))
            for d in data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(data.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise TensorError(f"{path} is not a tensor map")
    off = len(_MAGIC)
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        out[name] = arr.astype(np.float64)
    if off != len(blob):
        raise TensorError(f"{path} has trailing bytes")
    return out
