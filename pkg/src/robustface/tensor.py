"""Dense tensors with tape-based reverse-mode differentiation.

Tensors wrap read-only numpy arrays (float32 by default). Gradients are never
stored on tensors: operations executed inside an active :class:`Tape` are
recorded, and :meth:`Tape.gradient` replays them backwards and returns fresh
arrays. A tape can be replayed once unless created with ``persistent=True``.

Broadcasting is deliberately limited to scalar-with-tensor and equal shapes;
row-vector operands (biases, normalisation affines) go through the explicit
``add_rowvec``/``mul_rowvec`` operations.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, TapeError

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "as_tensor",
    "detach",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "relu",
    "clamp",
    "exp",
    "log",
    "sqrt",
    "matmul",
    "add_rowvec",
    "mul_rowvec",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "take_rows",
    "l2_normalize",
    "cosine_sim",
    "squared_distance",
    "masked_logsumexp",
    "layer_norm",
    "value_and_grad",
    "grad_check",
    "float64_mode",
    "deterministic",
    "set_deterministic",
    "get_dtype",
]

_float64_depth = 0
_pin_threads = True
_tapes: list["Tape"] = []


def get_dtype():
    return np.float64 if _float64_depth else np.float32


@contextlib.contextmanager
def float64_mode():
    """Create and compute every tensor in 64-bit within this block."""
    global _float64_depth
    _float64_depth += 1
    try:
        yield
    finally:
        _float64_depth -= 1


def set_deterministic(flag: bool) -> bool:
    """Globally enable or disable thread pinning in :func:`deterministic`; returns the previous value."""
    global _pin_threads
    previous, _pin_threads = _pin_threads, bool(flag)
    return previous


@contextlib.contextmanager
def deterministic():
    """Pin BLAS to a single thread so repeated runs are bitwise identical."""
    if not _pin_threads:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=get_dtype())
        _check_finite(arr, "tensor construction")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, op: str) -> "Tensor":
        arr = np.asarray(arr, dtype=get_dtype())
        _check_finite(arr, op)
        if arr.flags.writeable:
            arr.flags.writeable = False
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        return out

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced a non-finite value")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: Tensor) -> Tensor:
    return Tensor._wrap(x.data, False, "detach")


# ---------------------------------------------------------------------------
# Tape


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray, tuple[bool, ...]], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations executed inside ``with Tape():``.

    Example::

        with Tape() as tape:
            loss = sum(mul(x, x))
        (dx,) = tape.gradient(loss, [x])
    """

    def __init__(self, persistent: bool = False):
        self.persistent = persistent
        self._records: list[_Record] = []
        self._replayed = False

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self._records)

    def reset(self) -> None:
        self._records = []
        self._replayed = False

    def gradient(self, loss: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """Return dLoss/dSource for every source (zeros when unconnected)."""
        sources = list(sources)
        if self._replayed and not self.persistent:
            raise TapeError("tape was already replayed; reset it or use persistent=True")
        if loss.data.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        self._replayed = True

        source_ids = {id(s) for s in sources}
        reach = set(source_ids)
        for rec in self._records:
            if any(id(t) in reach for t in rec.inputs):
                reach.add(id(rec.out))

        grads: dict[int, np.ndarray] = {}
        if id(loss) in reach:
            grads[id(loss)] = np.ones_like(loss.data)
            for rec in reversed(self._records):
                key = id(rec.out)
                g = grads.get(key) if key in source_ids else grads.pop(key, None)
                if g is None:
                    continue
                needs = tuple(id(t) in reach for t in rec.inputs)
                if not any(needs):
                    continue
                for inp, need, gi in zip(rec.inputs, needs, rec.backward(g, needs)):
                    if not need or gi is None:
                        continue
                    k = id(inp)
                    grads[k] = grads[k] + gi if k in grads else gi

        result = []
        for s in sources:
            g = grads.get(id(s))
            if g is None:
                g = np.zeros_like(s.data)
            g = np.asarray(g, dtype=s.data.dtype)
            _check_finite(g, "backward")
            result.append(g)
        if not self.persistent:
            self._records = []
        return result


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if out.requires_grad and _tapes:
        _tapes[-1]._records.append(_Record(out, inputs, backward))
    return out


def _result(arr, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    rg = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, rg, op)
    return _record(out, inputs, backward)


def value_and_grad(fn: Callable[..., Tensor], *sources: Tensor) -> tuple[Tensor, list[np.ndarray]]:
    with Tape() as tape:
        loss = fn(*sources)
    return loss, tape.gradient(loss, sources)


# ---------------------------------------------------------------------------
# Elementwise


def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")

    def backward(g, needs):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")

    def backward(g, needs):
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")

    def backward(g, needs):
        ga = _unbroadcast(g * b.data, a) if needs[0] else None
        gb = _unbroadcast(g * a.data, b) if needs[1] else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g, needs: (-g,), "neg")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _result(x.data * c, (x,), lambda g, needs: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0), (x,), lambda g, needs: (g * mask,), "relu")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} > hi={hi}")
    inside = (x.data > lo) & (x.data < hi)
    out = np.clip(x.data, lo, hi)
    return _result(out, (x,), lambda g, needs: (g * inside,), "clamp")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _result(out, (x,), lambda g, needs: (g * out,), "exp")


def sqrt(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NumericError("sqrt of a non-positive value (gradient undefined)")
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g, needs: (g / (2 * out),), "sqrt")


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NumericError("log of a non-positive value")
    return _result(np.log(x.data), (x,), lambda g, needs: (g / x.data,), "log")


# ---------------------------------------------------------------------------
# Linear algebra and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g, needs):
        ga = g @ b.data.T if needs[0] else None
        gb = a.data.T @ g if needs[1] else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def _rowvec_check(x: Tensor, v: Tensor, op: str) -> None:
    if x.ndim != 2 or v.ndim != 1 or x.shape[1] != v.shape[0]:
        raise DimensionError(f"{op}: expected [m x n] and [n], got {x.shape} and {v.shape}")


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-n vector to every row of an [m x n] matrix."""
    _rowvec_check(x, v, "add_rowvec")
    return _result(x.data + v.data, (x, v), lambda g, needs: (g, g.sum(axis=0)), "add_rowvec")


def mul_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Scale every row of an [m x n] matrix elementwise by a length-n vector."""
    _rowvec_check(x, v, "mul_rowvec")

    def backward(g, needs):
        gx = g * v.data if needs[0] else None
        gv = (g * x.data).sum(axis=0) if needs[1] else None
        return gx, gv

    return _result(x.data * v.data, (x, v), backward, "mul_rowvec")


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    def backward(g, needs):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(x.data.sum(axis=axis), (x,), backward, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]

    def backward(g, needs):
        g = g / n
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(x.data.mean(axis=axis), (x,), backward, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from e
    return _result(out, (x,), lambda g, needs: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _result(x.data.T, (x,), lambda g, needs: (g.T,), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward, "concat")


def take_rows(x: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.intp)

    def backward(g, needs):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(x.data[index], (x,), backward, "take_rows")


# ---------------------------------------------------------------------------
# Fused operations used by the encoder and the losses


def l2_normalize(v: Tensor, eps: float = 1e-12, axis: int = -1) -> Tensor:
    """``v / max(||v||, eps)`` along ``axis`` (rows of a matrix, or a whole vector)."""
    if v.size == 0:
        raise DimensionError("l2_normalize of an empty tensor")
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    active = norm >= eps
    denom = np.where(active, norm, v.data.dtype.type(eps))
    y = v.data / denom

    def backward(g, needs):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(active, g - y * proj, g) / denom,)

    return _result(y, (v,), backward, "l2_normalize")


def cosine_sim(u: Tensor, v: Tensor, eps: float = 1e-12) -> Tensor:
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionError(f"cosine_sim expects two vectors of equal length, got {u.shape} and {v.shape}")
    return sum(mul(l2_normalize(u, eps), l2_normalize(v, eps)))


def squared_distance(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise squared Euclidean distance between two [m x d] matrices."""
    if a.shape != b.shape:
        raise DimensionError(f"squared_distance: shapes {a.shape} and {b.shape} differ")
    d = sub(a, b)
    return sum(mul(d, d), axis=-1)


def masked_logsumexp(s: Tensor, mask) -> Tensor:
    """Row-wise log-sum-exp of ``s`` over the entries where ``mask`` is true.

    Rows are shifted by their masked maximum before exponentiation.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != s.shape or s.ndim != 2:
        raise DimensionError(f"masked_logsumexp: scores {s.shape} vs mask {mask.shape}")
    if not mask.any(axis=1).all():
        raise DimensionError("masked_logsumexp: a row has no unmasked entries")
    x = s.data
    row_max = np.where(mask, x, -np.inf).max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, x - row_max, 0)), 0)
    total = e.sum(axis=1, keepdims=True)
    out = (row_max + np.log(total))[:, 0]
    soft = e / total

    def backward(g, needs):
        return (g[:, None] * soft,)

    return _result(out, (s,), backward, "masked_logsumexp")


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardisation of an [m x n] matrix (no affine part)."""
    if x.ndim != 2:
        raise DimensionError(f"layer_norm expects a matrix, got shape {x.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    inv_std = 1 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + x.data.dtype.type(eps))
    xhat = centered * inv_std

    def backward(g, needs):
        gm = g.mean(axis=1, keepdims=True)
        gx = (g * xhat).mean(axis=1, keepdims=True)
        return (inv_std * (g - gm - xhat * gx),)

    return _result(xhat, (x,), backward, "layer_norm")


# ---------------------------------------------------------------------------
# Gradient checking


def numerical_gradient(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar function, evaluated in float64."""
    with float64_mode():
        base = np.array(x.data, dtype=np.float64)
        grad = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(Tensor(base)).item()
            flat[i] = orig - step
            fm = f(Tensor(base)).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3) -> float:
    """Max relative error between the taped gradient of ``f`` at ``x`` and central differences.

    Both sides run in float64 so the comparison measures the gradient rules,
    not 32-bit rounding noise.
    """
    with float64_mode():
        x64 = Tensor(x.data, requires_grad=True)
        _, (analytic,) = value_and_grad(f, x64)
    numeric = numerical_gradient(f, x, step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
