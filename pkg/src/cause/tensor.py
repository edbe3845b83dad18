"""Small dense-array engine with reverse-mode automatic differentiation.

The op set is closed and deliberately small: exactly what the sequence
model, the contrastive loss and the bucket aggregation need.  Arrays are
plain numpy arrays; every op that touches a tracked tensor records a node
holding a closure that pushes the output gradient back to its inputs.
"""
from __future__ import annotations

import contextlib
import json
import math
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True
_CHECKED = False


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Run ops without recording tape nodes (inference, timing)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def checked():
    """Reject NaN/Inf at tensor creation while active."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = True
    try:
        yield
    finally:
        _CHECKED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if _CHECKED and not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a Python scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    tracked = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    if tracked:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    if _CHECKED and not np.all(np.isfinite(data)):
        raise ValueError("non-finite values produced by op")
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    # never update in place: ``g`` may be shared with a sibling input or be a view
    if t.grad is None:
        t.grad = g if g.dtype == t.data.dtype else g.astype(t.data.dtype)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_bias_shapes(op: str, a: Tensor, b: Tensor):
    # same shape, or one side is a trailing-dim row vector / scalar
    if a.shape == b.shape:
        return
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    if small.data.size == 1:
        return
    if small.ndim == 1 and big.ndim >= 1 and small.shape[0] == big.shape[-1]:
        return
    if a.ndim == b.ndim:
        # size-1 axes broadcast, as long as one operand already has the full shape
        full = tuple(max(x, y) for x, y in zip(a.shape, b.shape))
        if all(x in (1, y) for x, y in zip(a.shape, full)) and all(x in (1, y) for x, y in zip(b.shape, full)) \
                and full in (a.shape, b.shape):
            return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_bias_shapes("add", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_bias_shapes("sub", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_bias_shapes("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def bw(g):
        _accumulate(a, g * c)

    return _make(a.data * c, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU; smooth, so finite differences behave."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner
        _accumulate(a, g * d)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, gb)

    return _make(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------- reductions / shape

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    """Mean over ``axis``; ``mean(x, axis=0)`` is the row-mean of a matrix."""
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from exc

    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(out, (a,), bw)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accumulate(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), bw)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _make(out, ts, bw)


def slice_(a, index) -> Tensor:
    """Basic or integer-array indexing; gradient scatters back with accumulation."""
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        _accumulate(a, _scatter_add(a.shape, index, g, a.data.dtype))

    return _make(np.array(out, copy=True), (a,), bw)


def _is_basic(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in idx)


def _scatter_add(shape, index, g, dtype) -> np.ndarray:
    full = np.zeros(shape, dtype=dtype)
    if _is_basic(index):
        full[index] += g
        return full
    idx = index if isinstance(index, tuple) else (index,)
    if len(idx) == len(shape) and all(isinstance(i, np.ndarray) and i.dtype.kind in "iu" for i in idx):
        # pure advanced indexing: one bincount over flattened positions handles repeats
        b = np.broadcast_arrays(*idx)
        flat = np.ravel_multi_index(tuple(x.reshape(-1) for x in b), shape)
        full.reshape(-1)[:] = np.bincount(flat, weights=np.broadcast_to(g, b[0].shape).reshape(-1),
                                          minlength=full.size)
        return full
    np.add.at(full, index, g)
    return full


def gather(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` (embedding lookup); ids may be any int array."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather: table must be 2-D, got {table.shape}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"gather: ids out of range [0, {n})")
    out = table.data[ids]

    def bw(g):
        n_rows, d = table.shape
        flat = (ids.reshape(-1, 1) * d + np.arange(d)).reshape(-1)
        full = np.bincount(flat, weights=g.reshape(-1), minlength=n_rows * d)
        _accumulate(table, full.reshape(n_rows, d).astype(table.data.dtype, copy=False))

    return _make(out, (table,), bw)


# ---------------------------------------------------------------- normalisation

def softmax(a, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; ``mask`` (bool, True = keep) zeroes excluded entries.

    Rows with every entry masked come out as all zeros.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        out = np.where(np.asarray(mask, dtype=bool), x, np.array(-np.inf, dtype=x.dtype))
    else:
        out = x.copy()
    m = np.max(out, axis=axis, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    # in place: the attention score tensors are the largest arrays in the model
    np.subtract(out, m, out=out)
    np.exp(out, out=out)
    s = out.sum(axis=axis, keepdims=True)
    s[s == 0] = 1.0
    out /= s

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, out * (g - dot))

    return _make(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse

    def bw(g):
        p = np.exp(out)
        _accumulate(a, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), bw)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs width {d}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gx = g * gamma.data
            gx_mean = gx.mean(axis=-1, keepdims=True)
            gxx_mean = (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(a, inv * (gx - gx_mean - xhat * gxx_mean))

    return _make(out, (a, gamma, beta), bw)


# ---------------------------------------------------------------- attention

def causal_mask(length: int, key_valid: np.ndarray | None = None) -> np.ndarray:
    """Boolean keep-mask of shape (L, L), or (B, 1, L, L) with per-row key validity."""
    m = np.tril(np.ones((length, length), dtype=bool))
    if key_valid is None:
        return m
    key_valid = np.asarray(key_valid, dtype=bool)
    return m[None, None, :, :] & key_valid[:, None, None, :]


def scaled_dot_attention(q, k, v, mask) -> Tensor:
    """softmax(q kᵀ / sqrt(d) | mask) v over the last two axes."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    # scaling q is cheaper than scaling the (L, L) score matrix
    scores = matmul(scale(q, 1.0 / math.sqrt(d)), transpose(k, _swap_last(k.ndim)))
    return matmul(softmax(scores, mask=mask), v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ---------------------------------------------------------------- backward

def backward(loss: Tensor):
    """Populate ``.grad`` on every tracked leaf reachable from scalar ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior buffers are not needed after propagation
            node.grad = None if node._parents else node.grad


def finite_diff_check(f: Callable[[], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is a zero-argument closure returning a scalar tensor; ``x`` is a
    tensor (or list of tensors) it depends on.  Relative error per
    coordinate uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
    worst = 0.0
    with no_grad():
        for t, ga in zip(xs, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                denom = max(abs(gflat[i]), abs(num), 1e-8)
                worst = max(worst, abs(gflat[i] - num) / denom)
    return worst


# ---------------------------------------------------------------- checkpoint I/O

def save_tensors(path: str | Path, arrays: dict[str, np.ndarray]) -> Path:
    """Write ``<path>.bin`` (little-endian float32, concatenated) and ``<path>.json``.

    The manifest maps each name to its shape and byte offset.
    """
    path = Path(path)
    manifest = {}
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(np.asarray(arrays[name]), dtype="<f4")
            fh.write(arr.tobytes())
            manifest[name] = {"shape": list(arr.shape), "offset": offset}
            offset += arr.nbytes
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path.with_suffix(".bin")


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        manifest = json.load(fh)
    raw = path.with_suffix(".bin").read_bytes()
    out = {}
    for name, entry in manifest.items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=entry["offset"])
        out[name] = arr.reshape(shape).astype(np.float32)
    return out
