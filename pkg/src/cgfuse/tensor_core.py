"""Dense tensors with a reverse-mode differentiation tape.

Every op computes its forward value with numpy and, when a :class:`Tape` is
active and some input requires gradients, records a closure that maps the
output gradient to input gradients.  :func:`backward` replays the tape in
reverse recording order.

Training runs in float32.  :func:`precision` switches the dtype used for newly
created tensors, which the finite-difference checks use to run the very same
code path in float64.
"""
from __future__ import annotations

import contextlib
import hashlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_DTYPE: type = np.float32
_TAPES: list["Tape"] = []


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


def default_dtype():
    return _DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, other)
        return mul(self, other)

    __rmul__ = __mul__


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=_DTYPE), requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return tensor(data, requires_grad=True, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Operations recorded in execution order."""

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def _result(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.records.append(_Record(op, inputs, out, bwd))
    return out


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) through the active tape.

    Returns a map from parameter to gradient.  When ``params`` is given every
    listed parameter appears in the map (zeros if the loss does not reach it);
    otherwise all reached leaf tensors are returned.  Gradients are also stored
    on ``.grad``.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    if tape is None:
        raise RuntimeError("backward called with no active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced: set[int] = set()
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        produced.add(id(rec.out))
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            leaves.setdefault(key, t)
    out: dict[Tensor, np.ndarray] = {}
    if params is None:
        for key, t in leaves.items():
            if key not in produced and key in grads:
                out[t] = grads[key]
    else:
        for p in params:
            g = grads.get(id(p))
            out[p] = g if g is not None else np.zeros_like(p.data)
    for t, g in out.items():
        t.grad = g
    return out


# ---------------------------------------------------------------------------
# ops


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE))


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, k) @ (k, m) or batched (B, n, k) @ (B, k, m)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        b.ndim > 2 and a.shape[:-2] != b.shape[:-2]
    ):
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and av.ndim > 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _result("matmul", av @ bv, (a, b), bwd)


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; ``b`` may be a row vector broadcast over leading axes."""
    b = _as_tensor(b)
    if a.shape != b.shape and not (b.ndim == 1 and a.shape[-1:] == b.shape):
        raise ShapeMismatch(f"add: {a.shape} + {b.shape}")
    bshape = b.shape

    def bwd(g):
        return g, (_sum_to(g, bshape) if b.requires_grad else None)

    return _result("add", a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, mul_scalar(b, -1.0))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may also be a trailing-singleton column."""
    b = _as_tensor(b)
    ok = a.shape == b.shape or (b.ndim == a.ndim and b.shape[-1] == 1 and b.shape[:-1] == a.shape[:-1])
    if not ok:
        raise ShapeMismatch(f"mul: {a.shape} * {b.shape}")
    av, bv, bshape = a.data, b.data, b.shape

    def bwd(g):
        ga = g * bv if a.requires_grad else None
        gb = _sum_to(g * av, bshape) if b.requires_grad else None
        return ga, gb

    return _result("mul", av * bv, (a, b), bwd)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result("mul_scalar", a.data * c, (a,), lambda g: (g * c,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeMismatch(f"concat: {ref} vs {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _result("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bwd)


def slice_(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    ax = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[ax]:
        raise ShapeMismatch(f"slice: [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    idx = (slice(None),) * ax + (slice(start, stop),)
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _result("slice", a.data[idx], (a,), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        value = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: {old} -> {tuple(shape)}") from exc
    return _result("reshape", value, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def _segment_sum(values: np.ndarray, index: np.ndarray, num_rows: int) -> np.ndarray:
    """Row-wise scatter-add with a fixed (stable-sorted) reduction order."""
    out = np.zeros((num_rows,) + values.shape[1:], dtype=values.dtype)
    if index.size == 0:
        return out
    order = np.argsort(index, kind="stable")
    sidx = index[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    out[sidx[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeMismatch(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range for table of {table.shape[0]} rows")
    n = table.shape[0]

    def bwd(g):
        flat = g.reshape(-1, g.shape[-1])
        return (_segment_sum(flat, ids.reshape(-1), n),)

    return _result("embedding_lookup", table.data[ids], (table,), bwd)


gather_rows = embedding_lookup


def scatter_add_rows(src: Tensor, index, num_rows: int) -> Tensor:
    """out[index[i]] += src[i]."""
    index = np.asarray(index, dtype=np.int64)
    if src.ndim != 2 or index.shape != (src.shape[0],):
        raise ShapeMismatch(f"scatter_add_rows: src {src.shape} with index {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= num_rows):
        raise IndexError("scatter_add_rows: index out of range")
    return _result("scatter_add_rows", _segment_sum(src.data, index, num_rows), (src,),
                   lambda g: (g[index],))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    dt = x.dtype.type
    x2 = x * x
    inner = dt(_GELU_C) * (x + dt(0.044715) * x2 * x)
    t = np.tanh(inner)
    out = dt(0.5) * x * (dt(1) + t)

    def bwd(g):
        dinner = dt(_GELU_C) * (dt(1) + dt(3 * 0.044715) * x2)
        return (g * (dt(0.5) * (dt(1) + t) + dt(0.5) * x * (dt(1) - t * t) * dinner),)

    return _result("gelu", out, (a,), bwd)


def identity(a: Tensor) -> Tensor:
    return a


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    p = (e / np.where(s == 0, 1, s)).astype(a.data.dtype)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result("softmax", p, (a,), bwd)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm: input {a.shape}, gamma {gamma.shape}, beta {beta.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gx = None
        if a.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        gg = (flat_g * xhat.reshape(-1, d)).sum(axis=0) if gamma.requires_grad else None
        gb = flat_g.sum(axis=0) if beta.requires_grad else None
        return gx, gg, gb

    return _result("layer_norm", out, (a, gamma, beta), bwd)


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean token cross-entropy over rows whose target is not ``ignore_index``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape}, targets {targets.shape}")
    x = logits.data
    keep = np.ones(len(targets), dtype=bool) if ignore_index is None else targets != ignore_index
    count = max(int(keep.sum()), 1)
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    logp = x - m - np.log(s)
    rows = np.flatnonzero(keep)
    loss = -logp[rows, targets[rows]].sum() / count
    dt = x.dtype.type

    def bwd(g):
        p = e / s
        p[rows, targets[rows]] -= 1
        p[~keep] = 0
        return (p * (dt(g.reshape(-1)[0]) / dt(count)),)

    return _result("cross_entropy", np.asarray(loss, dtype=x.dtype), (logits,), bwd)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result("sum", np.asarray(a.data.sum(axis=axis), dtype=a.data.dtype), (a,), bwd)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul_scalar(sum_(a, axis), 1.0 / n)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / a.data.dtype.type(1.0 - p)
    return _result("dropout", a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """In-place Adam update of every parameter that has a gradient entry."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name in sorted(grads):
        p, g = params[name], grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"adam_step: {name} param {p.shape} vs grad {g.shape}")
        dt = p.data.dtype.type
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dt(beta1)
        m += dt(1 - beta1) * g
        v *= dt(beta2)
        v += dt(1 - beta2) * (g * g)
        mhat = m / dt(bc1)
        vhat = v / dt(bc2)
        p.data -= dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))
    return state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for _, g in sorted(grads.items()))))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-6)
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(scale)
    return total


# ---------------------------------------------------------------------------
# rng


def rng_for(seed: int, *names: str | int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and a stream name."""
    h = hashlib.sha256(repr((int(seed),) + tuple(names)).encode()).digest()
    key = int.from_bytes(h[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def init_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(_DTYPE)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"CGFT"
_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray | Tensor]) -> None:
    """Named-tensor container: header, then (name, shape, little-endian f32)."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", _VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = tensors[name]
            arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise CheckpointError("not a checkpoint file")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            out[name] = arr.astype(np.float32)
    except CheckpointError:
        raise
    except (struct.error, ValueError) as exc:
        raise CheckpointError("truncated checkpoint") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes in checkpoint")
    return out


# ---------------------------------------------------------------------------
# finite differences


def finite_difference(fn: Callable[[], Tensor], wrt: Tensor, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``fn()`` with respect to ``wrt``."""
    grad = np.zeros(wrt.shape, dtype=np.float64)
    flat = wrt.data.reshape(-1)
    g = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn().data)
            flat[i] = orig - eps
            lo = float(fn().data)
            flat[i] = orig
            g[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3) -> float:
    """Worst relative error between tape gradients and central differences."""
    with Tape():
        loss = fn()
        analytic = backward(loss, params)
    worst = 0.0
    for p in params:
        numeric = finite_difference(fn, p, eps)
        worst = max(worst, relative_error(analytic[p], numeric))
    return worst
