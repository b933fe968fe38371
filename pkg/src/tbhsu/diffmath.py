"""Dense float64 tensors with reverse-mode gradients.

A deliberately small engine: each op records its parents and a closure that
maps the output gradient to parent gradients.  ``Tensor.backward`` walks the
graph in reverse topological order.  Broadcasting follows numpy; gradients are
summed back to each operand's shape.
"""

from __future__ import annotations

import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import NonFiniteValue, ParseError, ShapeMismatch, TargetOutOfRange

QUICK_GELU_SCALE = 1.702
INIT_STD = 0.02

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue("tensor values must be finite")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue("operation produced non-finite values")
    out.data = data
    out.grad = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight + bias with weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def index(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(a.data[idx]), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; identical to one-hot(ids) @ table."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _result(table.data[ids], (table,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def quick_gelu(x: Tensor) -> Tensor:
    """x * sigmoid(1.702 x)."""
    s = _sigmoid(QUICK_GELU_SCALE * x.data)

    def backward(g):
        return (g * (s + QUICK_GELU_SCALE * x.data * s * (1.0 - s)),)

    return _result(x.data * s, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by gamma and shift by beta."""
    d = x.shape[-1]
    if d < 1 or gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm over {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    safe = np.where(std > 0, std, 1.0)
    xhat = np.where(std > 0, xc / safe, 0.0)

    def backward(g):
        gx = g * gamma.data
        gin = (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)) / safe
        gin = np.where(std > 0, gin, 0.0)
        red = tuple(range(g.ndim - 1))
        return gin, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def masked_softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; masked-out (False) positions get exactly zero weight."""
    logits = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
        logits = np.where(mask, logits, -np.inf)
    m = logits.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(logits - m)
    z = e.sum(axis=-1, keepdims=True)
    s = e / np.where(z > 0, z, 1.0)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), backward)


def softmax_cross_entropy_sum(
    logits: Tensor, targets: np.ndarray, weights: Optional[np.ndarray] = None, ignore_index: int = -1
) -> Tensor:
    """Weighted sum of per-row cross-entropies over the last axis.

    Rows whose target equals ``ignore_index`` contribute nothing.
    """
    k = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeMismatch(f"targets {targets.shape} vs logits {logits.shape}")
    valid = targets != ignore_index
    if np.any((targets[valid] < 0) | (targets[valid] >= k)):
        raise TargetOutOfRange(f"target outside [0, {k})")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    w = np.where(valid, w, 0.0)
    safe_t = np.where(valid, targets, 0)

    m = logits.data.max(axis=-1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, safe_t[..., None], axis=-1)[..., 0]
    per_row = lse - picked
    total = np.asarray((w * per_row).sum())

    def backward(g):
        p = np.exp(shifted - lse[..., None])
        np.put_along_axis(p, safe_t[..., None], np.take_along_axis(p, safe_t[..., None], axis=-1) - 1.0, axis=-1)
        return (g * w[..., None] * p,)

    return _result(total, (logits,), backward)


def softmax_cross_entropy(logits, target: int) -> Tensor:
    """-log softmax(logits)[target] for a single logit vector."""
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeMismatch("expected a 1-D logit vector")
    if not 0 <= target < logits.shape[0]:
        raise TargetOutOfRange(f"target {target} outside [0, {logits.shape[0]})")
    return softmax_cross_entropy_sum(logits, np.asarray(target))


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def multi_head_attention(
    x: Tensor,
    mask: Optional[np.ndarray],
    params: dict,
    n_heads: int,
    return_weights: bool = False,
):
    """Scaled dot-product self-attention over token rows.

    ``x`` is (T, D) or (B, T, D); ``mask`` is (T,) or (B, T) with True on valid
    tokens.  ``params`` holds ``w_qkv`` (D, 3D), ``b_qkv`` (3D,), ``w_out``
    (D, D) and ``b_out`` (D,).
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
        mask = None if mask is None else np.asarray(mask)[None]
    b, t, d = x.shape
    if d % n_heads:
        raise ShapeMismatch(f"width {d} not divisible by {n_heads} heads")
    if params["w_qkv"].shape != (d, 3 * d) or params["w_out"].shape != (d, d):
        raise ShapeMismatch("attention projection shapes do not match input width")
    dh = d // n_heads

    qkv = linear(x, params["w_qkv"], params["b_qkv"])
    qkv = transpose(reshape(qkv, (b, t, 3, n_heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    key_mask = None if mask is None else np.asarray(mask, dtype=bool)[:, None, None, :]
    weights = masked_softmax(scores, key_mask)
    heads = matmul(weights, v)
    merged = reshape(transpose(heads, (0, 2, 1, 3)), (b, t, d))
    out = linear(merged, params["w_out"], params["b_out"])
    if squeeze:
        out = reshape(out, (t, d))
    if return_weights:
        w = weights.data[0] if squeeze else weights.data
        return out, w
    return out


class ParamStore:
    """Named parameters with insertion-ordered, deterministic iteration."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in self._params.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, t in self._params.items():
            out.add(n, Tensor(t.data.copy()))
        return out

    def to_bytes(self) -> bytes:
        return dump_tensors({n: t.data for n, t in self._params.items()})

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamStore":
        out = cls()
        for n, arr in load_tensors(blob).items():
            out.add(n, Tensor(arr))
        return out


def init_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape))


CHECKPOINT_MAGIC = b"TBHSUTNS"
CHECKPOINT_VERSION = 1


def dump_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    """Serialize named float64 arrays: magic, version, count, then per tensor
    name length/name, rank, dims, little-endian data."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def load_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ParseError("not a tensor checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    try:
        version, count = struct.unpack_from("<II", blob, pos)
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"unsupported checkpoint version {version}")
        pos += 8
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            out[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise ParseError("truncated checkpoint") from exc
    return out


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst_param: str
    worst_index: tuple
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    f: Callable[[], Tensor],
    params: ParamStore,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
    abs_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` with central differences.

    Relative error is |a - n| / max(|a|, |n|); coordinates where both
    magnitudes are below ``abs_floor`` are scored by absolute error over the
    floor.  With ``max_coords`` set, that many coordinates are sampled
    uniformly over all parameters.
    """
    params.zero_grad()
    f().backward()
    analytic = params.grads()

    coords = [(n, i) for n, t in params.items() for i in range(t.data.size)]
    if max_coords is not None and max_coords < len(coords):
        pick = np.random.default_rng(seed).choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = (0.0, "", ())
    with no_grad():
        for name, flat in coords:
            t = params[name]
            idx = np.unravel_index(flat, t.shape)
            orig = t.data[idx]
            t.data[idx] = orig + h
            fp = f().item()
            t.data[idx] = orig - h
            fm = f().item()
            t.data[idx] = orig
            numeric = (fp - fm) / (2 * h)
            a = analytic[name][idx]
            denom = max(abs(a), abs(numeric), abs_floor)
            err = abs(a - numeric) / denom
            if err > worst[0]:
                worst = (err, name, tuple(int(v) for v in idx))
    return GradCheckReport(worst[0], len(coords), worst[1], worst[2], tol)
