"""Dense rank-2 tensor autodiff and the scalar functions the model is built from.

Everything here operates on small row-major matrices (vectors are 1xd or dx1).
Gradients are computed by reverse-mode accumulation over an implicit tape:
each op records a closure that routes the output gradient to its inputs.
Forward evaluation is deterministic; values must stay finite (NaN/Inf after a
primitive is a contract violation and can be trapped with `debug_checks`).

Numeric conventions, fixed once for the whole package:
  * epsilon 1e-8 floored inside every log,
  * epsilon 1e-9 floored under softmax denominators (an all-masked row
    therefore comes out all-zero, which callers treat as a sentinel),
  * double precision by default, single precision opt-in for training builds.

Tensors are immutable values once produced; concurrent forward passes are
safe. Gradient accumulation into a ParameterStore is single-writer.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ComputationError, ContractError

LOG_EPS = 1e-8
SOFTMAX_EPS = 1e-9

# Flipped on by the test suite; verifies the all-values-finite invariant
# after every primitive at the cost of one extra pass per op.
debug_checks = False

_grad_enabled = True


class no_grad:
    """Context manager that disables tape construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(value, dtype=None):
    a = np.asarray(value)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    if dtype is not None and a.dtype != dtype:
        a = a.astype(dtype)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ContractError(f"tensors are rank-2, got shape {a.shape}")
    return a


class Tensor:
    """A rank-2 array plus an optional gradient slot and tape hooks."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad=False, _parents=(), _backward=None, name=None):
        self.value = value if isinstance(value, np.ndarray) and value.ndim == 2 else _as_array(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name
        if debug_checks and not np.isfinite(self.value).all():
            raise ComputationError(f"non-finite tensor{' ' + name if name else ''}")

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'set' if self.grad is not None else 'none'})"

    # -- tape -------------------------------------------------------------

    def backward(self):
        """Reverse-accumulate d(self)/d(leaf) into every reachable leaf's .grad."""
        if self.value.size != 1:
            raise ContractError("backward() requires a scalar loss")
        order = _toposort(self)
        self.grad = np.ones_like(self.value)
        for t in reversed(order):
            if t._backward is not None:
                t._backward(t.grad)
                # free intermediate grads/closures so batched tapes stay small
                t._backward = None
                t._parents = ()
                if not t.requires_grad or t.name is None:
                    t.grad = None

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0)) if isinstance(other, Tensor) else add(self, -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray):
    # Never in-place: the first assignment may alias a child's grad buffer.
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i in range(2) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


def _make(value, parents, backward, name=None) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(value, requires_grad=True, _parents=tuple(parents), _backward=backward, name=name)
    return Tensor(value, name=name)


def constant(value) -> Tensor:
    return Tensor(_as_array(value))


# -- elementwise arithmetic -------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        av = a.value
        out = av + b

        def bw(g):
            _accumulate(a, g)

        return _make(out, (a,), bw)
    out = a.value + b.value

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(g, b.value.shape))

    return _make(out, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.value * b

        def bw(g):
            _accumulate(a, g * b)

        return _make(out, (a,), bw)
    out = a.value * b.value

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.value, a.value.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.value.shape))

    return _make(out, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape[1] != b.value.shape[0]:
        raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.value @ b.value

    def bw(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    return _make(out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    out = np.ascontiguousarray(a.value.T)

    def bw(g):
        _accumulate(a, g.T)

    return _make(out, (a,), bw)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if axis not in (0, 1):
        raise ContractError("concat axis must be 0 or 1")
    out = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accumulate(t, g[lo:hi] if axis == 0 else g[:, lo:hi])

    return _make(out, tuple(tensors), bw)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    out = a.value[idx]

    def bw(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, idx, g)
        _accumulate(a, ga)

    return _make(out, (a,), bw)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    out = a.value[:, lo:hi].copy()

    def bw(g):
        ga = np.zeros_like(a.value)
        ga[:, lo:hi] = g
        _accumulate(a, ga)

    return _make(out, (a,), bw)


# -- reductions --------------------------------------------------------------

def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.value.sum(axis=axis, keepdims=True) if axis is not None else a.value.sum().reshape(1, 1)

    def bw(g):
        _accumulate(a, np.broadcast_to(g, a.value.shape).copy() if g.shape != a.value.shape else g)

    return _make(out, (a,), bw)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def tmax(a: Tensor, axis: int) -> Tensor:
    """Max along an axis (keepdims); ties route the gradient to the first hit."""
    arg = np.expand_dims(a.value.argmax(axis=axis), axis)
    out = np.take_along_axis(a.value, arg, axis=axis)

    def bw(g):
        ga = np.zeros_like(a.value)
        np.put_along_axis(ga, arg, g, axis=axis)
        _accumulate(a, ga)

    return _make(out, (a,), bw)


def segment_max(a: Tensor, starts: np.ndarray) -> Tensor:
    """Row-block max: block i is rows [starts[i], starts[i+1]); blocks non-empty."""
    starts = np.asarray(starts, dtype=np.intp)
    out = np.maximum.reduceat(a.value, starts[:-1], axis=0)
    args = np.empty_like(out, dtype=np.intp)
    for i, (lo, hi) in enumerate(zip(starts[:-1], starts[1:])):
        args[i] = a.value[lo:hi].argmax(axis=0) + lo

    def bw(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, (args.reshape(-1), np.tile(np.arange(a.value.shape[1]), out.shape[0])), g.reshape(-1))
        _accumulate(a, ga)

    return _make(out, (a,), bw)


# -- pointwise nonlinearities -------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)

    def bw(g):
        _accumulate(a, g * out)

    return _make(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    """log with the package-wide 1e-8 floor; clamped entries get zero gradient."""
    clipped = np.maximum(a.value, LOG_EPS)
    out = np.log(clipped)
    inside = a.value > LOG_EPS

    def bw(g):
        _accumulate(a, np.where(inside, g / clipped, 0.0))

    return _make(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    v = a.value
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.maximum(v, 0))), np.exp(np.minimum(v, 0)) / (1.0 + np.exp(np.minimum(v, 0))))

    def bw(g):
        _accumulate(a, g * out * (1.0 - out))

    return _make(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)

    def bw(g):
        _accumulate(a, g * (1.0 - out * out))

    return _make(out, (a,), bw)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.value <= b.value
    out = np.where(take_a, a.value, b.value)

    def bw(g):
        _accumulate(a, _unbroadcast(np.where(take_a, g, 0.0), a.value.shape))
        _accumulate(b, _unbroadcast(np.where(take_a, 0.0, g), b.value.shape))

    return _make(out, (a, b), bw)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.value >= b.value
    out = np.where(take_a, a.value, b.value)

    def bw(g):
        _accumulate(a, _unbroadcast(np.where(take_a, g, 0.0), a.value.shape))
        _accumulate(b, _unbroadcast(np.where(take_a, 0.0, g), b.value.shape))

    return _make(out, (a, b), bw)


# -- fused scalar functions ---------------------------------------------------

def softmax_rows(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax with an optional boolean keep-mask.

    Masked entries are exactly 0. Denominators carry a 1e-9 floor which only
    engages when a row has no unmasked entries; such rows come out all-zero
    (the caller-visible sentinel) instead of raising. Live rows match plain
    exp/normalize and sum to 1 within 1e-9.
    """
    v = logits.value
    if not np.isfinite(v).all():
        raise ComputationError("non-finite softmax logits")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != v.shape:
            raise ContractError(f"mask shape {mask.shape} != logits shape {v.shape}")
        shifted = np.where(mask, v, -np.inf)
        rowmax = shifted.max(axis=1, keepdims=True)
        rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
        e = np.where(mask, np.exp(v - rowmax), 0.0)
    else:
        e = np.exp(v - v.max(axis=1, keepdims=True))
    denom = np.maximum(e.sum(axis=1, keepdims=True), SOFTMAX_EPS)
    out = e / denom

    def bw(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        _accumulate(logits, out * (g - dot))

    return _make(out, (logits,), bw)


def smooth_l1(pred: Tensor | float, target) -> Tensor:
    """Elementwise smooth-L1: 0.5*x^2 for |x|<1 else |x|-0.5, x = pred-target."""
    if not isinstance(pred, Tensor):
        pred = constant(pred)
    t = _as_array(target)
    x = pred.value - t
    small = np.abs(x) < 1.0
    out = np.where(small, 0.5 * x * x, np.abs(x) - 0.5)

    def bw(g):
        _accumulate(pred, g * np.where(small, x, np.sign(x)))

    return _make(out, (pred,), bw)


def kl_rows(q: Tensor, p: Tensor) -> Tensor:
    """Mean over rows of sum_j q_ij * ln(q_ij / p_ij), with 1e-8 log floors.

    Both inputs are expected row-stochastic; the result is >= -1e-9 for any
    such pair and exactly 0 when q equals p.
    """
    if q.value.shape != p.value.shape:
        raise ContractError(f"kl_rows shape mismatch {q.shape} vs {p.shape}")
    qv, pv = q.value, p.value
    qc = np.maximum(qv, LOG_EPS)
    pc = np.maximum(pv, LOG_EPS)
    ratio = np.log(qc) - np.log(pc)
    rows = qv.shape[0]
    out = np.array([[float((qv * ratio).sum()) / rows]])

    def bw(g):
        s = float(g.reshape(-1)[0]) / rows
        _accumulate(q, s * (ratio + np.where(qv > LOG_EPS, qv / qc, 0.0)))
        _accumulate(p, s * np.where(pv > LOG_EPS, -qv / pc, 0.0))

    return _make(out, (q, p), bw)


def multihead_attention(
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    heads: int,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    return_weights: bool = False,
):
    """Scaled dot-product attention with head split, output projection and a
    residual addition of the queries. Zero keys degrade to the residual alone.
    """
    d = queries.value.shape[1]
    if d % heads:
        raise ContractError(f"model dim {d} not divisible by {heads} heads")
    if keys.value.shape[0] == 0:
        return (queries, []) if return_weights else queries
    hd = d // heads
    qp, kp, vp = matmul(queries, wq.T), matmul(keys, wk.T), matmul(values, wv.T)
    outs, weights = [], []
    for h in range(heads):
        lo, hi = h * hd, (h + 1) * hd
        qh, kh, vh = slice_cols(qp, lo, hi), slice_cols(kp, lo, hi), slice_cols(vp, lo, hi)
        attn = softmax_rows(mul(matmul(qh, kh.T), 1.0 / math.sqrt(hd)))
        weights.append(attn)
        outs.append(matmul(attn, vh))
    out = add(queries, matmul(concat(outs, axis=1), wo.T))
    return (out, weights) if return_weights else out


# -- parameters ---------------------------------------------------------------

def _name_seed(seed: int, name: str) -> np.random.Generator:
    h = int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "big")
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, h]))


class ParameterStore:
    """Named trainable tensors with gradient slots; enumeration is name-sorted.

    Initialization is a pure function of (seed, name): uniform in
    +/- sqrt(6/(fan_in+fan_out)) for matrices, zero for vectors (biases).
    """

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.seed = seed
        self.dtype = dtype
        self._entries: dict[str, Tensor] = {}

    def create(self, name: str, shape: tuple[int, ...], init: str = "glorot") -> Tensor:
        if name in self._entries:
            raise ContractError(f"duplicate parameter {name}")
        if init == "zeros" or len(shape) == 1:
            value = np.zeros((1,) + tuple(shape) if len(shape) == 1 else shape, dtype=self.dtype)
        else:
            fan_out, fan_in = shape[0], shape[1]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            value = _name_seed(self.seed, name).uniform(-bound, bound, size=shape).astype(self.dtype)
        t = Tensor(value, requires_grad=True, name=name)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self):
        for name in self.names():
            yield name, self._entries[name]

    def n_params(self) -> int:
        return sum(t.value.size for _, t in self.items())

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    def grad_global_norm(self) -> float:
        total = 0.0
        for t in self._entries.values():
            if t.grad is not None:
                total += float((t.grad * t.grad).sum())
        return math.sqrt(total)

    def clip_grads(self, max_norm: float):
        norm = self.grad_global_norm()
        if norm > max_norm > 0:
            scale = max_norm / norm
            for t in self._entries.values():
                if t.grad is not None:
                    t.grad = t.grad * scale

    # -- checkpoint io ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            name: {"shape": list(t.value.shape), "data": [float(x) for x in t.value.reshape(-1)]}
            for name, t in self.items()
        }

    def save(self, path: str):
        tmp = f"{path}.tmp"
        with open(tmp, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True)
        os.replace(tmp, path)

    def load_values(self, blob: dict):
        """Overwrite existing entries from a checkpoint dict (names must match)."""
        missing = set(self._entries) - set(blob)
        extra = set(blob) - set(self._entries)
        if missing or extra:
            raise ContractError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, entry in blob.items():
            t = self._entries[name]
            arr = np.asarray(entry["data"], dtype=self.dtype).reshape(entry["shape"])
            if arr.shape != t.value.shape:
                raise ContractError(f"checkpoint shape mismatch for {name}: {arr.shape} vs {t.value.shape}")
            t.value = arr

    def load(self, path: str):
        with open(path) as f:
            self.load_values(json.load(f))


# -- gradient checking ---------------------------------------------------------

@dataclass
class GradCheckSample:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    samples: list[GradCheckSample] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((s.rel_err for s in self.samples), default=0.0)

    @property
    def worst(self) -> GradCheckSample | None:
        return max(self.samples, key=lambda s: s.rel_err) if self.samples else None


def grad_check(loss_fn, store: ParameterStore, sample_count: int = 200, epsilon: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Samples at least one coordinate from every parameter tensor, then fills up
    to `sample_count` with uniform draws over all coordinates. `loss_fn` must
    be a deterministic closure over `store` returning a scalar Tensor.
    """
    store.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.value).all():
        raise ComputationError("non-finite loss at base point")
    loss.backward()
    analytic = {name: (np.zeros_like(t.value) if t.grad is None else t.grad.copy()) for name, t in store.items()}

    rng = np.random.default_rng(seed)
    names = store.names()
    coords: list[tuple[str, int]] = []
    for name in names:
        size = store[name].value.size
        coords.append((name, int(rng.integers(size))))
    sizes = np.array([store[n].value.size for n in names])
    cum = np.cumsum(sizes)
    while len(coords) < sample_count:
        flat = int(rng.integers(cum[-1]))
        k = int(np.searchsorted(cum, flat, side="right"))
        coords.append((names[k], flat - (int(cum[k - 1]) if k else 0)))

    report = GradCheckReport()
    for name, idx in coords:
        t = store[name]
        flat = t.value.reshape(-1)
        w0 = flat[idx]
        flat[idx] = w0 + epsilon
        lp = loss_fn()
        flat[idx] = w0 - epsilon
        lm = loss_fn()
        flat[idx] = w0
        if not (np.isfinite(lp.value).all() and np.isfinite(lm.value).all()):
            raise ComputationError(f"non-finite loss while probing parameter {name}")
        numeric = (lp.item() - lm.item()) / (2.0 * epsilon)
        a = float(analytic[name].reshape(-1)[idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        report.samples.append(GradCheckSample(name, idx, a, numeric, rel))
    return report
