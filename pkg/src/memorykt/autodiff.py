"""Reverse-mode automatic differentiation on dense numpy arrays.

A :class:`Tape` records every primitive applied to tensors that live on it.
Calling :meth:`Tape.backward` walks the records in reverse and accumulates
vector-Jacobian products into each node's gradient buffer; gradients that
reach parameter leaves are copied into the owning :class:`ParamStore`.

Only the handful of primitives the memoryKT network needs are provided.
Broadcasting is limited to adding a bias row to a batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

DTYPE = np.float64

PROB_EPS = 1e-7
SIGMA_FLOOR = 1e-6

CHECKPOINT_VERSION = "memorykt-params/1"


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def _check_finite(value: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite values in {where}")


class Tensor:
    """A dense array, optionally recorded on a tape.

    Tensors without a tape are plain constants: primitives applied only to
    constants compute their value and record nothing.
    """

    __slots__ = ("value", "tape", "index", "param")

    def __init__(self, value, tape: Tape | None = None, param: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.tape = tape
        self.index = -1
        self.param = param

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray | None:
        if self.tape is None or self.index < 0:
            return None
        return self.tape.grads[self.index]

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, param={self.param})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


@dataclass
class _Node:
    tensor: Tensor
    inputs: tuple
    vjp: Callable | None  # grad_out -> tuple of input grads (None = no grad)


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: list[np.ndarray | None] = []
        self._params: dict[str, Tensor] = {}
        self._store: ParamStore | None = None

    def _record(self, tensor: Tensor, inputs=(), vjp=None) -> Tensor:
        tensor.tape = self
        tensor.index = len(self.nodes)
        self.nodes.append(_Node(tensor, tuple(inputs), vjp))
        self.grads.append(None)
        return tensor

    def constant(self, value) -> Tensor:
        value = np.asarray(value, dtype=DTYPE)
        _check_finite(value, "constant")
        return Tensor(value)

    def param(self, store: ParamStore, name: str) -> Tensor:
        """Leaf tensor bound to ``store[name]``; one leaf per name per tape."""
        if self._store is not None and self._store is not store:
            raise ValueError("a tape can only bind one ParamStore")
        self._store = store
        if name not in self._params:
            self._params[name] = self._record(Tensor(store[name], param=name))
        return self._params[name]

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(parameter) into the bound store and return it."""
        if loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = self.grads
        grads[loss.index] = np.ones_like(loss.value)
        for i in range(loss.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or inp.tape is not self:
                    continue
                j = inp.index
                grads[j] = gi if grads[j] is None else grads[j] + gi
        out = {}
        for name, leaf in self._params.items():
            g = grads[leaf.index]
            out[name] = np.zeros_like(leaf.value) if g is None else g
        if self._store is not None:
            self._store.accumulate(out)
        return out


def _tape_of(*tensors) -> Tape | None:
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            return t.tape
    return None


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(value, inputs, vjp) -> Tensor:
    out = Tensor(value)
    tape = _tape_of(*inputs)
    if tape is not None:
        tape._record(out, inputs, vjp)
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a bias row broadcast over the batch."""
    a, b = _wrap(a), _wrap(b)
    if a.shape == b.shape:
        return _emit(a.value + b.value, (a, b), lambda g: (g, g))
    if a.value.ndim == 2 and b.value.ndim == 1 and a.shape[1] == b.shape[0]:
        return _emit(a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for a batch ``x`` [B, in] and weight ``w`` [in, out]."""
    x, w = _wrap(x), _wrap(w)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} @ {w.shape}")
    xv, wv = x.value, w.value
    if b is None:
        return _emit(xv @ wv, (x, w), lambda g: (g @ wv.T, xv.T @ g))
    b = _wrap(b)
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape}")
    return _emit(xv @ wv + b.value, (x, w, b),
                 lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


def scale(a: Tensor, c: float) -> Tensor:
    a = _wrap(a)
    return _emit(a.value * c, (a,), lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} * {b.shape}")
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def concat(tensors: list) -> Tensor:
    """Concatenate along the last axis."""
    tensors = [_wrap(t) for t in tensors]
    lead = {t.shape[:-1] for t in tensors}
    if len(lead) != 1:
        raise ShapeError(f"concat: leading shapes differ {[t.shape for t in tensors]}")
    cuts = np.cumsum([t.shape[-1] for t in tensors])[:-1]
    value = np.concatenate([t.value for t in tensors], axis=-1)
    return _emit(value, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=-1)))


def split(a: Tensor, parts: int) -> list:
    """Split the last axis into ``parts`` equal chunks."""
    a = _wrap(a)
    n = a.shape[-1]
    if n % parts:
        raise ShapeError(f"split: last axis {n} not divisible by {parts}")
    width = n // parts
    outs = []
    for k in range(parts):
        lo, hi = k * width, (k + 1) * width

        def vjp(g, lo=lo, hi=hi):
            full = np.zeros_like(a.value)
            full[..., lo:hi] = g
            return (full,)

        outs.append(_emit(a.value[..., lo:hi], (a,), vjp))
    return outs


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    on = a.value > 0  # gradient 0 at the kink
    return _emit(np.where(on, a.value, 0.0), (a,), lambda g: (g * on,))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    s = _sigmoid(a.value)
    return _emit(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    a = _wrap(a)
    t = np.tanh(a.value)
    return _emit(t, (a,), lambda g: (g * (1.0 - t * t),))


def softplus(a: Tensor) -> Tensor:
    a = _wrap(a)
    x = a.value
    value = np.logaddexp(0.0, x)
    return _emit(value, (a,), lambda g: (g * _sigmoid(x),))


def embedding(table: Tensor, rows) -> Tensor:
    """Gather ``table[rows]``; ``rows`` is an integer index array."""
    table = _wrap(table)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= table.shape[0]):
        raise IndexError(f"embedding: row index out of range for table {table.shape}")

    def vjp(g):
        full = np.zeros_like(table.value)
        np.add.at(full, rows, g)
        return (full,)

    return _emit(table.value[rows], (table,), vjp)


def select(a: Tensor, cols) -> Tensor:
    """Pick one column per row: ``out[b] = a[b, cols[b]]``."""
    a = _wrap(a)
    cols = np.asarray(cols, dtype=np.int64)
    if a.value.ndim != 2 or cols.shape != (a.shape[0],):
        raise ShapeError(f"select: need [B, N] and [B] indices, got {a.shape}, {cols.shape}")
    rows = np.arange(a.shape[0])

    def vjp(g):
        full = np.zeros_like(a.value)
        full[rows, cols] = g
        return (full,)

    return _emit(a.value[rows, cols], (a,), vjp)


def total(a: Tensor) -> Tensor:
    a = _wrap(a)
    shape = a.shape
    return _emit(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    return scale(total(a), 1.0 / max(a.value.size, 1))


def _mask_vector(mask, n: int) -> np.ndarray:
    m = np.asarray(mask, dtype=DTYPE).reshape(-1)
    if m.shape != (n,):
        raise ShapeError(f"mask shape {m.shape} does not match batch {n}")
    return m


def masked_sq_error(a: Tensor, b: Tensor, mask) -> Tensor:
    """``sum_b mask[b] * ||a[b] - b[b]||^2`` over a batch of row vectors."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape or a.value.ndim != 2:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    m = _mask_vector(mask, a.shape[0])[:, None]
    diff = a.value - b.value
    value = np.sum(m * diff * diff)
    return _emit(value, (a, b), lambda g: (2.0 * g * m * diff, -2.0 * g * m * diff))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over rows of the squared L2 distance."""
    a = _wrap(a)
    n = a.shape[0]
    return scale(masked_sq_error(a, b, np.ones(n)), 1.0 / n)


def masked_bce(p: Tensor, target, mask) -> Tensor:
    """Summed binary cross-entropy of probabilities ``p`` [B] against 0/1 targets.

    Probabilities are clamped to [PROB_EPS, 1 - PROB_EPS]; the clamp passes no
    gradient when active.
    """
    p = _wrap(p)
    y = np.asarray(target, dtype=DTYPE)
    if y.shape != p.shape or p.value.ndim != 1:
        raise ShapeError(f"bce: shape mismatch {p.shape} vs {y.shape}")
    m = _mask_vector(mask, p.shape[0])
    pc = np.clip(p.value, PROB_EPS, 1.0 - PROB_EPS)
    inside = (p.value >= PROB_EPS) & (p.value <= 1.0 - PROB_EPS)
    value = -np.sum(m * (y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))

    def vjp(g):
        return (g * m * inside * (pc - y) / (pc * (1.0 - pc)),)

    return _emit(value, (p,), vjp)


def gaussian_kl(mu_q: Tensor, sig_q: Tensor, mu_p: Tensor, sig_p: Tensor, mask) -> Tensor:
    """Summed KL(N(mu_q, sig_q^2) || N(mu_p, sig_p^2)) over dims and masked rows.

    Both standard deviations are floored at SIGMA_FLOOR; no gradient flows
    through an active floor.
    """
    mu_q, sig_q, mu_p, sig_p = (_wrap(t) for t in (mu_q, sig_q, mu_p, sig_p))
    shapes = {mu_q.shape, sig_q.shape, mu_p.shape, sig_p.shape}
    if len(shapes) != 1 or mu_q.value.ndim != 2:
        raise ShapeError(f"kl: shape mismatch {sorted(shapes)}")
    m = _mask_vector(mask, mu_q.shape[0])[:, None]
    sq = np.maximum(sig_q.value, SIGMA_FLOOR)
    sp = np.maximum(sig_p.value, SIGMA_FLOOR)
    live_q = sig_q.value >= SIGMA_FLOOR
    live_p = sig_p.value >= SIGMA_FLOOR
    d = mu_q.value - mu_p.value
    vp = sp * sp
    value = np.sum(m * (np.log(sp / sq) + (sq * sq + d * d) / (2.0 * vp) - 0.5))

    def vjp(g):
        gm = g * m
        return (
            gm * d / vp,
            gm * live_q * (sq / vp - 1.0 / sq),
            -gm * d / vp,
            gm * live_p * (1.0 / sp - (sq * sq + d * d) / (vp * sp)),
        )

    return _emit(value, (mu_q, sig_q, mu_p, sig_p), vjp)


def detach(a: Tensor) -> Tensor:
    return Tensor(_wrap(a).value.copy())


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class ParamStore:
    """Named parameters with gradient and Adam moment buffers."""

    params: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=DTYPE)
        _check_finite(value, f"parameter {name!r}")
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def names(self) -> list:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, grads: dict) -> None:
        for name, g in grads.items():
            self.grads[name] += g

    def copy(self) -> ParamStore:
        out = ParamStore()
        for name, value in self.params.items():
            out.add(name, value)
        return out

    def num_values(self) -> int:
        return sum(v.size for v in self.params.values())


def save_params(store: ParamStore, path, meta: dict | None = None) -> None:
    """Write parameters as an ``.npz`` archive of little-endian float64 arrays.

    The archive holds one array per parameter name plus ``__meta__``, a UTF-8
    JSON document carrying the version tag, byte order and caller metadata.
    """
    header = {"version": CHECKPOINT_VERSION, "byte_order": "little", "dtype": "float64",
              "shapes": {k: list(v.shape) for k, v in store.params.items()},
              "meta": meta or {}}
    arrays = {k: v.astype("<f8") for k, v in store.params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path) -> tuple[ParamStore, dict]:
    with np.load(Path(path)) as data:
        header = json.loads(bytes(data["__meta__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
        store = ParamStore()
        for name, shape in header["shapes"].items():
            value = data[name]
            if list(value.shape) != shape:
                raise ValueError(f"checkpoint shape mismatch for {name!r}")
            store.add(name, value)
    return store, header["meta"]


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict  # name -> max relative error
    tol: float

    @property
    def failed(self) -> list:
        return [k for k, e in self.errors.items() if not e < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failed

    def lines(self) -> list:
        return [f"{'PASS' if e < self.tol else 'FAIL'} {name} max_rel_err={e:.3e}"
                for name, e in self.errors.items()]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable, params: ParamStore, eps: float = 1e-5, tol: float = 1e-4,
               names=None) -> GradCheckReport:
    """Compare tape gradients with central finite differences.

    ``f(tape, store)`` must build a scalar loss on ``tape`` from parameters of
    ``store`` and be deterministic (all sampling noise frozen).
    """
    tape = Tape()
    loss = f(tape, params)
    _check_finite(loss.value, "loss")
    analytic = tape.backward(loss)
    params.zero_grad()

    def value_at() -> float:
        v = f(Tape(), params).value
        _check_finite(v, "loss")
        return float(v)

    errors = {}
    for name in names or params.names():
        p = params[name]
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = value_at()
            flat[i] = orig - eps
            down = value_at()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * eps)
        a = analytic.get(name, np.zeros_like(p))
        errors[name] = float(relative_error(a, numeric).max()) if p.size else 0.0
    return GradCheckReport(errors, tol)
