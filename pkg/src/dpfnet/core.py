"""Dense float64 matrices with tape-based reverse-mode differentiation.

Every op accepts plain 2-D ``numpy`` arrays or :class:`Node` objects. When a
:class:`Tape` is passed and at least one input is a node, the result is a new
node and the adjoint rule is appended to the tape; otherwise the op is a pure
numpy computation returning an array. This keeps inference (sampling, metric
evaluation, finite differences) free of bookkeeping overhead.
"""

from __future__ import annotations

import copy
import logging
import math
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError

log = logging.getLogger(__name__)

LOG_VAR_MIN = -14.0
LOG_VAR_MAX = 14.0
LOG_2PI = math.log(2.0 * math.pi)

# number of entries silently clamped by gaussian_log_prob / clamp_log_var
clamp_events = 0


class Node:
    """A value recorded on a tape together with its accumulated adjoint."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape})"


class Tape:
    """Ordered record of primitive ops; ``backward`` replays them in reverse."""

    def __init__(self):
        self._ops: list[tuple[Node, tuple, Callable]] = []
        self._leaves: dict[tuple[int, str], tuple[Node, "ParamStore", str]] = {}

    def __len__(self):
        return len(self._ops)

    def param(self, store: "ParamStore", name: str) -> Node:
        key = (id(store), name)
        leaf = self._leaves.get(key)
        if leaf is None:
            node = Node(store.value(name))
            self._leaves[key] = (node, store, name)
            return node
        return leaf[0]

    def record(self, out: Node, parents: tuple, backward: Callable) -> None:
        self._ops.append((out, parents, backward))

    def backward(self, loss: Node) -> None:
        """Accumulate d(loss)/d(param) into the grads of every touched ParamStore."""
        if not isinstance(loss, Node) or loss.value.shape != (1, 1):
            raise DimensionError(f"backward needs a 1x1 node, got {getattr(loss, 'shape', None)}")
        loss.grad = np.ones((1, 1))
        for out, parents, fn in reversed(self._ops):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for p, pg in zip(parents, grads):
                if p is None or pg is None:
                    continue
                if p.grad is None:
                    p.grad = pg
                else:
                    p.grad = p.grad + pg
        for node, store, name in self._leaves.values():
            if node.grad is not None:
                store.grad(name)[...] += node.grad


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else x


def _split(x):
    if isinstance(x, Node):
        return x.value, x
    return x, None


def _emit(tape: Tape | None, out: np.ndarray, parents: tuple, backward: Callable):
    if tape is None or all(p is None for p in parents):
        return out
    node = Node(out)
    tape.record(node, parents, backward)
    return node


def _check_2d(name, a):
    if a.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D matrix, got shape {a.shape}")


def _rowcast(op, a, b):
    """Shapes must match, or one side is a single row broadcast over the other."""
    _check_2d(op, a)
    _check_2d(op, b)
    if a.shape == b.shape:
        return
    if a.shape[1] == b.shape[1] and (a.shape[0] == 1 or b.shape[0] == 1):
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unrow(g, shape):
    if g.shape[0] != shape[0]:
        return g.sum(axis=0, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops


def linear(x, weight, bias=None, tape: Tape | None = None):
    xv, xn = _split(x)
    wv, wn = _split(weight)
    _check_2d("linear input", xv)
    _check_2d("linear weight", wv)
    if xv.shape[1] != wv.shape[0]:
        raise DimensionError(f"linear: input {xv.shape} does not conform to weight {wv.shape}")
    out = xv @ wv
    bn = None
    if bias is not None:
        bv, bn = _split(bias)
        if bv.shape != (1, wv.shape[1]):
            raise DimensionError(f"linear: bias {bv.shape} does not match weight {wv.shape}")
        out += bv

    def backward(g):
        return (
            g @ wv.T if xn is not None else None,
            xv.T @ g if wn is not None else None,
            g.sum(axis=0, keepdims=True) if bn is not None else None,
        )

    return _emit(tape, out, (xn, wn, bn), backward)


def activation(x, kind: str, tape: Tape | None = None):
    xv, xn = _split(x)
    if kind == "relu":
        out = np.maximum(xv, 0.0)

        def backward(g):
            return (g * (xv > 0),)

    elif kind == "tanh":
        out = np.tanh(xv)

        def backward(g):
            return (g * (1.0 - out * out),)

    elif kind == "softplus":
        out = np.logaddexp(0.0, xv)

        def backward(g):
            return (g * _sigmoid(xv),)

    else:
        raise ValueError(f"unknown activation {kind!r}")
    return _emit(tape, out, (xn,), backward)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def add(a, b, tape: Tape | None = None):
    av, an = _split(a)
    bv, bn = _split(b)
    _rowcast("add", av, bv)
    out = av + bv
    return _emit(tape, out, (an, bn), lambda g: (_unrow(g, av.shape), _unrow(g, bv.shape)))


def sub(a, b, tape: Tape | None = None):
    av, an = _split(a)
    bv, bn = _split(b)
    _rowcast("sub", av, bv)
    out = av - bv
    return _emit(tape, out, (an, bn), lambda g: (_unrow(g, av.shape), -_unrow(g, bv.shape)))


def mul(a, b, tape: Tape | None = None):
    av, an = _split(a)
    bv, bn = _split(b)
    _rowcast("mul", av, bv)
    out = av * bv

    def backward(g):
        return (
            _unrow(g * bv, av.shape) if an is not None else None,
            _unrow(g * av, bv.shape) if bn is not None else None,
        )

    return _emit(tape, out, (an, bn), backward)


def scale(a, c: float, shift: float = 0.0, tape: Tape | None = None):
    """Elementwise ``c * a + shift`` for constant reals."""
    av, an = _split(a)
    out = av * c + shift if shift else av * c
    return _emit(tape, out, (an,), lambda g: (g * c,))


def exp(a, tape: Tape | None = None):
    av, an = _split(a)
    out = np.exp(av)
    return _emit(tape, out, (an,), lambda g: (g * out,))


def columns(a, idx: Sequence[int], tape: Tape | None = None):
    av, an = _split(a)
    idx = list(idx)
    out = av[:, idx]

    def backward(g):
        full = np.zeros_like(av)
        full[:, idx] = g
        return (full,)

    return _emit(tape, out, (an,), backward)


def assemble_columns(parts: Sequence, indices: Sequence[Sequence[int]], tape: Tape | None = None):
    """Inverse of :func:`columns`: place each part at its column indices."""
    vals = [_split(p) for p in parts]
    n = vals[0][0].shape[0]
    ncols = sum(len(i) for i in indices)
    out = np.empty((n, ncols))
    for (pv, _), idx in zip(vals, indices):
        if pv.shape != (n, len(idx)):
            raise DimensionError(f"assemble_columns: part {pv.shape} vs {len(idx)} indices")
        out[:, list(idx)] = pv

    def backward(g):
        return tuple(g[:, list(idx)] for idx in indices)

    return _emit(tape, out, tuple(pn for _, pn in vals), backward)


def row_sum(a, tape: Tape | None = None):
    av, an = _split(a)
    out = av.sum(axis=1, keepdims=True)
    return _emit(tape, out, (an,), lambda g: (np.broadcast_to(g, av.shape).copy(),))


def total(a, tape: Tape | None = None):
    av, an = _split(a)
    out = np.array([[av.sum()]])
    return _emit(tape, out, (an,), lambda g: (np.full(av.shape, g[0, 0]),))


def mean(a, tape: Tape | None = None):
    av, an = _split(a)
    return scale(total(a, tape), 1.0 / av.size, tape=tape)


def max_pool(a, tape: Tape | None = None):
    """Column-wise max over rows. Gradient goes to the first maximal row."""
    av, an = _split(a)
    out = av.max(axis=0, keepdims=True)

    def backward(g):
        # first row attaining the max, same as np.argmax but cheaper on tall inputs
        arg = np.argmax(av == out, axis=0)
        cols = np.arange(av.shape[1])
        full = np.zeros_like(av)
        full[arg, cols] = g[0]
        return (full,)

    return _emit(tape, out, (an,), backward)


def clamp(a, lo: float, hi: float, tape: Tape | None = None):
    av, an = _split(a)
    out = np.clip(av, lo, hi)
    inside = (av >= lo) & (av <= hi)
    return _emit(tape, out, (an,), lambda g: (g * inside,))


def clamp_log_var(log_var, tape: Tape | None = None):
    global clamp_events
    lv = value(log_var)
    outside = int(np.count_nonzero((lv < LOG_VAR_MIN) | (lv > LOG_VAR_MAX)))
    if outside:
        clamp_events += outside
        log.debug("clamped %d log-variance entries", outside)
    return clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX, tape)


def gaussian_log_prob(x, mean_, log_var, tape: Tape | None = None):
    """Row-wise log N(x; mean, diag(exp(log_var))), returned as an n x 1 matrix."""
    xv, xn = _split(x)
    mv, mn = _split(mean_)
    _rowcast("gaussian_log_prob", xv, mv)
    lv_c = clamp_log_var(log_var, tape)
    lv, ln = _split(lv_c)
    _rowcast("gaussian_log_prob", xv, lv)
    diff = xv - mv
    prec = np.exp(-lv)
    quad = diff * diff * prec
    d = xv.shape[1]
    out = -0.5 * (d * LOG_2PI + np.broadcast_to(lv, xv.shape).sum(axis=1, keepdims=True)
                  + quad.sum(axis=1, keepdims=True))

    def backward(g):
        r = diff * prec * g
        return (
            -r if xn is not None else None,
            _unrow(r, mv.shape) if mn is not None else None,
            _unrow(-0.5 * g * (1.0 - quad), lv.shape) if ln is not None else None,
        )

    return _emit(tape, out, (xn, mn, ln), backward)


def reparam_sample(mean_, log_var, rng: "Rng", tape: Tape | None = None):
    """``mean + exp(log_var / 2) * eps`` with eps drawn from ``rng``."""
    mv, _ = _split(mean_)
    lv, _ = _split(log_var)
    _rowcast("reparam_sample", mv, lv)
    shape = np.broadcast_shapes(mv.shape, lv.shape)
    eps = rng.normal(shape)
    std = exp(scale(log_var, 0.5, tape=tape), tape)
    return add(mean_, mul(std, eps, tape), tape)


# ---------------------------------------------------------------------------
# parameters and randomness


class ParamStore:
    """Named learnable matrices, each paired with a gradient accumulator."""

    def __init__(self):
        self._values: OrderedDict[str, np.ndarray] = OrderedDict()
        self._grads: OrderedDict[str, np.ndarray] = OrderedDict()

    def add(self, name: str, val: np.ndarray) -> str:
        if name in self._values:
            raise KeyError(f"duplicate parameter {name!r}")
        val = np.array(val, dtype=np.float64)
        _check_2d(name, val)
        self._values[name] = val
        self._grads[name] = np.zeros_like(val)
        return name

    def get(self, name: str, tape: Tape | None = None):
        if tape is None:
            return self._values[name]
        return tape.param(self, name)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_value(self, name: str, val: np.ndarray) -> None:
        val = np.asarray(val, dtype=np.float64)
        if val.shape != self._values[name].shape:
            raise DimensionError(f"{name}: shape {val.shape} != {self._values[name].shape}")
        self._values[name] = val.copy()

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def __contains__(self, name):
        return name in self._values

    def __len__(self):
        return len(self._values)

    def size(self) -> int:
        return sum(v.size for v in self._values.values())

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._values.items()}

    def randomize(self, rng: "Rng", std: float = 0.3, prefix: str = "",
                  dist: str = "normal") -> None:
        """Overwrite every parameter (under ``prefix``) with zero-mean noise.

        Matrices get ``std / sqrt(fan_in)`` so activations keep O(std) scale
        regardless of width; row vectors and biases get plain ``std``.
        ``dist="uniform"`` draws from a uniform law of the same variance,
        which is about three times cheaper for large stores.
        """
        names = [k for k in self._values if k.startswith(prefix)]
        total = sum(self._values[k].size for k in names)
        if dist == "normal":
            noise = rng.normal(total)
        elif dist == "uniform":
            noise = rng.uniform(total, -math.sqrt(3.0), math.sqrt(3.0))
        else:
            raise ValueError(f"unknown distribution {dist!r}")
        off = 0
        for name in names:
            val = self._values[name]
            s = std / np.sqrt(val.shape[0]) if val.shape[0] > 1 else std
            self._values[name] = noise[off:off + val.size].reshape(val.shape) * s
            off += val.size


class Rng:
    """Seeded generator; identical seeds give bit-identical streams."""

    def __init__(self, seed: int | None = 0):
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, n: int) -> list["Rng"]:
        children = []
        for bg in self._gen.bit_generator.spawn(n):
            r = Rng.__new__(Rng)
            r._gen = np.random.Generator(bg)
            children.append(r)
        return children

    def copy(self) -> "Rng":
        r = Rng.__new__(Rng)
        r._gen = copy.deepcopy(self._gen)
        return r

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, st: dict) -> None:
        self._gen.bit_generator.state = st


class Dense:
    """Affine layer whose weight and bias live in a ParamStore."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 rng: Rng | None = None, init: str = "glorot"):
        self.store = store
        self.w = f"{name}.w"
        self.b = f"{name}.b"
        if init == "zeros" or rng is None:
            w = np.zeros((n_in, n_out))
        elif init == "glorot":
            bound = math.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform((n_in, n_out), -bound, bound)
        elif init == "he":
            w = rng.normal((n_in, n_out)) * math.sqrt(2.0 / n_in)
        else:
            raise ValueError(f"unknown init {init!r}")
        store.add(self.w, w)
        store.add(self.b, np.zeros((1, n_out)))

    def __call__(self, x, tape: Tape | None = None):
        return linear(x, self.store.get(self.w, tape), self.store.get(self.b, tape), tape)


class MLP:
    """Stack of Dense layers with a shared hidden activation; last layer is linear."""

    def __init__(self, store: ParamStore, name: str, widths: Sequence[int], rng: Rng | None,
                 act: str = "tanh", init: str = "glorot", last_init: str | None = None):
        self.act = act
        self.layers = []
        n = len(widths) - 1
        for i in range(n):
            li = last_init if (i == n - 1 and last_init is not None) else init
            self.layers.append(Dense(store, f"{name}.{i}", widths[i], widths[i + 1], rng, li))

    def __call__(self, x, tape: Tape | None = None, final_act: bool = False):
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h, tape)
            if i < len(self.layers) - 1 or final_act:
                h = activation(h, self.act, tape)
        return h


def as_float(x) -> float:
    return float(value(x).reshape(-1)[0])


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(fn: Callable[[Tape | None], object], params: ParamStore, h: float = 1e-5,
               max_entries: int = 10_000, rng: Rng | None = None, floor: float = 1e-3,
               names: Iterable[str] | None = None) -> float:
    """Largest relative discrepancy between tape and central-difference gradients.

    ``fn(tape)`` must return a scalar (1x1) and be deterministic. Relative error
    is ``|a - n| / max(|a|, |n|, floor)``. Above ``max_entries`` total entries a
    random subsample is checked, spread over all tensors in proportion to size.
    """
    names = list(names) if names is not None else params.names()
    params.zero_grads()
    tape = Tape()
    out = fn(tape)
    if isinstance(out, Node):
        tape.backward(out)
    analytic = {k: params.grad(k).copy() for k in names}

    total_size = sum(params.value(k).size for k in names)
    rng = rng or Rng(12345)
    picks = {}
    for k in names:
        size = params.value(k).size
        if total_size <= max_entries:
            picks[k] = np.arange(size)
        else:
            m = max(1, int(round(max_entries * size / total_size)))
            picks[k] = rng.permutation(size)[: min(size, m)]

    worst = 0.0
    for k in names:
        val = params.value(k)
        flat = val.reshape(-1)
        for i in picks[k]:
            orig = flat[i]
            flat[i] = orig + h
            fp = as_float(fn(None))
            flat[i] = orig - h
            fm = as_float(fn(None))
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = analytic[k].reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    params.zero_grads()
    return worst
