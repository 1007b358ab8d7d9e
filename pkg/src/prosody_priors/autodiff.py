"""Tape-based reverse-mode differentiation over a small, closed set of array ops.

Usage::

    store = ParamStore()
    w = store.add("w", np.zeros((3, 2)))
    with GradContext() as ctx:
        loss = ad.sum(ad.square(ad.matmul(x, w)))
    backward(ctx, loss)
    adam_step(store, lr=1e-3)

Every op checks its forward value for NaN/Inf and raises
:class:`NonFiniteError` naming the op.  Ops only record onto the tape when a
:class:`GradContext` is active and at least one input requires a gradient, so
the same model code runs untraced for evaluation and sampling.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import core

__all__ = [
    "Tensor", "GradContext", "ParamStore", "NonFiniteError", "BackwardError",
    "backward", "adam_step", "constant",
    "add", "sub", "mul", "neg", "matmul", "tanh", "sigmoid", "exp", "log",
    "softplus", "square", "concat", "stack", "getitem", "reshape", "sum", "mean",
    "squared_error", "gaussian_kl", "gaussian_log_prob", "gru_cell",
    "numeric_gradient", "gradient_errors",
]


class NonFiniteError(FloatingPointError):
    """A forward value contained NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


class BackwardError(RuntimeError):
    pass


_local = threading.local()


def _active() -> Optional["GradContext"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Array value plus, when traced, the closure that maps its gradient to its inputs."""

    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "op", "name")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    if not math.isfinite(np.add.reduce(value, axis=None)):
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    out.op = op
    ctx = _active()
    if ctx is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = fn
        ctx.tape.append(out)
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class GradContext:
    """Records one forward computation; supports exactly one backward pass."""

    def __init__(self):
        self.tape: list[Tensor] = []
        self.used = False

    def __enter__(self) -> "GradContext":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()


def backward(ctx: GradContext, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` field of every traced leaf."""
    if ctx.used:
        raise BackwardError("backward already ran for this GradContext")
    if not isinstance(loss, Tensor) or loss.value.size != 1:
        raise BackwardError("loss must be a scalar Tensor")
    ctx.used = True
    if not loss.requires_grad:
        return
    if all(t is not loss for t in reversed(ctx.tape)):
        raise BackwardError("loss was not produced under this GradContext")
    loss.grad = np.ones_like(loss.value)
    owned: set[int] = set()   # ids of nodes whose grad buffer may be written in place
    for node in reversed(ctx.tape):
        g = node.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if isinstance(pg, _SliceGrad):
                if parent.grad is None:
                    parent.grad = np.zeros(parent.shape)
                elif id(parent) not in owned:
                    parent.grad = parent.grad.copy()
                owned.add(id(parent))
                parent.grad[pg.index] += pg.grad
            elif parent.grad is None:
                parent.grad = pg
            else:
                parent.grad = parent.grad + pg
                owned.add(id(parent))
        node.grad = None
        node.backward_fn = None
        node.parents = ()
    ctx.tape = []


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
                 "mul")


def neg(a) -> Tensor:
    a = constant(a)
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., k) and ``b`` of shape (k, m)."""
    a, b = constant(a), constant(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise core.ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value

    def fn(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _node(av @ bv, (a, b), fn, "matmul")


def tanh(a) -> Tensor:
    a = constant(a)
    y = np.tanh(a.value)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = constant(a)
    y = _sigmoid(a.value)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(a) -> Tensor:
    a = constant(a)
    y = np.exp(a.value)
    return _node(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = constant(a)
    x = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return _node(y, (a,), lambda g: (g / x,), "log")


def softplus(a) -> Tensor:
    a = constant(a)
    x = a.value
    y = np.logaddexp(0.0, x)
    return _node(y, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def square(a) -> Tensor:
    a = constant(a)
    x = a.value
    return _node(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [constant(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.value for t in ts], axis=axis), ts, fn, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [constant(t) for t in tensors]

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _node(np.stack([t.value for t in ts], axis=axis), ts, fn, "stack")


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


class _SliceGrad:
    """Gradient of a basic slice, scattered into the parent's buffer by :func:`backward`."""

    __slots__ = ("index", "grad")

    def __init__(self, index, grad):
        self.index = index
        self.grad = grad


def getitem(a, idx) -> Tensor:
    a = constant(a)
    shape = a.shape
    basic = _is_basic(idx)

    def fn(g):
        if basic:
            return (_SliceGrad(idx, g),)
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.value[idx], (a,), fn, "slice")


def reshape(a, shape) -> Tensor:
    a = constant(a)
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a) -> Tensor:
    """Transpose of a 2-D tensor."""
    a = constant(a)
    if a.ndim != 2:
        raise core.ShapeError("transpose (2-D only)", a.shape, (None, None))
    return _node(a.value.T.copy(), (a,), lambda g: (g.T.copy(),), "transpose")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = constant(a)
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.value.sum(axis=axis, keepdims=keepdims)), (a,), fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def squared_error(pred, target) -> Tensor:
    """Elementwise ``(pred - target)**2``."""
    pred, target = constant(pred), constant(target)
    d = pred.value - target.value
    sp, st = pred.shape, target.shape
    return _node(d * d, (pred, target),
                 lambda g: (_unbroadcast(2.0 * g * d, sp), _unbroadcast(-2.0 * g * d, st)),
                 "squared_error")


# ---------------------------------------------------------------------------
# fused Gaussian ops
# ---------------------------------------------------------------------------

def gaussian_kl(mq, log_sq, mp, log_sp) -> Tensor:
    """Elementwise KL(N(mq, sq) || N(mp, sp)); inputs broadcast together."""
    ts = [constant(t) for t in (mq, log_sq, mp, log_sp)]
    mqv, lqv, mpv, lpv = (t.value for t in ts)
    ratio = np.exp(2.0 * (lqv - lpv))
    inv_var_p = np.exp(-2.0 * lpv)
    diff = mpv - mqv
    val = (lpv - lqv) + 0.5 * (ratio + diff * diff * inv_var_p - 1.0)
    shapes = [t.shape for t in ts]

    def fn(g):
        d_mp = g * diff * inv_var_p
        d_lq = g * (ratio - 1.0)
        d_lp = g * (1.0 - ratio - diff * diff * inv_var_p)
        return (_unbroadcast(-d_mp, shapes[0]), _unbroadcast(d_lq, shapes[1]),
                _unbroadcast(d_mp, shapes[2]), _unbroadcast(d_lp, shapes[3]))

    return _node(val, ts, fn, "gaussian_kl")


def gaussian_log_prob(x, m, log_s) -> Tensor:
    """Elementwise log N(x; m, exp(log_s)**2)."""
    ts = [constant(t) for t in (x, m, log_s)]
    xv, mv, lv = (t.value for t in ts)
    inv_s = np.exp(-lv)
    u = (xv - mv) * inv_s
    val = -0.5 * core.LOG_2PI - lv - 0.5 * u * u
    shapes = [t.shape for t in ts]

    def fn(g):
        d_x = -g * u * inv_s
        return (_unbroadcast(d_x, shapes[0]), _unbroadcast(-d_x, shapes[1]),
                _unbroadcast(g * (u * u - 1.0), shapes[2]))

    return _node(val, ts, fn, "gaussian_log_prob")


# ---------------------------------------------------------------------------
# recurrent cell
# ---------------------------------------------------------------------------

def gru_cell(gx, h, w_h) -> Tensor:
    """One fused GRU step.

    ``gx`` is the precomputed input projection ``x @ w_x + b`` of width 3H,
    laid out as (reset, update, candidate); ``h`` is (B, H) and ``w_h`` is
    (H, 3H).  Returns ``n + u * (h - n)``.
    """
    gx, h, w_h = constant(gx), constant(h), constant(w_h)
    H = h.shape[-1]
    if gx.shape[-1] != 3 * H or w_h.shape != (H, 3 * H):
        raise core.ShapeError("gru_cell gx/w_h", gx.shape, w_h.shape)
    gxv, hv, wv = gx.value, h.value, w_h.value
    gh = hv @ wv
    r = _sigmoid(gxv[..., :H] + gh[..., :H])
    u = _sigmoid(gxv[..., H:2 * H] + gh[..., H:2 * H])
    ghn = gh[..., 2 * H:]
    n = np.tanh(gxv[..., 2 * H:] + r * ghn)
    out = n + u * (hv - n)

    def fn(g):
        dan = g * (1.0 - u) * (1.0 - n * n)
        dar = dan * ghn * r * (1.0 - r)
        dau = g * (hv - n) * u * (1.0 - u)
        dgx = np.concatenate([dar, dau, dan], axis=-1)
        dgh = np.concatenate([dar, dau, dan * r], axis=-1)
        dh = g * u + dgh @ wv.T
        dw = hv.reshape(-1, H).T @ dgh.reshape(-1, 3 * H)
        return _unbroadcast(dgx, gx.shape), _unbroadcast(dh, h.shape), dw

    return _node(out, (gx, h, w_h), fn, "gru_cell")


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

class ParamStore:
    """Named trainable arrays with gradient slots and Adam moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = p
        self.m[name] = np.zeros_like(p.value)
        self.v[name] = np.zeros_like(p.value)
        self.t[name] = 0
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def values(self) -> dict[str, np.ndarray]:
        return {n: p.value for n, p in self.params.items()}

    def grads(self, names: Optional[Iterable[str]] = None) -> dict[str, np.ndarray]:
        names = self.params if names is None else names
        return {n: (np.zeros_like(self.params[n].value) if self.params[n].grad is None
                    else self.params[n].grad) for n in names}

    def n_params(self) -> int:
        return int(np.sum([p.value.size for p in self.params.values()]))

    def state_dict(self) -> dict:
        return {
            "params": {n: p.value for n, p in self.params.items()},
            "m": dict(self.m), "v": dict(self.v), "t": dict(self.t),
        }

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        params = state["params"]
        if strict and set(params) != set(self.params):
            missing = sorted(set(self.params) ^ set(params))
            raise KeyError(f"parameter sets differ: {missing}")
        for n, val in params.items():
            if n not in self.params:
                continue
            val = np.asarray(val, dtype=np.float64)
            if val.shape != self.params[n].shape:
                raise core.ShapeError(f"parameter {n}", val.shape, self.params[n].shape)
            self.params[n].value = val.copy()
            self.m[n] = np.asarray(state.get("m", {}).get(n, np.zeros_like(val)), dtype=np.float64)
            self.v[n] = np.asarray(state.get("v", {}).get(n, np.zeros_like(val)), dtype=np.float64)
            self.t[n] = int(state.get("t", {}).get(n, 0))


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, names: Optional[Iterable[str]] = None,
              clip_norm: Optional[float] = None) -> None:
    """Bias-corrected Adam update of ``names`` (default: all), then zero every gradient.

    Parameters outside ``names`` are left untouched bit for bit.
    """
    if not lr > 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    names = list(store.params if names is None else names)
    live = [n for n in names if store.params[n].grad is not None]
    if not live:
        raise BackwardError("adam_step called with no populated gradients")
    scale = 1.0
    if clip_norm is not None:
        norm = math.sqrt(float(np.sum([np.sum(store.params[n].grad ** 2) for n in live])))
        if norm > clip_norm:
            scale = clip_norm / norm
    for n in live:
        p = store.params[n]
        g = p.grad * scale
        store.t[n] += 1
        t = store.t[n]
        store.m[n] = beta1 * store.m[n] + (1.0 - beta1) * g
        store.v[n] = beta2 * store.v[n] + (1.0 - beta2) * g * g
        m_hat = store.m[n] / (1.0 - beta1 ** t)
        v_hat = store.v[n] / (1.0 - beta2 ** t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
    store.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def numeric_gradient(loss_fn: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` with respect to every entry of ``param``."""
    out = np.zeros_like(param.value)
    flat = param.value.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        out.reshape(-1)[i] = (up - down) / (2.0 * h)
    return out


def gradient_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Per-coordinate ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class GradCheck:
    """Relative errors per parameter from :func:`check_gradients`."""

    errors: dict

    @property
    def all_errors(self) -> np.ndarray:
        return np.concatenate([e for e in self.errors.values()]) if self.errors else np.zeros(0)

    def fraction_within(self, tol: float) -> float:
        e = self.all_errors
        return float(np.mean(e <= tol)) if e.size else 1.0

    @property
    def worst(self) -> float:
        e = self.all_errors
        return float(e.max()) if e.size else 0.0

    def passes(self, tol: float = 1e-4, frac: float = 0.95, worst: float = 1e-3) -> bool:
        return self.fraction_within(tol) >= frac and self.worst <= worst


def check_gradients(loss_fn: Callable[[], Tensor], store: ParamStore,
                    names: Optional[Iterable[str]] = None, h: float = 1e-5,
                    floor: float = 1e-6) -> GradCheck:
    """Compare reverse-mode gradients of ``loss_fn()`` against central differences.

    Every coordinate of every parameter in ``names`` (default: all) is checked.
    ``loss_fn`` must be deterministic.
    """
    names = list(store.params if names is None else names)
    store.zero_grad()
    with GradContext() as ctx:
        loss = loss_fn()
    backward(ctx, loss)
    analytic = store.grads(names)
    analytic = {n: g.copy() for n, g in analytic.items()}
    store.zero_grad()
    errors = {}
    for n in names:
        num = numeric_gradient(lambda: float(loss_fn().value), store[n], h)
        errors[n] = gradient_errors(analytic[n], num, floor)
    return GradCheck(errors)
