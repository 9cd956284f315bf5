"""Small reverse-mode autodiff over numpy arrays.

Every trainable piece of the package is written against this module. The
operator set is fixed: each op is a pair of pure functions (forward, vjp)
registered in ``OPS``, and a :class:`Tensor` remembers which op produced it
so that :func:`backward` can walk the graph in reverse.

All arithmetic is float64. Any op producing NaN/Inf raises
:class:`NonFiniteError` immediately.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "Tensor", "Op", "OPS", "NonFiniteError", "ModelParams", "GradCheckReport",
    "apply", "as_tensor", "constant", "backward", "no_grad", "grad_check",
    "matmul", "add", "sub", "mul", "div", "scale", "neg", "sin", "exp", "log", "tanh",
    "sqrt", "square", "softmax", "log_softmax", "layernorm", "gelu", "gather",
    "mean", "sum", "concat", "slice", "reshape", "transpose",
    "bce_with_logits", "cross_entropy", "l1", "l2", "straight_through",
    "stop_gradient", "frozen",
]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


@dataclass(frozen=True)
class Op:
    name: str
    fwd: Callable[..., np.ndarray]
    # vjp(g, out, *inputs, **kw) -> tuple with one gradient (or None) per input
    vjp: Callable[..., tuple]


OPS: dict[str, Op] = {}

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Forward computation without recording the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "kw", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op: Op | None = None
        self.parents: tuple = ()
        self.kw: dict = {}
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = self.op.name if self.op else (self.name or "leaf")
        return f"Tensor({tag}, shape={self.data.shape})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        if np.isscalar(o):
            return scale(self, o)
        return mul(self, o)

    def __rmul__(self, o):
        return self.__mul__(o)

    def __truediv__(self, o):
        if np.isscalar(o):
            return scale(self, 1.0 / o)
        return div(self, o)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return slice(self, key)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x.data if isinstance(x, Tensor) else x)


# Values that the loss treats as constants (stop-gradient outputs, discrete
# assignments). grad_check records them on the unperturbed evaluation and
# replays them on every perturbed one, so finite differences see the same
# surrogate the analytic gradient differentiates.
_frozen_tape: list | None = None
_frozen_pos = 0
_frozen_mode = None


def frozen(x):
    """Pass ``x`` (array or Tensor data) through the grad-check freeze tape."""
    global _frozen_pos
    if _frozen_mode == "record":
        _frozen_tape.append(np.array(x, copy=True))
    elif _frozen_mode == "replay":
        x = _frozen_tape[_frozen_pos]
        _frozen_pos += 1
    return x


@contextlib.contextmanager
def _freeze(mode, tape):
    global _frozen_tape, _frozen_pos, _frozen_mode
    prev = (_frozen_tape, _frozen_pos, _frozen_mode)
    _frozen_tape, _frozen_pos, _frozen_mode = tape, 0, mode
    try:
        yield
    finally:
        _frozen_tape, _frozen_pos, _frozen_mode = prev


def stop_gradient(x) -> Tensor:
    return Tensor(frozen(x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)))


def apply(opname: str, *inputs, **kw) -> Tensor:
    op = OPS[opname]
    ts = tuple(as_tensor(x) for x in inputs)
    out = op.fwd(*(t.data for t in ts), **kw)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite output from op '{opname}'")
    t = Tensor(out)
    if _grad_enabled and any(p.requires_grad for p in ts):
        t.requires_grad = True
        t.op = op
        t.parents = ts
        t.kw = kw
    return t


def _register(name, fwd, vjp):
    OPS[name] = Op(name, fwd, vjp)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def _swap(a):
    return np.swapaxes(a, -1, -2)


_register("matmul", lambda a, b: np.matmul(a, b),
          lambda g, o, a, b: (_unbroadcast(g @ _swap(b), a.shape),
                              _unbroadcast(_swap(a) @ g, b.shape)))
_register("add", lambda a, b: a + b,
          lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
_register("sub", lambda a, b: a - b,
          lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
_register("mul", lambda a, b: a * b,
          lambda g, o, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))
_register("div", lambda a, b: a / b,
          lambda g, o, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * o / b, b.shape)))
_register("scale", lambda a, c: a * c, lambda g, o, a, c: (g * c,))
_register("sin", np.sin, lambda g, o, a: (g * np.cos(a),))
_register("exp", np.exp, lambda g, o, a: (g * o,))
_register("log", np.log, lambda g, o, a: (g / a,))
_register("tanh", np.tanh, lambda g, o, a: (g * (1.0 - o * o),))
_register("sqrt", np.sqrt, lambda g, o, a: (g * 0.5 / o,))
_register("square", np.square, lambda g, o, a: (2.0 * g * a,))

_GELU_C = np.sqrt(2.0 / np.pi)


_GELU_K = 0.044715


def _gelu(a):
    a2 = a * a
    return 0.5 * a * (1.0 + np.tanh(a * (_GELU_C + _GELU_C * _GELU_K * a2)))


def _gelu_vjp(g, o, a):
    a2 = a * a
    t = np.tanh(a * (_GELU_C + _GELU_C * _GELU_K * a2))
    du = _GELU_C + 3 * _GELU_C * _GELU_K * a2
    return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du),)


_register("gelu", _gelu, _gelu_vjp)


# ------------------------------------------------------------- normalization

def _softmax(a, axis=-1):
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(a, axis=-1):
    s = a - a.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


_register("softmax", _softmax,
          lambda g, o, a, axis=-1: (o * (g - (g * o).sum(axis=axis, keepdims=True)),))
_register("log_softmax", _log_softmax,
          lambda g, o, a, axis=-1: (g - np.exp(o) * g.sum(axis=axis, keepdims=True),))


def _layernorm(a, eps=1e-5):
    mu = a.mean(axis=-1, keepdims=True)
    var = ((a - mu) ** 2).mean(axis=-1, keepdims=True)
    return (a - mu) / np.sqrt(var + eps)


def _layernorm_vjp(g, o, a, eps=1e-5):
    var = ((a - a.mean(axis=-1, keepdims=True)) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    gm = g.mean(axis=-1, keepdims=True)
    gy = (g * o).mean(axis=-1, keepdims=True)
    return (inv * (g - gm - o * gy),)


_register("layernorm", _layernorm, _layernorm_vjp)


# ---------------------------------------------------------------- structural

def _gather_vjp(g, o, table, idx):
    gt = np.zeros_like(table)
    np.add.at(gt, idx.astype(np.int64), g)
    return gt, None


_register("gather", lambda table, idx: table[idx.astype(np.int64)], _gather_vjp)


def _mean_vjp(g, o, a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, a.shape).copy(),)


def _sum_vjp(g, o, a, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


_register("mean", lambda a, axis=None, keepdims=False: np.asarray(a.mean(axis=axis, keepdims=keepdims)),
          _mean_vjp)
_register("sum", lambda a, axis=None, keepdims=False: np.asarray(a.sum(axis=axis, keepdims=keepdims)),
          _sum_vjp)


def _concat_vjp(g, o, *xs, axis=0):
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


_register("concat", lambda *xs, axis=0: np.concatenate(xs, axis=axis), _concat_vjp)


def _slice_vjp(g, o, a, key=None):
    ga = np.zeros_like(a)
    ga[key] = g
    return (ga,)


_register("slice", lambda a, key=None: np.array(a[key]), _slice_vjp)
_register("reshape", lambda a, shape=None: a.reshape(shape),
          lambda g, o, a, shape=None: (g.reshape(a.shape),))


def _transpose_vjp(g, o, a, axes=None):
    if axes is None:
        return (g.T,)
    return (np.transpose(g, np.argsort(axes)),)


_register("transpose", lambda a, axes=None: np.transpose(a, axes), _transpose_vjp)


# -------------------------------------------------------------------- losses

def _bce(x, y):
    return np.asarray(np.mean(np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))))


def _bce_vjp(g, o, x, y):
    sig = np.exp(-np.logaddexp(0.0, -x))
    return g * (sig - y) / x.size, None


_register("bce_with_logits", _bce, _bce_vjp)


def _xent(logits, target, axis=-1):
    rows = logits.size // logits.shape[axis]
    return np.asarray(-(target * _log_softmax(logits, axis)).sum() / rows)


def _xent_vjp(g, o, logits, target, axis=-1):
    rows = logits.size // logits.shape[axis]
    s = _softmax(logits, axis)
    return g * (s * target.sum(axis=axis, keepdims=True) - target) / rows, None


_register("cross_entropy", _xent, _xent_vjp)


def _l1_vjp(g, o, a, b):
    s = g * np.sign(a - b) / a.size
    return _unbroadcast(s, a.shape), _unbroadcast(-s, b.shape)


def _l2_vjp(g, o, a, b):
    s = g * 2.0 * (a - b) / np.broadcast(a, b).size
    return _unbroadcast(s, a.shape), _unbroadcast(-s, b.shape)


_register("l1", lambda a, b: np.asarray(np.mean(np.abs(a - b))), _l1_vjp)
_register("l2", lambda a, b: np.asarray(np.mean((a - b) ** 2)), _l2_vjp)

# forward is the embedding, the gradient goes to the latent untouched
_register("straight_through", lambda z, e: e.copy(), lambda g, o, z, e: (g, None))


# ------------------------------------------------------------------ wrappers

def matmul(a, b): return apply("matmul", a, b)
def add(a, b): return apply("add", a, b)
def sub(a, b): return apply("sub", a, b)
def mul(a, b): return apply("mul", a, b)
def div(a, b): return apply("div", a, b)
def scale(a, c: float): return apply("scale", a, c=float(c))
def neg(a): return apply("scale", a, c=-1.0)
def sin(a): return apply("sin", a)
def exp(a): return apply("exp", a)
def log(a): return apply("log", a)
def tanh(a): return apply("tanh", a)
def sqrt(a): return apply("sqrt", a)
def square(a): return apply("square", a)
def softmax(a, axis=-1): return apply("softmax", a, axis=axis)
def log_softmax(a, axis=-1): return apply("log_softmax", a, axis=axis)
def layernorm(a, eps=1e-5): return apply("layernorm", a, eps=eps)
def gelu(a): return apply("gelu", a)
def mean(a, axis=None, keepdims=False): return apply("mean", a, axis=axis, keepdims=keepdims)
def sum(a, axis=None, keepdims=False): return apply("sum", a, axis=axis, keepdims=keepdims)  # noqa: A001
def concat(xs, axis=0): return apply("concat", *xs, axis=axis)
def slice(a, key): return apply("slice", a, key=key)  # noqa: A001
def reshape(a, shape): return apply("reshape", a, shape=tuple(shape))
def transpose(a, axes=None): return apply("transpose", a, axes=None if axes is None else tuple(axes))
def l1(a, b): return apply("l1", a, b)
def l2(a, b): return apply("l2", a, b)
def straight_through(z, e): return apply("straight_through", z, e)


def gather(table, idx):
    """Rows ``table[idx]``; ``idx`` is an integer array (not differentiated)."""
    return apply("gather", table, Tensor(np.asarray(idx, dtype=np.float64)))


def bce_with_logits(logits, labels):
    return apply("bce_with_logits", logits, constant(labels))


def cross_entropy(logits, target, axis=-1):
    """Mean over rows of ``-sum(target * log_softmax(logits))``; target is a distribution."""
    return apply("cross_entropy", logits, constant(target), axis=axis)


# ------------------------------------------------------------------ backward

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: "ModelParams | None" = None) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    When ``params`` is given, parameters the loss does not depend on get
    zero gradients instead of ``None``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topo(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.op is None:
            t.grad = g if t.grad is None else t.grad + g
            continue
        pg = t.op.vjp(g, t.data, *(p.data for p in t.parents), **t.kw)
        for p, gp in zip(t.parents, pg):
            if gp is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = gp if k not in grads else grads[k] + gp
    if params is not None:
        for p in params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# -------------------------------------------------------------------- params

class ModelParams(dict):
    """Path -> leaf Tensor. Paths are '/'-separated, e.g. ``enc/q``."""

    @classmethod
    def from_arrays(cls, arrays: dict) -> "ModelParams":
        return cls({k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)
                    for k, v in arrays.items()})

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.items()}

    def grads(self) -> dict:
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.data))
                for k, v in self.items()}

    def zero_grad(self):
        for v in self.values():
            v.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays({k: v.data.copy() for k, v in self.items()})

    def subset(self, prefix: str) -> "ModelParams":
        return ModelParams({k: v for k, v in self.items() if k.startswith(prefix)})

    def n_values(self) -> int:
        return int(np.sum([v.data.size for v in self.values()]))


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)   # path -> max relative error
    tol: float = 1e-4
    failing_ops: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def failing(self) -> list:
        return [k for k, e in self.errors.items() if e >= self.tol]


def _rel_err(a, n, floor):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(params: ModelParams, loss_fn: Callable[[ModelParams], Tensor],
               h: float = 1e-4, tol: float = 1e-4, max_entries: int | None = None,
               seed: int = 0, abs_floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of ``loss_fn(params)`` with central differences.

    ``max_entries`` caps the number of entries probed per parameter tensor
    (chosen at random with ``seed``); ``None`` probes every entry. When any
    parameter fails, each op on the loss graph is audited individually and
    the offending op names are listed in ``failing_ops``.
    """
    report = GradCheckReport(tol=tol)
    if not params:
        return report
    params.zero_grad()
    tape: list = []
    with _freeze("record", tape):
        loss = loss_fn(params)
    backward(loss, params)
    analytic = {k: v.grad.copy() for k, v in params.items()}
    rng = np.random.default_rng(seed)
    for path, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        worst = 0.0
        with no_grad():
            for i in idx:
                old = flat[i]
                flat[i] = old + h
                with _freeze("replay", tape):
                    fp = loss_fn(params).item()
                flat[i] = old - h
                with _freeze("replay", tape):
                    fm = loss_fn(params).item()
                flat[i] = old
                num = (fp - fm) / (2 * h)
                worst = max(worst, float(_rel_err(analytic[path].reshape(-1)[i], num, abs_floor)))
        report.errors[path] = worst
    if not report.passed:
        report.failing_ops = audit_ops(loss, h=h, tol=tol, seed=seed, abs_floor=abs_floor)
    return report


def audit_ops(loss: Tensor, h: float = 1e-4, tol: float = 1e-4, seed: int = 0,
              abs_floor: float = 1e-6) -> list[str]:
    """Check every recorded op's vjp against a directional central difference."""
    rng = np.random.default_rng(seed)
    bad = []
    for t in _topo(loss):
        if t.op is None:
            continue
        xs = [p.data for p in t.parents]
        u = rng.normal(size=t.data.shape)
        gs = t.op.vjp(u, t.data, *xs, **t.kw)
        for j, (p, g) in enumerate(zip(t.parents, gs)):
            if g is None or not p.requires_grad:
                continue
            d = rng.normal(size=xs[j].shape)
            plus = list(xs)
            minus = list(xs)
            plus[j] = xs[j] + h * d
            minus[j] = xs[j] - h * d
            num = np.sum(u * (t.op.fwd(*plus, **t.kw) - t.op.fwd(*minus, **t.kw))) / (2 * h)
            if _rel_err(np.sum(g * d), num, abs_floor) >= tol and t.op.name not in bad:
                bad.append(t.op.name)
    return bad
