"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Every differentiable operation creates a :class:`Tensor` carrying its value,
its parents and a vector-Jacobian product. While a :class:`Tape` is active the
results are recorded in creation order, which is a valid topological order;
``Tape.backward`` walks it in reverse, so gradient accumulation order is fixed
and runs are bit-reproducible.

Only the operations the model needs are provided.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_ACTIVE_TAPES: list["Tape"] = []


class BackwardError(RuntimeError):
    """Raised when gradients are requested without a recorded forward pass."""


class Tensor:
    __slots__ = ("value", "grad", "parents", "vjp", "requires_grad", "name")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, name=None):
        # python scalars stay unwrapped so they do not promote float32 arrays
        self.value = value if type(value) in (int, float) else np.asarray(value)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self.vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = vjp
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def dtype(self):
        return np.result_type(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

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
        return mul(self, 1.0 / _value(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def parameter(value, name=None) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(np.array(value), requires_grad=True, name=name)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _value(x):
    return x.value if isinstance(x, Tensor) else x


class Tape:
    """Records operations executed inside its context."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._ids: set[int] = set()

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def record(self, node: Tensor):
        self.nodes.append(node)
        self._ids.add(id(node))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
        if id(loss) not in self._ids:
            raise BackwardError("backward called before a forward pass recorded this loss")
        if seed is None:
            if np.size(loss.value) != 1:
                raise BackwardError("loss must be a scalar unless a seed gradient is given")
            seed = np.ones_like(loss.value)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                if parent.vjp is None:
                    if parent.requires_grad:
                        parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.vjp is not None


def _needs_record(parents: Iterable[Tensor]) -> bool:
    return bool(_ACTIVE_TAPES) and any(_tracked(p) for p in parents)


def _make(value, parents, vjp) -> Tensor:
    parents = tuple(parents)
    if not _needs_record(parents):
        return Tensor(value)
    out = Tensor(value, parents, vjp)
    for tape in _ACTIVE_TAPES:
        tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _make(
        a.value + b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g, a.shape) if _tracked(a) else None,
            _unbroadcast(g, b.shape) if _tracked(b) else None,
        ),
    )


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _make(
        a.value - b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g, a.shape) if _tracked(a) else None,
            _unbroadcast(-g, b.shape) if _tracked(b) else None,
        ),
    )


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    return _make(
        av * bv,
        (a, b),
        lambda g: (
            _unbroadcast(g * bv, a.shape) if _tracked(a) else None,
            _unbroadcast(g * av, b.shape) if _tracked(b) else None,
        ),
    )


def _sigmoid(v):
    # split on sign so exp never overflows
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1 / (1 + e), e / (1 + e)).astype(v.dtype, copy=False)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _make(x.value * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return _make(y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.value)
    return _make(y, (x,), lambda g: (g * y * (1 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.value)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    v = x.value
    return _make(np.log(v), (x,), lambda g: (g / v,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    v = x.value
    inside = (v >= lo) & (v <= hi)
    return _make(np.clip(v, lo, hi), (x,), lambda g: (g * inside,))


# -- reductions and shape ----------------------------------------------------

def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.value.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = range(x.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return _make(
        np.ascontiguousarray(x.value.transpose(axes)),
        (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
    )


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(x.value[index], (x,), vjp)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def stack(xs: Sequence[Tensor], axis=0) -> Tensor:
    xs = [constant(x) for x in xs]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _make(np.stack([x.value for x in xs], axis=axis), xs, vjp)


def concat(xs: Sequence[Tensor], axis=0) -> Tensor:
    xs = [constant(x) for x in xs]
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(
        np.concatenate([x.value for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape) if _tracked(a) else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape) if _tracked(b) else None
        return ga, gb

    return _make(av @ bv, (a, b), vjp)


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum; indices are distinct per operand and each appears in the other input or the output."""
    a, b = constant(a), constant(b)
    ins, out = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s):
            raise ValueError(f"einsum {spec!r}: repeated index within an operand")
        if any(c not in other and c not in out for c in s):
            raise ValueError(f"einsum {spec!r}: index summed within a single operand")
    av, bv = a.value, b.value
    return _make(
        np.einsum(spec, av, bv, optimize=True),
        (a, b),
        lambda g: (
            np.einsum(f"{out},{sb}->{sa}", g, bv, optimize=True) if _tracked(a) else None,
            np.einsum(f"{out},{sa}->{sb}", g, av, optimize=True) if _tracked(b) else None,
        ),
    )


# -- composite primitives ----------------------------------------------------

def softmax(x: Tensor, axis=-1) -> Tensor:
    v = x.value
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(
        y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    )


def temporal_conv(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Convolve ``x`` [N, C, T, J] along T with ``weight`` [D, C, K] and zero padding (K-1)/2.

    The kernel is shared across joints. Output length is ceil(T / stride).
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    xv, wv = x.value, weight.value
    n, c, t, j = xv.shape
    d, c_w, k = wv.shape
    if c_w != c:
        raise ValueError(f"weight expects {c_w} input channels, got {c}")
    if k % 2 == 0:
        raise ValueError(f"temporal kernel must be odd, got {k}")
    pad = (k - 1) // 2
    t_out = -(-t // stride)
    xp = np.zeros((n, c, t + 2 * pad, j), dtype=xv.dtype)
    xp[:, :, pad:pad + t] = xv
    span = stride * (t_out - 1) + 1

    taps = np.ascontiguousarray(wv.transpose(2, 0, 1))  # [K, D, C]

    def window(tap):
        # [N, C, T_out * J]; a view when stride == 1
        if stride == 1:
            return xp[:, :, tap:tap + span].reshape(n, c, t_out * j)
        return np.ascontiguousarray(xp[:, :, tap:tap + span:stride]).reshape(n, c, t_out * j)

    out = np.zeros((n, d, t_out * j), dtype=np.result_type(xv, wv))
    for tap in range(k):
        out += np.matmul(taps[tap], window(tap))
    out += bias.value[None, :, None]

    def vjp(g):
        g3 = g.reshape(n, d, t_out * j)
        gx = np.zeros_like(xp) if _tracked(x) else None
        gw = np.empty_like(taps)
        for tap in range(k):
            gw[tap] = np.matmul(g3, window(tap).transpose(0, 2, 1)).sum(axis=0)
            if gx is not None:
                gx[:, :, tap:tap + span:stride] += np.matmul(taps[tap].T, g3).reshape(n, c, t_out, j)
        gb = g3.sum(axis=(0, 2))
        return (None if gx is None else gx[:, :, pad:pad + t]), gw.transpose(1, 2, 0), gb

    return _make(out.reshape(n, d, t_out, j), (x, weight, bias), vjp)


def graph_conv(x: Tensor, adjacency: Tensor, weight: Tensor) -> Tensor:
    """out[n,d,t,j] = sum_m sum_k sum_c adjacency[m,j,k] weight[m,d,c] x[n,c,t,k].

    ``x`` is [N, C, T, J], ``adjacency`` [M, J, J], ``weight`` [M, D, C].
    """
    xv, av, wv = x.value, adjacency.value, weight.value
    n, c, t, j = xv.shape
    m, d, c_w = wv.shape
    if c_w != c or av.shape != (m, j, j):
        raise ValueError(f"graph_conv shapes do not fit: x {xv.shape}, adjacency {av.shape}, weight {wv.shape}")
    x3 = xv.reshape(n, c, t * j)
    w2 = wv.reshape(m * d, c)
    # channel mixing first, then one matmul over (group, source joint)
    z = np.matmul(w2, x3).reshape(n, m, d, t, j).transpose(0, 2, 3, 1, 4).reshape(n * d * t, m * j)
    a2 = av.transpose(0, 2, 1).reshape(m * j, j)
    out = (z @ a2).reshape(n, d, t, j)

    def vjp(g):
        g2 = g.reshape(n * d * t, j)
        ga = (z.T @ g2).reshape(m, j, j).transpose(0, 2, 1) if _tracked(adjacency) else None
        gz = (g2 @ a2.T).reshape(n, d, t, m, j).transpose(0, 3, 1, 2, 4).reshape(n, m * d, t * j)
        gw = np.matmul(gz, x3.transpose(0, 2, 1)).sum(axis=0).reshape(m, d, c) if _tracked(weight) else None
        gx = np.matmul(w2.T, gz).reshape(n, c, t, j) if _tracked(x) else None
        return gx, ga, gw

    return _make(out, (x, adjacency, weight), vjp)


def lstm(x: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """One LSTM direction over ``x`` [T, B, C] from zero state; returns hidden states [T, B, H].

    Stacked gate order is input, forget, cell candidate, output. States are
    returned in input time order for either direction. The gradient is
    backpropagation through time over the stored gate activations.
    """
    xv, wi, wh, bv = x.value, w_ih.value, w_hh.value, b.value
    T, B, C = xv.shape
    H = wh.shape[1]
    if wi.shape != (4 * H, C) or wh.shape != (4 * H, H) or bv.shape != (4 * H,):
        raise ValueError("LSTM weight shapes do not match input width and hidden size")
    dtype = np.result_type(xv, wi)
    order = list(range(T - 1, -1, -1) if reverse else range(T))
    pre_x = (xv.reshape(T * B, C) @ wi.T + bv).reshape(T, B, 4 * H)
    gates = np.empty((T, B, 4 * H), dtype=dtype)  # activated i, f, g, o
    cells = np.empty((T, B, H), dtype=dtype)
    hs = np.empty((T, B, H), dtype=dtype)
    h = np.zeros((B, H), dtype=dtype)
    c = np.zeros((B, H), dtype=dtype)
    for step in order:
        a = pre_x[step] + h @ wh.T
        act = gates[step]
        act[:, :2 * H] = _sigmoid(a[:, :2 * H])
        act[:, 2 * H:3 * H] = np.tanh(a[:, 2 * H:3 * H])
        act[:, 3 * H:] = _sigmoid(a[:, 3 * H:])
        c = act[:, H:2 * H] * c + act[:, :H] * act[:, 2 * H:3 * H]
        h = act[:, 3 * H:] * np.tanh(c)
        cells[step] = c
        hs[step] = h

    def vjp(g):
        da_all = np.empty((T, B, 4 * H), dtype=dtype)
        dh_next = np.zeros((B, H), dtype=dtype)
        dc_next = np.zeros((B, H), dtype=dtype)
        zero = np.zeros((B, H), dtype=dtype)
        for pos in range(T - 1, -1, -1):
            step = order[pos]
            act = gates[step]
            i, f, cand, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
            c_prev = cells[order[pos - 1]] if pos > 0 else zero
            tc = np.tanh(cells[step])
            dh = g[step] + dh_next
            dc = dc_next + dh * o * (1 - tc * tc)
            da = da_all[step]
            da[:, :H] = dc * cand * i * (1 - i)
            da[:, H:2 * H] = dc * c_prev * f * (1 - f)
            da[:, 2 * H:3 * H] = dc * i * (1 - cand * cand)
            da[:, 3 * H:] = dh * tc * o * (1 - o)
            dh_next = da @ wh
            dc_next = dc * f
        h_prev = np.zeros_like(hs)
        if reverse:
            h_prev[:-1] = hs[1:]
        else:
            h_prev[1:] = hs[:-1]
        da2 = da_all.reshape(T * B, 4 * H)
        gx = (da2 @ wi).reshape(T, B, C) if _tracked(x) else None
        gwi = da2.T @ xv.reshape(T * B, C)
        gwh = da2.T @ h_prev.reshape(T * B, H)
        gb = da2.sum(axis=0)
        return gx, gwi, gwh, gb

    return _make(hs, (x, w_ih, w_hh, b), vjp)


# -- parameter handling ------------------------------------------------------

class ParameterStore(OrderedDict):
    """Ordered name -> leaf tensor mapping with a gradient buffer per entry."""

    def zero_grad(self):
        for p in self.values():
            p.grad = None

    def grads(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            (name, np.zeros_like(p.value) if p.grad is None else p.grad)
            for name, p in self.items()
        )

    def values_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.value) for name, p in self.items())

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore(
            (name, parameter(p.value.astype(dtype), name=name)) for name, p in self.items()
        )

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            (name, parameter(p.value.copy(), name=name)) for name, p in self.items()
        )

    def size(self) -> int:
        return int(np.sum([p.value.size for p in self.values()]))


# -- gradient checking -------------------------------------------------------

@dataclass
class GradReport:
    tolerance: float
    epsilon: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> dict[str, bool]:
        return {k: v <= self.tolerance for k, v in self.max_rel_error.items()}

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "tolerance": self.tolerance,
            "all_passed": self.all_passed,
            "groups": {
                name: {
                    "max_rel_error": err,
                    "checked": self.checked[name],
                    "passed": err <= self.tolerance,
                }
                for name, err in self.max_rel_error.items()
            },
        }


def relative_error(analytic, numeric, floor: float = 1e-8):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(
    loss_fn: Callable[[ParameterStore], Tensor],
    params: ParameterStore,
    epsilon: float = 1e-4,
    tolerance: float = 1e-3,
    per_group: int = 20,
    seed: int = 0,
    analytic: dict[str, np.ndarray] | None = None,
) -> GradReport:
    """Compare reverse-mode gradients of ``loss_fn`` against central differences.

    ``params`` should hold float64 values. ``per_group`` coordinates are sampled
    per parameter (all of them if the group is smaller). ``analytic`` overrides
    the reverse-mode gradients, which is how a corrupted gradient is checked.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if analytic is None:
        params.zero_grad()
        with Tape() as tape:
            loss = loss_fn(params)
        tape.backward(loss)
        analytic = params.grads()

    rng = np.random.default_rng(seed)
    report = GradReport(tolerance=tolerance, epsilon=epsilon)
    for name, p in params.items():
        flat = p.value.reshape(-1)
        count = min(per_group, flat.size)
        coords = np.sort(rng.choice(flat.size, size=count, replace=False))
        errors = []
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(loss_fn(params).value)
            flat[i] = orig - epsilon
            down = float(loss_fn(params).value)
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon)
            errors.append(float(relative_error(analytic[name].reshape(-1)[i], numeric)))
        report.max_rel_error[name] = max(errors)
        report.checked[name] = count
    return report
