"""Minimal reverse-mode autodiff on dense float64 arrays.

Everything in this package runs on top of the primitives here: named
parameter storage with paired gradient buffers, a replayable tape, dense
layers, the Gaussian log-density, RMSprop, and a central-difference
gradient checker. Values are 2-D float64 arrays shaped (batch, features);
plain vectors are promoted to one-row matrices.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

RMSPROP_EPS = 1e-5


class GradError(Exception):
    """Base class for errors raised by the autodiff layer."""


class ShapeMismatch(GradError):
    """Operand shapes are incompatible; message names the offending layer/op."""


class NonFiniteGradient(GradError):
    """An update saw NaN/Inf gradients and was aborted."""


class TapeConsumed(GradError):
    """backward() was called twice on the same tape."""


def _to2d(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeMismatch(f"expected scalar/vector/matrix, got ndim={a.ndim}")
    return a


class Node:
    """A value in the computation graph. Leaf parameters alias their
    ParamStore gradient buffer, so accumulation lands in the store."""

    __slots__ = ("value", "grad", "requires")

    def __init__(self, value, requires: bool = False, grad: np.ndarray | None = None):
        self.value = _to2d(value)
        self.requires = requires
        if grad is None and requires:
            grad = np.zeros_like(self.value)
        self.grad = grad

    def _acc(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g


def constant(value) -> Node:
    return Node(value, requires=False)


class Tape:
    """Ordered record of the primitive ops of one forward pass.

    backward() replays the record in reverse exactly once; parameters that
    did not participate in the forward pass are never touched, so their
    stored gradients stay exactly zero.
    """

    def __init__(self):
        self._ops: list[Callable[[], None]] = []
        self._consumed = False

    def _rec(self, fn: Callable[[], None]) -> None:
        self._ops.append(fn)

    def backward(self, output: Node, upstream) -> None:
        if self._consumed:
            raise TapeConsumed("tape already replayed; build a new forward pass")
        self._consumed = True
        up = np.asarray(upstream, dtype=np.float64)
        if up.shape != output.value.shape:
            try:
                up = np.broadcast_to(up, output.value.shape).copy()
            except ValueError:
                raise ShapeMismatch(
                    f"upstream shape {up.shape} does not match output {output.value.shape}"
                )
        output._acc(up)
        for fn in reversed(self._ops):
            fn()


class ParamStore:
    """Flat named collection of float64 parameter arrays with paired grads."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, values) -> None:
        if name in self._values:
            raise GradError(f"parameter {name!r} already exists")
        v = np.array(values, dtype=np.float64)
        self._values[name] = v
        self._grads[name] = np.zeros_like(v)

    def names(self) -> list[str]:
        return list(self._values)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def values(self, name: str) -> np.ndarray:
        return self._values[name]

    def grads(self, name: str) -> np.ndarray:
        return self._grads[name]

    def node(self, name: str, tape: Tape | None = None) -> Node:
        """Leaf node for a parameter. Grad buffer aliases the store."""
        v = self._values[name]
        if tape is None:
            return Node(v, requires=False)
        return Node(v, requires=True, grad=self._grads[name])

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def n_params(self) -> int:
        return sum(v.size for v in self._values.values())

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name, v in self._values.items():
            out.add(name, v)
        return out

    def copy_from(self, other: "ParamStore") -> None:
        """Overwrite values with another store's (byte-equal afterwards)."""
        if set(self._values) != set(other._values):
            raise GradError("parameter sets differ; cannot sync")
        for name, v in other._values.items():
            np.copyto(self._values[name], v)

    def values_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self._values.values())

    def grads_finite(self) -> bool:
        return all(np.isfinite(g).all() for g in self._grads.values())


# ---------------------------------------------------------------------------
# primitives


def _want(tape: Tape | None, *nodes: Node) -> bool:
    return tape is not None and any(n.requires for n in nodes)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def matmul(tape: Tape | None, x: Node, w: Node, ctx: str = "matmul") -> Node:
    if x.value.shape[1] != w.value.shape[0]:
        raise ShapeMismatch(
            f"{ctx}: input has {x.value.shape[1]} features, weight expects {w.value.shape[0]}"
        )
    out = Node(x.value @ w.value, requires=_want(tape, x, w))
    if out.requires:
        def back():
            g = out.grad
            if w.requires:
                w._acc(x.value.T @ g)
            if x.requires:
                x._acc(g @ w.value.T)
        tape._rec(back)
    return out


def add(tape: Tape | None, a: Node, b: Node) -> Node:
    out = Node(a.value + b.value, requires=_want(tape, a, b))
    if out.requires:
        def back():
            g = out.grad
            if a.requires:
                a._acc(_unbroadcast(g, a.value.shape))
            if b.requires:
                b._acc(_unbroadcast(g, b.value.shape))
        tape._rec(back)
    return out


def sub(tape: Tape | None, a: Node, b: Node) -> Node:
    out = Node(a.value - b.value, requires=_want(tape, a, b))
    if out.requires:
        def back():
            g = out.grad
            if a.requires:
                a._acc(_unbroadcast(g, a.value.shape))
            if b.requires:
                b._acc(_unbroadcast(-g, b.value.shape))
        tape._rec(back)
    return out


def mul(tape: Tape | None, a: Node, b: Node) -> Node:
    out = Node(a.value * b.value, requires=_want(tape, a, b))
    if out.requires:
        av, bv = a.value, b.value
        def back():
            g = out.grad
            if a.requires:
                a._acc(_unbroadcast(g * bv, av.shape))
            if b.requires:
                b._acc(_unbroadcast(g * av, bv.shape))
        tape._rec(back)
    return out


def scale(tape: Tape | None, x: Node, c: float) -> Node:
    out = Node(x.value * c, requires=_want(tape, x))
    if out.requires:
        def back():
            x._acc(out.grad * c)
        tape._rec(back)
    return out


def _elu(v: np.ndarray) -> np.ndarray:
    out = v.copy()
    neg = v <= 0.0
    out[neg] = np.expm1(v[neg])
    return out


def _elu_deriv(v: np.ndarray) -> np.ndarray:
    d = np.ones_like(v)
    neg = v <= 0.0
    d[neg] = np.exp(v[neg])
    return d


ACTIVATIONS = ("elu", "relu", "none")


def activation(tape: Tape | None, x: Node, kind: str) -> Node:
    if kind == "none":
        return x
    if kind == "relu":
        value = np.maximum(x.value, 0.0)
        deriv = (x.value > 0.0).astype(np.float64)
    elif kind == "elu":
        value = _elu(x.value)
        deriv = _elu_deriv(x.value)
    else:
        raise GradError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    out = Node(value, requires=_want(tape, x))
    if out.requires:
        def back():
            x._acc(out.grad * deriv)
        tape._rec(back)
    return out


def abs_(tape: Tape | None, x: Node) -> Node:
    out = Node(np.abs(x.value), requires=_want(tape, x))
    if out.requires:
        sgn = np.sign(x.value)
        def back():
            x._acc(out.grad * sgn)
        tape._rec(back)
    return out


def softplus(tape: Tape | None, x: Node) -> Node:
    out = Node(np.logaddexp(0.0, x.value), requires=_want(tape, x))
    if out.requires:
        sig = 1.0 / (1.0 + np.exp(-x.value))
        def back():
            x._acc(out.grad * sig)
        tape._rec(back)
    return out


def add_const(tape: Tape | None, x: Node, c: float) -> Node:
    out = Node(x.value + c, requires=_want(tape, x))
    if out.requires:
        def back():
            x._acc(out.grad)
        tape._rec(back)
    return out


def slice_cols(tape: Tape | None, x: Node, start: int, stop: int) -> Node:
    out = Node(x.value[:, start:stop], requires=_want(tape, x))
    if out.requires:
        def back():
            g = np.zeros_like(x.value)
            g[:, start:stop] = out.grad
            x._acc(g)
        tape._rec(back)
    return out


def concat(tape: Tape | None, parts: Sequence[Node]) -> Node:
    """Concatenate along the feature axis."""
    rows = {p.value.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeMismatch(f"concat: row counts differ: {sorted(rows)}")
    out = Node(np.concatenate([p.value for p in parts], axis=1),
               requires=_want(tape, *parts))
    if out.requires:
        widths = [p.value.shape[1] for p in parts]
        def back():
            g = out.grad
            off = 0
            for p, w in zip(parts, widths):
                if p.requires:
                    p._acc(g[:, off:off + w])
                off += w
        tape._rec(back)
    return out


def take_per_row(tape: Tape | None, x: Node, idx) -> Node:
    """Select one column per row: out[b, 0] = x[b, idx[b]]."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(x.value.shape[0])
    out = Node(x.value[rows, idx].reshape(-1, 1), requires=_want(tape, x))
    if out.requires:
        def back():
            g = np.zeros_like(x.value)
            g[rows, idx] = out.grad[:, 0]
            x._acc(g)
        tape._rec(back)
    return out


def rowdot(tape: Tape | None, a: Node, b: Node) -> Node:
    """Per-row dot product: (B,F)·(B,F) -> (B,1)."""
    if a.value.shape != b.value.shape:
        raise ShapeMismatch(f"rowdot: {a.value.shape} vs {b.value.shape}")
    out = Node((a.value * b.value).sum(axis=1, keepdims=True),
               requires=_want(tape, a, b))
    if out.requires:
        av, bv = a.value, b.value
        def back():
            g = out.grad
            if a.requires:
                a._acc(g * bv)
            if b.requires:
                b._acc(g * av)
        tape._rec(back)
    return out


def rowsum(tape: Tape | None, x: Node) -> Node:
    out = Node(x.value.sum(axis=1, keepdims=True), requires=_want(tape, x))
    if out.requires:
        def back():
            x._acc(np.broadcast_to(out.grad, x.value.shape))
        tape._rec(back)
    return out


def mix_matvec(tape: Tape | None, q: Node, w: Node, n: int, h: int) -> Node:
    """Per-row matrix-vector product with row-specific weights.

    q is (B, n), w is (B, n*h) holding a row-major (n, h) matrix per row;
    out[b, j] = sum_i q[b, i] * w[b, i*h + j].
    """
    bsz = q.value.shape[0]
    if q.value.shape[1] != n or w.value.shape != (bsz, n * h):
        raise ShapeMismatch(
            f"mix_matvec: q {q.value.shape}, w {w.value.shape}, n={n}, h={h}"
        )
    wm = w.value.reshape(bsz, n, h)
    out = Node(np.einsum("bn,bnh->bh", q.value, wm), requires=_want(tape, q, w))
    if out.requires:
        qv = q.value
        def back():
            g = out.grad
            if q.requires:
                q._acc(np.einsum("bh,bnh->bn", g, wm))
            if w.requires:
                w._acc(np.einsum("bn,bh->bnh", qv, g).reshape(bsz, n * h))
        tape._rec(back)
    return out


def sum_all(tape: Tape | None, x: Node) -> Node:
    out = Node(np.array([[x.value.sum()]]), requires=_want(tape, x))
    if out.requires:
        def back():
            x._acc(np.broadcast_to(out.grad, x.value.shape))
        tape._rec(back)
    return out


def mean_all(tape: Tape | None, x: Node) -> Node:
    size = x.value.size
    out = Node(np.array([[x.value.mean()]]), requires=_want(tape, x))
    if out.requires:
        def back():
            x._acc(np.broadcast_to(out.grad / size, x.value.shape))
        tape._rec(back)
    return out


def gaussian_logpdf(tape: Tape | None, z: Node, mu: Node, sigma: Node) -> Node:
    """Row-wise diagonal-Gaussian log-density, (B,K) inputs -> (B,1).

    logp = sum_k [ -0.5*ln(2*pi) - ln(sigma_k) - (z_k - mu_k)^2 / (2*sigma_k^2) ]
    """
    if not (z.value.shape == mu.value.shape == sigma.value.shape):
        raise ShapeMismatch(
            f"gaussian_logpdf: z {z.value.shape}, mu {mu.value.shape}, sigma {sigma.value.shape}"
        )
    if np.any(sigma.value <= 0.0):
        raise GradError("gaussian_logpdf: sigma must be strictly positive")
    k = z.value.shape[1]
    diff = z.value - mu.value
    var = sigma.value ** 2
    rows = (-0.5 * LOG_2PI * k
            - np.log(sigma.value).sum(axis=1)
            - (diff ** 2 / (2.0 * var)).sum(axis=1))
    out = Node(rows.reshape(-1, 1), requires=_want(tape, z, mu, sigma))
    if out.requires:
        def back():
            g = out.grad  # (B,1) broadcasts over K
            if mu.requires:
                mu._acc(g * diff / var)
            if sigma.requires:
                sigma._acc(g * (-1.0 / sigma.value + diff ** 2 / (var * sigma.value)))
            if z.requires:
                z._acc(g * (-diff / var))
        tape._rec(back)
    return out


# ---------------------------------------------------------------------------
# dense networks


def mlp_param_names(prefix: str, arch: Sequence[int]) -> list[str]:
    names = []
    for layer in range(len(arch) - 1):
        names.append(f"{prefix}/W{layer}")
        names.append(f"{prefix}/b{layer}")
    return names


def init_mlp(store: ParamStore, prefix: str, arch: Sequence[int],
             rng: np.random.Generator) -> None:
    """Allocate MLP parameters with U(-1/sqrt(fan_in), ..) init."""
    if len(arch) < 2:
        raise GradError(f"{prefix}: arch needs at least input and output sizes")
    for layer in range(len(arch) - 1):
        fan_in, fan_out = arch[layer], arch[layer + 1]
        bound = 1.0 / math.sqrt(fan_in)
        store.add(f"{prefix}/W{layer}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        store.add(f"{prefix}/b{layer}", rng.uniform(-bound, bound, size=(1, fan_out)))


def forward_mlp(store: ParamStore, prefix: str, x, arch: Sequence[int],
                act: str = "elu", tape: Tape | None = None) -> Node:
    """Run a dense net: hidden layers use `act`, the last layer is linear.

    x may be a Node or an array; arrays are treated as constants. Raises
    ShapeMismatch naming the layer whose weights do not fit.
    """
    h = x if isinstance(x, Node) else constant(x)
    if h.value.shape[1] != arch[0]:
        raise ShapeMismatch(
            f"{prefix}: input has {h.value.shape[1]} features, arch expects {arch[0]}"
        )
    n_layers = len(arch) - 1
    for layer in range(n_layers):
        wname, bname = f"{prefix}/W{layer}", f"{prefix}/b{layer}"
        if wname not in store:
            raise ShapeMismatch(f"{prefix}: missing parameters for layer {wname}")
        w = store.node(wname, tape)
        b = store.node(bname, tape)
        if w.value.shape != (arch[layer], arch[layer + 1]):
            raise ShapeMismatch(
                f"{wname}: stored shape {w.value.shape}, arch expects "
                f"({arch[layer]}, {arch[layer + 1]})"
            )
        h = add(tape, matmul(tape, h, w, ctx=wname), b)
        if layer < n_layers - 1:
            h = activation(tape, h, act)
    return h


# ---------------------------------------------------------------------------
# optimizer


class RmspropState:
    """Per-parameter running square averages plus the step hyperparameters."""

    def __init__(self, store: ParamStore, lr: float = 5e-4, alpha: float = 0.99):
        self.lr = lr
        self.alpha = alpha
        self.sq_avg = {name: np.zeros_like(store.values(name)) for name in store.names()}


def rmsprop_step(store: ParamStore, state: RmspropState) -> None:
    """v <- a*v + (1-a)*g^2 ; p <- p - lr*g/(sqrt(v)+1e-5); zero grads after.

    Rejects non-finite gradients before touching any parameter.
    """
    if not store.grads_finite():
        raise NonFiniteGradient("rmsprop_step: non-finite gradient, update aborted")
    a = state.alpha
    for name in store.names():
        g = store.grads(name)
        v = state.sq_avg[name]
        v *= a
        v += (1.0 - a) * g * g
        store.values(name)[...] -= state.lr * g / (np.sqrt(v) + RMSPROP_EPS)
        g.fill(0.0)
    if not store.values_finite():
        raise NonFiniteGradient("rmsprop_step: parameters became non-finite")


# ---------------------------------------------------------------------------
# verification


def finite_diff_check(loss_fn: Callable[[], float],
                      stores: ParamStore | Iterable[ParamStore],
                      step: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn must be deterministic, return the scalar loss, and backpropagate
    into the grads of `stores` when called. Error per coordinate is
    |analytic - numeric| / max(1e-8, |numeric|); the max over all
    coordinates of all stores is returned. Grads are left zeroed.
    """
    if isinstance(stores, ParamStore):
        stores = [stores]
    stores = list(stores)

    for s in stores:
        s.zero_grads()
    loss_fn()
    analytic = [{name: s.grads(name).copy() for name in s.names()} for s in stores]
    for s in stores:
        s.zero_grads()

    worst = 0.0
    for s, grads in zip(stores, analytic):
        for name in s.names():
            v = s.values(name)
            flat = v.reshape(-1)
            gflat = grads[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                lp = loss_fn()
                flat[i] = orig - step
                lm = loss_fn()
                flat[i] = orig
                numeric = (lp - lm) / (2.0 * step)
                rel = abs(gflat[i] - numeric) / max(1e-8, abs(numeric))
                if rel > worst:
                    worst = rel
    for s in stores:
        s.zero_grads()
    return worst
