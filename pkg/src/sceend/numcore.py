"""Dense 2-D matrix kernels with tape-based reverse-mode differentiation.

Every value is a float64 numpy array with exactly two axes.  Operations take
:class:`Node` objects (or plain arrays, which are treated as constants) and
return a new :class:`Node`.  When at least one input lives on a :class:`Tape`
the operation is recorded there together with a closure that maps the output
gradient to input gradients; otherwise nothing is recorded, which is how
inference and other no-grad passes run.

    >>> tape = Tape()
    >>> w = tape.param("w", np.ones((1, 2)))
    >>> loss = sum_all(matmul(w, np.array([[1.0], [2.0]])))
    >>> backward(tape, loss)["w"]
    array([[1., 2.]])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

Matrix = np.ndarray


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an API precondition that is not about shapes is violated."""


class Node:
    """A matrix value, optionally recorded on a tape."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value: Matrix, tape: Tape | None = None, index: int = -1):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def __repr__(self) -> str:
        flag = "tracked" if self.tracked else "const"
        return f"Node(shape={self.shape}, {flag})"


class Tape:
    """Ordered record of primitive operations.

    Entries are appended in execution order, so inputs always precede the
    nodes that consume them and a reverse sweep is a valid topological order.
    """

    def __init__(self):
        self._inputs: list[tuple[int, ...]] = []
        self._backward: list[Callable | None] = []
        self._params: dict[str, int] = {}
        self._shapes: list[tuple[int, int]] = []

    def __len__(self) -> int:
        return len(self._backward)

    def param(self, name: str, value: Matrix) -> Node:
        if name in self._params:
            raise ContractError(f"parameter {name!r} registered twice")
        node = self._push(_check2d(value), (), None)
        self._params[name] = node.index
        return node

    def _push(self, value: Matrix, inputs: tuple[int, ...], fn) -> Node:
        self._inputs.append(inputs)
        self._backward.append(fn)
        self._shapes.append(value.shape)
        return Node(value, self, len(self._backward) - 1)


def _check2d(a) -> Matrix:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(_check2d(x))


def constant(x) -> Node:
    """Untracked copy-free view of ``x``; gradients never flow into it."""
    if isinstance(x, Node):
        return Node(x.value)
    return Node(_check2d(x))


def _record(value: Matrix, inputs: Sequence[Node], fn) -> Node:
    """Create the output node, recording it if any input is tracked.

    ``fn(g)`` must return one gradient (or None) per input.
    """
    tape = None
    for n in inputs:
        if n.tape is not None:
            if tape is not None and n.tape is not tape:
                raise ContractError("operands recorded on different tapes")
            tape = n.tape
    if tape is None:
        return Node(value)
    return tape._push(value, tuple(n.index if n.tape is not None else -1 for n in inputs), fn)


def _unbroadcast(g: Matrix, shape: tuple[int, int]) -> Matrix:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(a: Matrix, b: Matrix, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    av, bv = a.value, b.value

    def fn(g):
        return g @ bv.T, av.T @ g

    return _record(av @ bv, (a, b), fn)


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a.value, b.value, "add")
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.value + b.value, (a, b), fn)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a.value, b.value, "sub")
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _record(a.value - b.value, (a, b), fn)


def mul(a, b) -> Node:
    """Elementwise product with row/column broadcasting."""
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a.value, b.value, "mul")
    av, bv = a.value, b.value

    def fn(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _record(av * bv, (a, b), fn)


def scale(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)
    return _record(a.value * c, (a,), lambda g: (g * c,))


def _stable_sigmoid(x: Matrix) -> Matrix:
    # tanh form never overflows; the clip keeps the open interval where it rounds
    out = 0.5 + 0.5 * np.tanh(0.5 * x)
    return np.clip(out, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)


def sigmoid(a) -> Node:
    a = as_node(a)
    s = _stable_sigmoid(a.value)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Node:
    a = as_node(a)
    t = np.tanh(a.value)
    return _record(t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0
    return _record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def softmax_cols(a) -> Node:
    """Column-wise softmax; each column of the result sums to one."""
    a = as_node(a)
    x = a.value - a.value.max(axis=0, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=0, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=0, keepdims=True)),)

    return _record(p, (a,), fn)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Node:
    """Normalize every column to zero mean / unit variance, then apply
    the per-row affine ``gain * x + bias`` (gain and bias are rows x 1)."""
    a, gain, bias = as_node(a), as_node(gain), as_node(bias)
    rows = a.shape[0]
    if gain.shape != (rows, 1) or bias.shape != (rows, 1):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} for {rows} rows")
    x = a.value
    mu = x.mean(axis=0, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value

    def fn(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=0, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=0, keepdims=True))
        return dx, (g * xhat).sum(axis=1, keepdims=True), g.sum(axis=1, keepdims=True)

    return _record(xhat * gv + bias.value, (a, gain, bias), fn)


def concat_vertical(*mats) -> Node:
    """Stack matrices along the row axis (rows of the first come first)."""
    nodes = [as_node(m) for m in mats]
    if not nodes:
        raise ShapeError("concat_vertical: nothing to concatenate")
    cols = nodes[0].shape[1]
    for n in nodes[1:]:
        if n.shape[1] != cols:
            raise ShapeError(f"concat_vertical: column mismatch {nodes[0].shape} vs {n.shape}")
    bounds = np.cumsum([0] + [n.shape[0] for n in nodes])

    def fn(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(nodes)))

    return _record(np.concatenate([n.value for n in nodes], axis=0), nodes, fn)


def rows(a, start: int, stop: int) -> Node:
    """Row slice ``a[start:stop]``."""
    a = as_node(a)
    if not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"rows: bad slice [{start}:{stop}] of {a.shape}")
    shape = a.shape

    def fn(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _record(a.value[start:stop], (a,), fn)


def transpose(a) -> Node:
    a = as_node(a)
    return _record(a.value.T, (a,), lambda g: (g.T,))


def sum_all(a) -> Node:
    a = as_node(a)
    shape = a.shape
    return _record(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def bce_sum(z, y, eps: float = 1e-7) -> Node:
    """Summed binary cross-entropy of posteriors ``z`` against labels ``y``.

    Posteriors are clamped to ``[eps, 1 - eps]``; the clamp passes zero
    gradient outside that band.  ``y`` is always treated as a constant.
    """
    z = as_node(z)
    yv = as_node(y).value
    if z.shape != yv.shape:
        raise ShapeError(f"bce: posteriors {z.shape} vs labels {yv.shape}")
    zc = np.clip(z.value, eps, 1.0 - eps)
    inside = (z.value >= eps) & (z.value <= 1.0 - eps)
    val = -(yv * np.log(zc) + (1.0 - yv) * np.log1p(-zc)).sum()

    def fn(g):
        return (g[0, 0] * inside * (zc - yv) / (zc * (1.0 - zc)),)

    return _record(np.array([[val]]), (z,), fn)


def dropout(a, rate: float, rng: np.random.Generator | None) -> Node:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    a = as_node(a)
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _record(a.value * keep, (a,), lambda g: (g * keep,))


# ------------------------------------------------------------------ gradients


def backward(tape: Tape, loss: Node) -> dict[str, Matrix]:
    """Reverse sweep from a scalar ``loss``; returns one gradient per parameter.

    Parameters that did not contribute to ``loss`` get an all-zero gradient.
    """
    if loss.tape is not tape:
        raise ContractError("loss node was not recorded on this tape")
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    grads: list[Matrix | None] = [None] * len(tape)
    grads[loss.index] = np.ones((1, 1))
    for i in range(loss.index, -1, -1):
        g = grads[i]
        fn = tape._backward[i]
        if g is None or fn is None:
            continue
        for j, gj in zip(tape._inputs[i], fn(g)):
            if j < 0 or gj is None:
                continue
            grads[j] = gj if grads[j] is None else grads[j] + gj
        grads[i] = None
    out = {}
    for name, idx in tape._params.items():
        g = grads[idx]
        out[name] = np.zeros(tape._shapes[idx]) if g is None else g
    return out


def grad_check(
    f: Callable[[Mapping[str, Node]], Node],
    params: Mapping[str, Matrix],
    h: float = 1e-5,
    num_coords: int | None = 100,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between ``backward`` and central differences.

    ``f`` maps a dict of parameter nodes to a scalar node.  ``num_coords``
    coordinates are sampled uniformly over all parameter entries (all of them
    when None).  The relative error of one coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    tape = Tape()
    bound = {k: tape.param(k, v) for k, v in params.items()}
    analytic = backward(tape, f(bound))

    names = list(params)
    sizes = np.array([params[k].size for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    if num_coords is None or num_coords >= total:
        flat = np.arange(total)
    else:
        flat = rng.choice(total, size=num_coords, replace=False)

    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}

    def evaluate():
        return float(f({k: constant(v) for k, v in work.items()}).value[0, 0])

    worst = 0.0
    for c in flat:
        k = int(np.searchsorted(offsets, c, side="right") - 1)
        name = names[k]
        arr = work[name].reshape(-1)
        pos = int(c - offsets[k])
        orig = arr[pos]
        arr[pos] = orig + h
        fp = evaluate()
        arr[pos] = orig - h
        fm = evaluate()
        arr[pos] = orig
        num = (fp - fm) / (2.0 * h)
        ana = float(analytic[name].reshape(-1)[pos])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    return worst


# ----------------------------------------------------------------- optimizer


@dataclass
class OptimState:
    """Adam moments plus a linear-warmup learning-rate schedule."""

    m: dict[str, Matrix] = field(default_factory=dict)
    v: dict[str, Matrix] = field(default_factory=dict)
    step: int = 0
    warmup_steps: int = 0

    def lr_scale(self, step: int) -> float:
        if self.warmup_steps <= 0:
            return 1.0
        return min(1.0, step / self.warmup_steps)


def adam_init(params: Mapping[str, Matrix], warmup_steps: int = 0) -> OptimState:
    return OptimState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        step=0,
        warmup_steps=warmup_steps,
    )


def adam_step(
    params: Mapping[str, Matrix],
    grads: Mapping[str, Matrix],
    state: OptimState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-9,
) -> tuple[dict[str, Matrix], OptimState]:
    """One bias-corrected Adam update.  Inputs are left untouched."""
    step = state.step + 1
    rate = lr * state.lr_scale(step)
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeError(f"adam_step: shape mismatch for {k!r}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        new_p[k] = p - rate * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, OptimState(new_m, new_v, step, state.warmup_steps)
