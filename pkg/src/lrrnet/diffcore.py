"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Only the operators the detector needs are provided. Operations executed
inside an active :class:`Tape` whose inputs require gradients are recorded;
:func:`backward` replays their adjoints in reverse order. Outside a tape the
same functions run as plain numpy forward passes.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True, name="x")
    >>> with Tape() as tape:
    ...     loss = (x * x).sum() * 0.5
    >>> backward(loss, tape)["x"]
    array([1., 2., 3.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from . import kernels

MAX_RANK = 4


class Tensor:
    """A numpy array plus gradient bookkeeping.

    Float arrays keep their dtype (``float32`` or ``float64``); anything else
    is converted to ``float64``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(data, dtype=dtype)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"tensor rank {arr.ndim} exceeds the supported maximum {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # operator sugar; scalars are lifted to constants of the same dtype
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


class Node(NamedTuple):
    op: str
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of executed operations; use as a context manager.

    A tape is single use: :func:`backward` consumes it and drops the stored
    intermediates.
    """

    _local = threading.local()

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}
        self.consumed = False

    def __enter__(self):
        stack = getattr(Tape._local, "stack", None)
        if stack is None:
            stack = Tape._local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._local.stack.pop()
        return False

    def record(self, op, out, inputs, backward_fn):
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves.setdefault(id(t), t)
        self._produced.add(id(out))
        self.nodes.append(Node(op, out, inputs, backward_fn))

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def __len__(self):
        return len(self.nodes)


def current_tape() -> Tape | None:
    stack = getattr(Tape._local, "stack", None)
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        stack = getattr(Tape._local, "stack", None)
        if stack is None:
            stack = Tape._local.stack = []
        self._saved = list(stack)
        stack.clear()

    def __exit__(self, *exc):
        Tape._local.stack[:] = self._saved
        return False


def _result(op: str, data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.record(op, out, inputs, backward_fn)
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor, tape: Tape) -> dict[str, np.ndarray]:
    """Populate ``.grad`` on every leaf recorded by ``tape``.

    Returns a mapping of leaf name to gradient; unnamed leaves are keyed
    ``"leaf<k>"`` in recording order. Leaves that do not influence ``loss``
    receive zeros. A tape can be replayed only once.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward(); run a new forward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = {}
    for k, leaf in enumerate(tape.leaves):
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        result[leaf.name if leaf.name is not None else f"leaf{k}"] = leaf.grad
    tape.nodes.clear()
    tape.consumed = True
    return result


# ---------------------------------------------------------------------------
# elementwise and structural operations
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    b = _lift(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result("div", out, (a, b), bw)


def tabs(x: Tensor) -> Tensor:
    d = x.data
    return _result("abs", np.abs(d), (x,), lambda g: (g * np.sign(d),))


def square(x: Tensor) -> Tensor:
    d = x.data
    return _result("square", d * d, (x,), lambda g: (2.0 * g * d,))


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _result("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = tuple(xs)
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in xs]} along axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _result("concat", np.concatenate([t.data for t in xs], axis=axis), xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# network operators
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with a square kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    co, ci, k, k2 = weight.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} has {c} channels, weight {weight.shape} expects {ci}")
    if k != k2:
        raise ValueError(f"conv2d needs a square kernel, got {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input {x.shape} too small for kernel {k} with padding {padding}")
    xd = x.data
    pointwise_conv = k == 1 and stride == 1 and padding == 0
    if pointwise_conv:
        cols = xd.reshape(n, c, h * w)
        hp, wp = h, w
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        hp, wp = xp.shape[2:]
        cols = kernels.im2col(xp, k, stride, ho, wo)
    wm = weight.data.reshape(co, -1)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, co, ho, wo)

    def bw(g):
        g2 = g.reshape(n, co, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(wm.T, g2)
            if pointwise_conv:
                gx = dcols.reshape(x.shape)
            else:
                gxp = kernels.col2im(dcols, hp, wp, k, stride, ho, wo)
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv2d", out, inputs, bw)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"group_norm: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    xg = x.data.reshape(n, groups, -1)
    m = xg.shape[2]
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = np.einsum("ngi,ngi->ng", xc, xc)[..., None] / m
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    ga = gamma.data[None, :, None, None]
    out = xhat * ga + beta.data[None, :, None, None]

    def bw(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dxh = (g * ga).reshape(n, groups, m)
            xh = xhat.reshape(n, groups, m)
            s1 = dxh.sum(axis=2, keepdims=True)
            s2 = np.einsum("ngi,ngi->ng", dxh, xh)[..., None]
            gx = (inv * (dxh - s1 / m - xh * (s2 / m))).reshape(n, c, h, w)
        return gx, gg, gb

    return _result("group_norm", out, (x, gamma, beta), bw)


def relu(x: Tensor) -> Tensor:
    d = x.data
    return _result("relu", np.maximum(d, 0), (x,), lambda g: (g * (d > 0),))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _result("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def pointwise(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown pointwise kind {kind!r}; expected 'relu' or 'sigmoid'")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by two along H and W."""
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)
    return _result("upsample2x", out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents disagree for {a.shape} @ {b.shape}")
    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    if lead_a and lead_b and lead_a != lead_b:
        raise ValueError(f"matmul: batch extents disagree for {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _result("matmul", np.matmul(ad, bd), (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if axis not in (-1, x.ndim - 1):
        raise ValueError("softmax is only defined along the last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _result("softmax", y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst: tuple | None
    checked: int
    message: str = ""

    def __str__(self):
        state = "PASS" if self.passed else "FAIL"
        return f"{state} max_rel_err={self.max_rel_err:.3e} over {self.checked} coordinates {self.message}".rstrip()


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tol: float = 1e-4,
    max_coords: int = 10_000,
    seed: int = 0,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    The step for coordinate ``x`` is ``1e-5 * max(1, |x|)``. The per
    coordinate error is ``|a - n| / max(|a|, |n|, floor * g)`` where ``g`` is
    the largest analytic gradient magnitude of that input, which keeps round
    off on vanishing coordinates from dominating. When the inputs hold more
    than ``max_coords`` scalars a seeded random subset is probed. Only inputs
    with ``requires_grad`` are probed.
    """
    inputs = list(inputs)
    with Tape() as tape:
        loss = f(*inputs)
    backward(loss, tape)
    grads = [t.grad if t.requires_grad else None for t in inputs]

    coords = [(i, j) for i, t in enumerate(inputs) if t.requires_grad for j in range(t.size)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[p] for p in pick]

    def evaluate():
        with no_grad():
            return float(np.asarray(f(*inputs).data, dtype=np.float64).reshape(-1)[0])

    scale = [float(np.max(np.abs(g))) if g is not None and g.size else 0.0 for g in grads]
    max_err, worst = 0.0, None
    for i, j in coords:
        flat = inputs[i].data.reshape(-1)
        orig = flat[j]
        h = 1e-5 * max(1.0, abs(float(orig)))
        flat[j] = orig + h
        fp = evaluate()
        flat[j] = orig - h
        fm = evaluate()
        flat[j] = orig
        num = (fp - fm) / (2 * h)
        ana = float(grads[i].reshape(-1)[j])
        if not (np.isfinite(num) and np.isfinite(ana)):
            return GradCheckReport(np.inf, False, (i, j), len(coords), f"non-finite gradient at input {i} index {j}")
        denom = max(abs(ana), abs(num), floor * scale[i], 1e-300)
        err = abs(ana - num) / denom
        if err > max_err:
            max_err, worst = err, (i, j)
    return GradCheckReport(max_err, max_err < tol, worst, len(coords))
