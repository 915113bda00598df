"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape` whenever at
least one operand requires a gradient. Outside a tape every operation is a
plain numpy evaluation, which is what inference and the attack's bookkeeping
use.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> backward(tape, y)
    >>> x.grad
    array([6.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ParameterStore",
    "ShapeError",
    "as_tensor",
    "backward",
    "conv2d",
    "maxpool2d",
    "activation",
    "relu",
    "sigmoid",
    "dense",
    "softmax_cross_entropy",
    "add",
    "mul",
    "sum",
    "mean",
    "amax",
    "amin",
    "abs",
    "log",
    "sqrt",
    "reshape",
    "transpose",
    "squared_distances",
    "log_similarity",
    "finite_difference_check",
    "GradCheckReport",
    "inject_fault",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype == np.float64:
            self.data = data
        else:
            self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# --------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


_local = threading.local()

# op name -> factor applied to that op's input gradients (test hook for the gradient checker)
_FAULTS: dict[str, float] = {}


class inject_fault:
    """Scale the backward output of primitive ``op`` while the context is active.

    Only meant for demonstrating that the gradient checker catches wrong
    derivatives; forward values are untouched.
    """

    def __init__(self, op: str, factor: float = 1.01):
        self.op, self.factor = op, factor

    def __enter__(self):
        _FAULTS[self.op] = self.factor
        return self

    def __exit__(self, *exc) -> None:
        _FAULTS.pop(self.op, None)


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered record of primitive applications, rebuilt on every forward pass."""

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def backward(self, root: Tensor) -> None:
        backward(self, root)


def _record(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.nodes.append(_Node(out, inputs, backward_fn, op))
        else:
            # no tape: result is a constant for all downstream purposes
            out.requires_grad = False
    return out


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every marked leaf.

    Raises:
        ShapeError: if ``root`` is not a single-element tensor.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    produced = {id(n.out) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    if id(root) not in produced:
        if root.requires_grad:
            _accumulate_leaf(root, grads[id(root)])
        return
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        if _FAULTS and node.op in _FAULTS:
            in_grads = [None if gi is None else gi * _FAULTS[node.op] for gi in in_grads]
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if id(t) in produced:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
            else:
                _accumulate_leaf(t, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


# --------------------------------------------------------------------------
# elementwise and reductions


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _record(
        "add", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _record(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def _axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    axes = _axes(axis, x.ndim)
    out = x.data.sum(axis=axes)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return _record("sum", out, (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axes), 1.0 / n)


def _extreme(x: Tensor, axis, pick_max: bool) -> Tensor:
    axes = _axes(axis, x.ndim)
    keep = [a for a in range(x.ndim) if a not in axes]
    moved = np.transpose(x.data, keep + list(axes))
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    # argmax/argmin return the first index on ties, row-major over reduced axes
    idx = flat.argmax(axis=-1) if pick_max else flat.argmin(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], np.asarray(g)[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(keep + list(axes))),)

    return _record("amax" if pick_max else "amin", out, (x,), bw)


def amax(x: Tensor, axis=None) -> Tensor:
    """Max over ``axis``; the gradient goes to the first maximiser."""
    return _extreme(x, axis, True)


def amin(x: Tensor, axis=None) -> Tensor:
    """Min over ``axis``; the gradient goes to the first minimiser."""
    return _extreme(x, axis, False)


def abs(x: Tensor) -> Tensor:  # noqa: A001
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def log(x: Tensor) -> Tensor:
    return _record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    """Square root with a zero subgradient at exactly 0."""
    out = np.sqrt(np.maximum(x.data, 0.0))

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * 0.5 / safe, 0.0),)

    return _record("sqrt", out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _record("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _record("getitem", x.data[index], (x,), bw)


# --------------------------------------------------------------------------
# network primitives


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    v = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def _batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op}: expected input [C,H,W] or [N,C,H,W], got {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` ([C,H,W] or [N,C,H,W]) with ``kernel`` [O,C,kH,kW].

    Lowered to a single GEMM over a channel-major im2col matrix so every BLAS
    operand is contiguous.
    """
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    xb, single = _batched(x, "conv2d")
    if kernel.ndim != 4 or kernel.shape[1] != xb.shape[1]:
        raise ShapeError(f"conv2d: input shape {x.shape} incompatible with kernel shape {kernel.shape}")
    n, c, h, w = xb.shape
    o, _, kh, kw = kernel.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel shape {kernel.shape} larger than padded input shape {x.shape}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xc = np.zeros((c, n, hp, wp))
    xc[:, :, padding : padding + h, padding : padding + w] = xb.transpose(1, 0, 2, 3)

    def tap(arr, a, b):
        return arr[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride]

    # channel-major im2col: rows ordered (c, a, b) to match kernel.reshape(O, -1)
    cols = np.empty((c, kh, kw, n, ho, wo))
    for a in range(kh):
        for b in range(kw):
            cols[:, a, b] = tap(xc, a, b)
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    kmat = kernel.data.reshape(o, -1)
    out = np.ascontiguousarray((kmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    if single:
        out = out[0]

    def bw(g):
        gb = g[None] if single else g
        gon = np.ascontiguousarray(gb.transpose(1, 0, 2, 3)).reshape(o, -1)
        gk = (gon @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (kmat.T @ gon).reshape(c, kh, kw, n, ho, wo)
            gxc = np.zeros_like(xc)
            for a in range(kh):
                for b in range(kw):
                    tap(gxc, a, b)[...] += gcols[:, a, b]
            gx = np.ascontiguousarray(gxc[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3))
            if single:
                gx = gx[0]
        return gx, gk

    return _record("conv2d", out, (x, kernel), bw)


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max pooling; the gradient goes to the first maximiser in row-major order."""
    stride = window if stride is None else stride
    xb, single = _batched(x, "maxpool2d")
    n, c, h, w = xb.shape
    if window < 1 or stride < 1:
        raise ValueError(f"maxpool2d: window and stride must be positive, got {window}, {stride}")
    if window > h or window > w:
        raise ShapeError(f"maxpool2d: window {window} larger than input shape {x.shape}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    win = sliding_window_view(xb, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, window * window)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if single:
        out = out[0]

    def bw(g):
        gb = g[None] if single else g
        rows = (np.arange(ho) * stride)[:, None] + idx // window
        cols = (np.arange(wo) * stride)[None, :] + idx % window
        gx = np.zeros_like(xb)
        if stride >= window:
            # windows do not overlap, so every target cell is hit at most once
            ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
            gx[ni[..., None, None], ci[..., None, None], rows, cols] = gb
        else:
            ni = np.arange(n)[:, None, None, None]
            ci = np.arange(c)[None, :, None, None]
            np.add.at(gx, (ni, ci, rows, cols), gb)
        return (gx[0] if single else gx,)

    return _record("maxpool2d", np.ascontiguousarray(out), (x,), bw)


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weights.T + bias`` for ``x`` of shape [n] or [N, n]."""
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"dense: input shape {x.shape} incompatible with weights shape {weights.shape}")
    if bias is not None and bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense: bias shape {bias.shape} incompatible with weights shape {weights.shape}")
    out = x.data @ weights.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ weights.data
        gw = np.outer(g, x.data) if x.ndim == 1 else g.T @ x.data
        gb = None if bias is None else (g if g.ndim == 1 else g.sum(axis=0))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weights) if bias is None else (x, weights, bias)
    return _record("dense", out, inputs, bw)


def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch (if any)."""
    z = logits.data if logits.ndim == 2 else logits.data[None]
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    k = z.shape[1]
    if labels.shape[0] != z.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for logits shape {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k}): {labels.tolist()}")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = float(np.mean(lse - shifted[rows, labels]))

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        p *= g / z.shape[0]
        return (p if logits.ndim == 2 else p[0],)

    return _record("softmax_cross_entropy", np.array(loss), (logits,), bw)


def squared_distances(z: Tensor, prototypes: Tensor) -> Tensor:
    """Squared L2 distance of every latent pixel to every prototype.

    ``z`` is [D,H,W] or [N,D,H,W]; ``prototypes`` is [m,D]. Returns [m,H,W]
    or [N,m,H,W].
    """
    zb, single = _batched(z, "squared_distances")
    if prototypes.ndim != 2 or prototypes.shape[1] != zb.shape[1]:
        raise ShapeError(
            f"squared_distances: latent shape {z.shape} incompatible with prototype shape {prototypes.shape}"
        )
    p = prototypes.data
    z2 = np.einsum("ndhw,ndhw->nhw", zb, zb)[:, None]
    p2 = np.einsum("md,md->m", p, p)[None, :, None, None]
    cross = np.einsum("ndhw,md->nmhw", zb, p, optimize=True)
    d = np.maximum(z2 - 2.0 * cross + p2, 0.0)
    out = d[0] if single else d

    def bw(g):
        gb = g[None] if single else g
        gz = gp = None
        if z.requires_grad:
            gz = 2.0 * (zb * gb.sum(axis=1)[:, None] - np.einsum("nmhw,md->ndhw", gb, p, optimize=True))
            gz = gz[0] if single else gz
        if prototypes.requires_grad:
            gsum = gb.sum(axis=(0, 2, 3))
            gp = 2.0 * (p * gsum[:, None] - np.einsum("nmhw,ndhw->md", gb, zb, optimize=True))
        return gz, gp

    return _record("squared_distances", out, (z, prototypes), bw)


def log_similarity(d: Tensor, epsilon: float) -> Tensor:
    """Elementwise ``log((d + 1) / (d + epsilon))`` for non-negative ``d``."""
    v = d.data
    # (d + 1) / (d + eps) = 1 + (1 - eps) / (d + eps); log1p keeps precision when d is large
    out = np.log1p((1.0 - epsilon) / (v + epsilon))
    return _record(
        "log_similarity", out, (d,),
        lambda g: (g * (-(1.0 - epsilon) / ((v + 1.0) * (v + epsilon))),),
    )


# --------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Named trainable tensors, each with a same-shaped gradient accumulator."""

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def gradient(self, name: str) -> np.ndarray:
        t = self._params[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def set_trainable(self, names: Iterable[str] | None) -> None:
        """Mark only ``names`` as requiring gradients (``None`` means all)."""
        keep = set(self._params) if names is None else set(names)
        for name, t in self._params.items():
            t.requires_grad = name in keep

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.data.copy() for k, v in self._params.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}


# --------------------------------------------------------------------------
# numerical gradient oracle


@dataclass
class GradCheckReport:
    """Per-input comparison of tape gradients against central differences."""

    max_rel_error: list[float]
    max_abs_error: list[float]
    nonfinite: list[bool]
    tolerance: float

    @property
    def passed(self) -> bool:
        return not any(self.nonfinite) and all(e <= self.tolerance for e in self.max_rel_error)

    @property
    def flagged(self) -> list[int]:
        return [
            i for i, (e, bad) in enumerate(zip(self.max_rel_error, self.nonfinite))
            if bad or e > self.tolerance
        ]


def finite_difference_check(
    fn: Callable[..., Tensor],
    point: Tensor | np.ndarray | Sequence,
    step: float = 1e-4,
    tolerance: float = 1e-5,
    floor: float = 1e-12,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn`` with central finite differences.

    ``point`` is one input or a sequence of inputs; ``fn`` is called with them
    as positional :class:`Tensor` arguments. The error for each input is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)``,
    i.e. relative to the gradient's own scale. Non-finite evaluations are
    flagged rather than raised.
    """
    if isinstance(point, (Tensor, np.ndarray)) or np.isscalar(point):
        points = [point]
    else:
        points = list(point)
    base = [np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in points]

    leaves = [Tensor(b.copy(), requires_grad=True) for b in base]
    with Tape() as tape:
        root = fn(*leaves)
    backward(tape, root)
    analytic = [np.zeros_like(b) if t.grad is None else t.grad for b, t in zip(base, leaves)]

    def evaluate(values) -> float:
        return float(fn(*[Tensor(v) for v in values]).data)

    rel, absolute, nonfinite = [], [], []
    for i, b in enumerate(base):
        numeric = np.zeros_like(b)
        bad = not np.all(np.isfinite(analytic[i]))
        for j in range(b.size):
            values = [v.copy() for v in base]
            flat = values[i].reshape(-1)
            flat[j] = b.reshape(-1)[j] + step
            fp = evaluate(values)
            flat[j] = b.reshape(-1)[j] - step
            fm = evaluate(values)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                bad = True
                continue
            numeric.reshape(-1)[j] = (fp - fm) / (2.0 * step)
        diff = np.abs(analytic[i] - numeric)
        scale = max(float(np.max(np.abs(analytic[i]), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), floor)
        absolute.append(float(np.max(diff, initial=0.0)))
        rel.append(float(np.max(diff, initial=0.0)) / scale)
        nonfinite.append(bad)
    return GradCheckReport(rel, absolute, nonfinite, tolerance)
