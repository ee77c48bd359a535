"""Dense float64 tensors with a tape-based reverse-mode autodiff engine.

A :class:`Tape` records every operation applied to tensors that belong to it.
Nodes are appended in execution order, so a node's parents always have lower
indices and the tape is topologically sorted by construction. Tensors not
attached to a tape are constants.

Spatial operators accept ``[C, H, W]`` or batched ``[N, C, H, W]`` inputs.
Convolution is cross-correlation (no kernel flip).

Example::

    tape = Tape()
    x = tape.leaf(image)
    loss = total(relu(conv2d(x, w, b)))
    grads = backward(tape, loss)
    grads[x.index]  # d loss / d image
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels


class ContractViolation(ValueError):
    """An operation was called with arguments that break its preconditions."""


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...] = ()


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    leaves: set[int] = field(default_factory=set)

    def leaf(self, value) -> "Tensor":
        """Register a differentiable leaf holding a copy of ``value``."""
        data = np.array(value, dtype=np.float64)
        idx = len(self.nodes)
        self.nodes.append(Node("leaf", (), None, data.shape))
        self.leaves.add(idx)
        return Tensor(data, self, idx)

    def release(self) -> None:
        """Drop recorded closures so the arrays they hold can be freed promptly.

        Closures reference tensors that reference the tape; without this the
        cycle waits for the cyclic collector, which rarely runs here.
        """
        self.nodes.clear()
        self.leaves.clear()

    def _record(self, op, parents, data, backward_fn) -> "Tensor":
        idx = len(self.nodes)
        self.nodes.append(Node(op, tuple(p.index for p in parents), backward_fn, data.shape))
        return Tensor(data, self, idx)


class Tensor:
    """An immutable float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "index")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, index: int = -1):
        data = np.asarray(data, dtype=np.float64)
        data.flags.writeable = False
        self.data = data
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        where = f"node={self.index}" if self.tracked else "const"
        return f"Tensor(shape={self.shape}, {where})"

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractViolation("operands belong to different tapes")
            tape = t.tape
    return tape


def _result(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward_fn) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    tracked = [t for t in inputs if t.tape is not None]

    def routed(g):
        grads = backward_fn(g)
        return [gr for t, gr in zip(inputs, grads) if t.tape is not None]

    return tape._record(op, tracked, data, routed)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _as4d(x: np.ndarray, what: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ContractViolation(f"{what}: expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


# ------------------------------------------------------------------ backward


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar ``root``.

    Returns a map from every leaf index of ``tape`` to its gradient array
    (zeros for leaves the root does not depend on).
    """
    if root.tape is not tape:
        raise ContractViolation("root is not recorded on this tape")
    if root.data.size != 1:
        raise ContractViolation(f"backward root must be scalar, got shape {root.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[root.index] = np.ones_like(root.data)
    for i in range(root.index, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.backward_fn is None:
            continue
        grads[i] = None  # interior gradient no longer needed
        for p, gp in zip(node.parents, node.backward_fn(g)):
            if gp is None:
                continue
            grads[p] = gp if grads[p] is None else grads[p] + gp
    return {i: grads[i] if grads[i] is not None else np.zeros(tape.nodes[i].shape)
            for i in sorted(tape.leaves)}


def grad(root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``root`` with respect to the given leaves, zero-filled."""
    res = backward(root.tape, root)
    return [res[t.index] for t in wrt]


# ------------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    return _result("mul", (a, b), av * bv,
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    out = av / bv
    return _result("div", (a, b), out,
                   lambda g: (_unbroadcast(g / bv, av.shape),
                              _unbroadcast(-g * out / bv, bv.shape)))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    s = np.sign(x.data)
    return _result("abs", (x,), np.abs(x.data), lambda g: (g * s,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def linear(x) -> Tensor:
    """Identity activation; records a node so the head is visible on the tape."""
    x = as_tensor(x)
    return _result("linear", (x,), x.data, lambda g: (g,))


# ------------------------------------------------------------------ reductions


def total(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _result("sum", (x,), np.asarray(x.data.sum()),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.data.size
    return _result("mean", (x,), np.asarray(x.data.mean()),
                   lambda g: (np.full(shape, float(g) / n),))


def mean_per_sample(x) -> Tensor:
    """Mean over all axes but the first: ``[N, ...] -> [N]``."""
    x = as_tensor(x)
    shape = x.shape
    axes = tuple(range(1, x.ndim))
    n = int(np.prod(shape[1:]))
    out = x.data.mean(axis=axes)
    return _result("mean_per_sample", (x,), out,
                   lambda g: (np.broadcast_to(g.reshape((-1,) + (1,) * len(axes)) / n,
                                              shape).copy(),))


# ------------------------------------------------------------------ spatial ops


def conv2d(x, kernel, bias, padding: str = "same") -> Tensor:
    """2-D cross-correlation, stride 1.

    ``x``: ``[C_in,H,W]`` or ``[N,C_in,H,W]``; ``kernel``: ``[C_out,C_in,kH,kW]``;
    ``bias``: ``[C_out]``. ``padding`` is ``"same"`` (zero pad, odd kernels
    only) or ``"valid"``.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    xd, squeeze = _as4d(x.data, "conv2d input")
    w, b = kernel.data, bias.data
    if w.ndim != 4:
        raise ContractViolation(f"conv2d kernel must be 4-D, got shape {w.shape}")
    co, ci, kh, kw = w.shape
    if xd.shape[1] != ci:
        raise ContractViolation(
            f"conv2d: input has {xd.shape[1]} channels but kernel expects {ci}")
    if b.shape != (co,):
        raise ContractViolation(f"conv2d: bias shape {b.shape} != ({co},)")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ContractViolation(f"conv2d same padding needs odd kernel, got {kh}x{kw}")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
        if xd.shape[2] < kh or xd.shape[3] < kw:
            raise ContractViolation(f"conv2d valid: input {xd.shape[2:]} smaller than kernel")
    else:
        raise ContractViolation(f"unknown padding {padding!r}")
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
    xp = np.ascontiguousarray(xp)
    w = np.ascontiguousarray(w)
    out = _kernels.get("conv2d_valid")(xp, w, np.ascontiguousarray(b))
    h, wd = xd.shape[2], xd.shape[3]

    def bw(g):
        g4 = np.ascontiguousarray(g[None] if squeeze else g)
        gx = gw = gb = None
        if x.tracked:
            gxp = _kernels.get("conv2d_grad_input")(g4, w)
            gx = gxp[:, :, ph:ph + h, pw:pw + wd]
            gx = np.ascontiguousarray(gx[0] if squeeze else gx)
        if kernel.tracked:
            gw = _kernels.get("conv2d_grad_weight")(g4, xp, kh, kw)
        if bias.tracked:
            gb = g4.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _result("conv2d", (x, kernel, bias), out[0] if squeeze else out, bw)


def maxpool2d(x, window: int = 2) -> Tensor:
    """Non-overlapping 2x2 max pool. Ties route the gradient to the lowest flat index."""
    if window != 2:
        raise ContractViolation(f"maxpool2d supports window 2 only, got {window}")
    x = as_tensor(x)
    xd, squeeze = _as4d(x.data, "maxpool2d input")
    if xd.shape[2] % 2 or xd.shape[3] % 2:
        raise ContractViolation(f"maxpool2d needs even spatial dims, got {xd.shape[2:]}")
    out, idx = _kernels.get("maxpool2")(np.ascontiguousarray(xd))

    def bw(g):
        g4 = np.ascontiguousarray(g[None] if squeeze else g)
        gx = _kernels.get("maxpool2_grad")(g4, idx)
        return (gx[0] if squeeze else gx,)

    return _result("maxpool2d", (x,), out[0] if squeeze else out, bw)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 2:
        raise ContractViolation("upsample_nearest needs at least 2 dims")
    f = int(factor)
    out = np.repeat(np.repeat(x.data, f, axis=-2), f, axis=-1)

    def bw(g):
        s = g.shape
        g = g.reshape(s[:-2] + (s[-2] // f, f, s[-1] // f, f))
        return (g.sum(axis=(-3, -1)),)

    return _result("upsample_nearest", (x,), out, bw)


def concat_channels(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (3, 4):
        raise ContractViolation(f"concat_channels: incompatible ranks {a.shape} / {b.shape}")
    if a.shape[-2:] != b.shape[-2:] or a.shape[:-3] != b.shape[:-3]:
        raise ContractViolation(
            f"concat_channels: spatial/batch mismatch {a.shape} vs {b.shape}")
    ax = a.ndim - 3
    c1 = a.shape[ax]
    out = np.concatenate([a.data, b.data], axis=ax)

    def bw(g):
        return (np.take(g, np.arange(c1), axis=ax),
                np.take(g, np.arange(c1, g.shape[ax]), axis=ax))

    return _result("concat_channels", (a, b), out, bw)


def slice_channels(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    ax = x.ndim - 3
    out = np.take(x.data, np.arange(start, stop), axis=ax)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        idx = [slice(None)] * len(shape)
        idx[ax] = slice(start, stop)
        full[tuple(idx)] = g
        return (full,)

    return _result("slice_channels", (x,), out, bw)


def softmax_channels(logits) -> Tensor:
    """Per-pixel softmax over the channel axis, max-subtracted."""
    x = as_tensor(logits)
    ax = x.ndim - 3
    if x.shape[ax] < 2:
        raise ContractViolation("softmax_channels needs at least 2 channels")
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _result("softmax_channels", (x,), s, bw)


def log_softmax_channels(logits) -> Tensor:
    x = as_tensor(logits)
    ax = x.ndim - 3
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=ax, keepdims=True),)

    return _result("log_softmax_channels", (x,), out, bw)


def select_labels(x, labels) -> Tensor:
    """Pick ``x[label, i, j]`` per pixel: ``[L,H,W] x [H,W] -> [H,W]`` (batched too)."""
    x = as_tensor(x)
    labels = np.asarray(labels)
    ax = x.ndim - 3
    if labels.shape != x.shape[:ax] + x.shape[ax + 1:]:
        raise ContractViolation(
            f"select_labels: label shape {labels.shape} does not match logits {x.shape}")
    nl = x.shape[ax]
    if labels.size and (labels.min() < 0 or labels.max() >= nl):
        raise ContractViolation(f"select_labels: labels must lie in [0, {nl - 1}]")
    lab = np.expand_dims(labels.astype(np.int64), ax)
    out = np.take_along_axis(x.data, lab, axis=ax)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.put_along_axis(full, lab, np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _result("select_labels", (x,), np.squeeze(out, axis=ax), bw)


def box_mean(x, window: int) -> Tensor:
    """Mean over every ``window x window`` patch (stride 1, valid) of the last two axes."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if h < window or w < window:
        raise ContractViolation(f"box_mean: spatial dims {(h, w)} smaller than window {window}")
    area = float(window * window)
    out = sliding_window_view(x.data, (window, window), axis=(-2, -1)).sum(axis=(-2, -1)) / area
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        ho, wo = g.shape[-2:]
        gs = g / area
        for dy in range(window):
            for dx in range(window):
                full[..., dy:dy + ho, dx:dx + wo] += gs
        return (full,)

    return _result("box_mean", (x,), out, bw)


# ------------------------------------------------------------------ checking


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, coords,
                       h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at the given flat coordinates."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty(len(coords))
    for k, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        fp = f(x)
        flat[c] = orig - h
        fm = f(x)
        flat[c] = orig
        out[k] = (fp - fm) / (2 * h)
    return out


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], which: int = 0,
              n_coords: int = 20, h: float = 1e-5, seed: int = 0, floor: float = 1e-6):
    """Compare the tape gradient of ``fn(*inputs)`` w.r.t. ``inputs[which]``
    against central differences at ``n_coords`` random coordinates.

    Returns ``(max_relative_error, analytic, numeric)``. The relative error of
    a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    inputs = [np.asarray(v, dtype=np.float64) for v in inputs]
    tape = Tape()
    leaves = [tape.leaf(v) for v in inputs]
    out = fn(*leaves)
    if out.data.size != 1:
        raise ContractViolation("gradcheck needs a scalar function")
    g = grad(out, [leaves[which]])[0].reshape(-1)
    rng = np.random.default_rng(seed)
    size = inputs[which].size
    coords = rng.choice(size, size=min(n_coords, size), replace=False)

    def f(v):
        args = list(inputs)
        args[which] = v
        return float(fn(*[Tensor(a) for a in args]).data)

    num = numerical_gradient(f, inputs[which], coords, h)
    ana = g[coords]
    rel = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
    return float(rel.max()), ana, num
