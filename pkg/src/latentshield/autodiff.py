"""Dense-tensor reverse-mode automatic differentiation.

A small define-by-run engine: each operation returns a new Tensor that
remembers its parent tensors and a backward closure. Calling
:func:`backward` on a scalar output walks the recorded graph (the
:class:`Tape`) in reverse topological order and leaves exact gradients
on every leaf that requested them.

Everything runs in 64-bit floats; finite-difference verification at
relative tolerance 1e-4 is not reliable in 32-bit. Graphs are rebuilt
on every forward pass, there is no caching. Operations whose inputs do
not require gradients return plain constants with no graph attached,
which keeps no-grad paths (statistics, Monte-Carlo sweeps) cheap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "GradCheckReport",
    "constant",
    "as_tensor",
    "op_add",
    "op_sub",
    "op_mul",
    "op_elementwise",
    "op_reduce",
    "op_conv2d",
    "op_concat_channels",
    "backward",
    "grad_check",
]

ELEMENTWISE_KINDS = ("silu", "square", "log", "exp", "add_const", "mul_const")
REDUCE_KINDS = ("sum", "mean")


class Tensor:
    """A dense float64 array plus optional gradient bookkeeping.

    ``grad`` is ``None`` until :func:`backward` reaches the tensor; a
    leaf that is not on any path to the output keeps ``grad = None``,
    which is the representation of an exactly-zero gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalar operands go through the *_const kinds so
    # the op catalog stays small.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return op_add(self, other)
        return op_elementwise(self, "add_const", const=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return op_sub(self, other)
        return op_elementwise(self, "add_const", const=-float(other))

    def __rsub__(self, other):
        return op_elementwise(-self, "add_const", const=float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return op_mul(self, other)
        return op_elementwise(self, "mul_const", const=float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return op_elementwise(self, "mul_const", const=-1.0)


def constant(data) -> Tensor:
    """Wrap an array as a non-differentiable leaf."""
    return Tensor(data, requires_grad=False)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _make(data, op: str, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents,
                      backward_fn=backward_fn)
    return Tensor(data, op=op)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Needed only when a scalar operand met an array operand.
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


class Tape:
    """Topologically ordered record of the nodes reachable from an output.

    ``nodes`` lists every reachable tensor exactly once, inputs before
    the operations that consume them.
    """

    __slots__ = ("output", "nodes")

    def __init__(self, output: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.output = output
        self.nodes = order


def backward(output: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every reachable tensor with d(output)/d(tensor).

    The output must be scalar. Gradients are zeroed at the start of
    every call, so repeated calls never accumulate across calls.
    """
    if output.data.size != 1:
        raise ValueError(f"backward requires a scalar output, got shape {output.shape}")
    if tape is None:
        tape = Tape(output)
    for node in tape.nodes:
        node.grad = None
    if not output.requires_grad:
        return  # constant output: every leaf keeps its zero (None) gradient
    output.grad = np.ones_like(output.data)
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def _binary_shapes(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def op_add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "op_add")

    def bw(g):
        _accum(a, _reduce_to(g, a.shape))
        _accum(b, _reduce_to(g, b.shape))

    return _make(a.data + b.data, "add", (a, b), bw)


def op_sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "op_sub")

    def bw(g):
        _accum(a, _reduce_to(g, a.shape))
        _accum(b, _reduce_to(-g, b.shape))

    return _make(a.data - b.data, "sub", (a, b), bw)


def op_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product (equal shapes, or one scalar operand)."""
    _binary_shapes(a, b, "op_mul")
    a_data, b_data = a.data, b.data

    def bw(g):
        _accum(a, _reduce_to(g * b_data, a.shape))
        _accum(b, _reduce_to(g * a_data, b.shape))

    return _make(a_data * b_data, "mul", (a, b), bw)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def op_elementwise(x: Tensor, kind: str, const: float | None = None) -> Tensor:
    """Elementwise map with a registered gradient.

    ``kind`` is one of ``silu | square | log | exp | add_const |
    mul_const``; the ``*_const`` kinds require ``const``. ``log``
    rejects nonpositive inputs and names the first offending index.
    """
    v = x.data
    if kind == "silu":
        s = _sigmoid(v)
        out = v * s

        def bw(g, s=s, v=v):
            _accum(x, g * (s * (1.0 + v * (1.0 - s))))

    elif kind == "square":
        out = v * v

        def bw(g, v=v):
            _accum(x, g * (2.0 * v))

    elif kind == "log":
        if np.any(v <= 0.0):
            bad = int(np.argmax(v.reshape(-1) <= 0.0))
            idx = tuple(int(i) for i in np.unravel_index(bad, v.shape)) if v.ndim else ()
            raise ValueError(f"log domain error at index {idx}: value {float(v.reshape(-1)[bad])}")
        out = np.log(v)

        def bw(g, v=v):
            _accum(x, g / v)

    elif kind == "exp":
        out = np.exp(v)

        def bw(g, out=out):
            _accum(x, g * out)

    elif kind == "add_const":
        if const is None:
            raise ValueError("add_const requires const")
        out = v + const

        def bw(g):
            _accum(x, g)

    elif kind == "mul_const":
        if const is None:
            raise ValueError("mul_const requires const")
        out = v * const

        def bw(g, c=const):
            _accum(x, g * c)

    else:
        raise ValueError(f"unknown elementwise kind {kind!r}; expected one of {ELEMENTWISE_KINDS}")

    return _make(out, kind, (x,), bw)


def op_reduce(x: Tensor, kind: str) -> Tensor:
    """Reduce to a scalar tensor by sum or mean."""
    if kind == "sum":
        out = np.asarray(np.sum(x.data))

        def bw(g):
            _accum(x, np.broadcast_to(g, x.shape))

    elif kind == "mean":
        n = x.data.size
        out = np.asarray(np.mean(x.data))

        def bw(g, n=n):
            _accum(x, np.broadcast_to(g / n, x.shape))

    else:
        raise ValueError(f"unknown reduce kind {kind!r}; expected one of {REDUCE_KINDS}")

    return _make(out, kind, (x,), bw)


def op_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a single (C, H, W) image.

    ``kernel`` has shape (C_out, C_in, kh, kw). Gradients are produced
    for both the input and the kernel.
    """
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be nonnegative, got {padding}")
    v, k = x.data, kernel.data
    if v.ndim != 3 or k.ndim != 4:
        raise ValueError(f"op_conv2d: need (C,H,W) input and (O,I,kh,kw) kernel, "
                         f"got {v.shape} and {k.shape}")
    c_out, c_in, kh, kw = k.shape
    if v.shape[0] != c_in:
        raise ValueError(f"op_conv2d: kernel expects {c_in} input channels, "
                         f"image has {v.shape[0]} (image {v.shape}, kernel {k.shape})")
    h, w = v.shape[1], v.shape[2]
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(f"op_conv2d: nonpositive output dims for image {v.shape}, "
                         f"kernel {k.shape}, stride {stride}, padding {padding}")

    vp = np.pad(v, ((0, 0), (padding, padding), (padding, padding))) if padding else v
    s0, s1, s2 = vp.strides
    windows = np.lib.stride_tricks.as_strided(
        vp,
        shape=(c_in, h_out, w_out, kh, kw),
        strides=(s0, s1 * stride, s2 * stride, s1, s2),
        writeable=False,
    )
    # contract (i, kh, kw) -> (h_out, w_out, c_out), then channels-first
    out = np.tensordot(windows, k, axes=([0, 3, 4], [1, 2, 3]))
    out = np.ascontiguousarray(np.moveaxis(out, 2, 0))

    def bw(g, vp_shape=vp.shape):
        if x.requires_grad:
            gvp = np.zeros(vp_shape)
            for ky in range(kh):
                for kx in range(kw):
                    # every output pixel (y, x) pulled vp[:, y*stride+ky, x*stride+kx]
                    gvp[:, ky:ky + stride * h_out:stride, kx:kx + stride * w_out:stride] += \
                        np.tensordot(k[:, :, ky, kx], g, axes=(0, 0))
            if padding:
                gvp = gvp[:, padding:padding + h, padding:padding + w]
            _accum(x, gvp)
        if kernel.requires_grad:
            gk = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
            _accum(kernel, gk)

    return _make(out, "conv2d", (x, kernel), bw)


def op_concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate (C, H, W) tensors along the channel axis."""
    parts = tuple(parts)
    if not parts:
        raise ValueError("op_concat_channels needs at least one tensor")
    hw = parts[0].shape[1:]
    for p in parts:
        if p.data.ndim != 3 or p.shape[1:] != hw:
            raise ValueError(f"op_concat_channels: spatial dims differ "
                             f"({[p.shape for p in parts]})")
    out = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[lo:hi])

    return _make(out, "concat", parts, bw)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst_index: tuple[int, ...] | None = None
    nan_location: tuple[int, ...] | None = None

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        loc = "" if self.nan_location is None else f" nan_at={self.nan_location}"
        return f"{status} max_rel_err={self.max_rel_err:.3e} n={self.n_checked}{loc}"


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4,
               tol: float = 1e-4,
               indices: Iterable[tuple[int, ...]] | None = None) -> GradCheckReport:
    """Compare backward gradients of ``f`` at ``x`` against central differences.

    ``f`` maps a tensor to a scalar tensor and must be re-evaluable (it
    is called twice per checked coordinate). The check passes iff the
    max relative error is at most ``tol``; coordinates where both the
    analytic and numeric values are below 1e-8 in magnitude fall back
    to the absolute difference. A NaN on either side fails the check
    and reports its location.
    """
    if not (0.0 < h <= 1e-2):
        raise ValueError(f"h must lie in (0, 1e-2], got {h}")

    leaf = Tensor(np.array(x.data, copy=True), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ValueError("grad_check target must return a scalar")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    if not np.all(np.isfinite(analytic)):
        bad = int(np.argmax(~np.isfinite(analytic).reshape(-1)))
        loc = tuple(int(i) for i in np.unravel_index(bad, leaf.shape))
        return GradCheckReport(float("nan"), False, 0, nan_location=loc)

    probe = Tensor(np.array(x.data, copy=True), requires_grad=False)
    if indices is None:
        indices = list(np.ndindex(*probe.shape))
    else:
        indices = [tuple(i) for i in indices]

    max_err = 0.0
    worst = None
    for idx in indices:
        orig = probe.data[idx]
        probe.data[idx] = orig + h
        fp = float(f(probe).data)
        probe.data[idx] = orig - h
        fm = float(f(probe).data)
        probe.data[idx] = orig
        numeric = (fp - fm) / (2.0 * h)
        if not np.isfinite(numeric):
            return GradCheckReport(float("nan"), False, len(indices), nan_location=idx)
        a = float(analytic[idx])
        denom = max(abs(a), abs(numeric))
        err = abs(a - numeric) if denom < 1e-8 else abs(a - numeric) / denom
        if err > max_err:
            max_err, worst = err, idx

    return GradCheckReport(max_err, max_err <= tol, len(indices), worst_index=worst)
