"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small. A :class:`Tensor` wraps a numpy array
and, when an operation involves at least one differentiable input,
records its parents plus a closure mapping the output adjoint to parent
adjoints. ``backward`` replays that tape once in reverse topological
order and accumulates gradients on leaf tensors only; call
:func:`zero_grad` between optimizer steps (gradients add up otherwise,
by contract).

Everything is float64: the package trades throughput for numerical
verifiability, and every op here is checked against central finite
differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, UsageError

Array = np.ndarray


class Tensor:
    """Dense float64 array plus the bookkeeping reverse mode needs."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], Sequence[Array | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the module-level functions do the real work.
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

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) on every differentiable leaf.

        ``self`` must hold a single value. Repeated calls add into the
        existing ``grad`` arrays; reset them with :func:`zero_grad`.
        """
        if self.data.size != 1:
            raise UsageError(
                f"backward requires a scalar, got shape {self.shape}"
            )
        order = _topo_order(self)
        adjoints: dict[int, Array] = {id(self): np.ones_like(self.data)}
        keep: dict[int, Tensor] = {id(self): self}
        for node in reversed(order):
            adj = adjoints.pop(id(node), None)
            keep.pop(id(node), None)
            if adj is None:
                continue
            if node._backward is not None:
                parent_grads = node._backward(adj)
                for parent, g in zip(node._parents, parent_grads):
                    if g is None:
                        continue
                    pid = id(parent)
                    if pid in adjoints:
                        adjoints[pid] = adjoints[pid] + g
                    else:
                        adjoints[pid] = g
                        keep[pid] = parent
            elif node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += adj


def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering; each node appears exactly once."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: Array, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(
        i for i, (want, got) in enumerate(zip(shape, g.shape)) if want == 1 and got != 1
    )
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _from_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _from_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _from_op(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            if b.requires_grad
            else None,
        )

    return _from_op(a.data / b.data, (a, b), backward)


def pow_const(a, exponent: float) -> Tensor:
    a = _coerce(a)
    e = float(exponent)

    def backward(g):
        return (g * e * np.power(a.data, e - 1.0),)

    return _from_op(np.power(a.data, e), (a,), backward)


def log(a) -> Tensor:
    a = _coerce(a)

    def backward(g):
        return (g / a.data,)

    return _from_op(np.log(a.data), (a,), backward)


def relu(a) -> Tensor:
    """Elementwise max(0, x); subgradient 0 at the kink."""
    a = _coerce(a)
    mask = a.data > 0.0

    def backward(g):
        return (g * mask,)

    return _from_op(a.data * mask, (a,), backward)


def clamp_min(a, floor: float) -> Tensor:
    """max(x, floor) elementwise; gradient is 0 where the clamp engages."""
    a = _coerce(a)
    c = float(floor)
    mask = a.data > c

    def backward(g):
        return (g * mask,)

    return _from_op(np.maximum(a.data, c), (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _from_op(data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def sample_max(a) -> Tensor:
    """Per-sample maximum over all trailing axes, keepdims.

    Input (N, ...) gives output (N, 1, ..., 1). The subgradient routes
    entirely to the first maximal element in row-major scan order.
    """
    a = _coerce(a)
    n = a.shape[0]
    flat = a.data.reshape(n, -1)
    idx = np.argmax(flat, axis=1)  # first max wins ties
    out_shape = (n,) + (1,) * (a.ndim - 1)
    data = flat[np.arange(n), idx].reshape(out_shape)

    def backward(g):
        gx = np.zeros_like(flat)
        gx[np.arange(n), idx] = g.reshape(n)
        return (gx.reshape(a.shape),)

    return _from_op(data, (a,), backward)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _coerce(a)

    def backward(g):
        return (g.reshape(a.shape),)

    return _from_op(a.data.reshape(shape), (a,), backward)


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------

def dense(x, weight, bias) -> Tensor:
    """Affine map x @ weight + bias for x (N, D), weight (D, U), bias (U,)."""
    x, weight, bias = _coerce(x), _coerce(weight), _coerce(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ConfigurationError(
            f"dense shapes do not agree: x {x.shape}, weight {weight.shape}"
        )
    if bias.shape != (weight.shape[1],):
        raise ConfigurationError(
            f"dense bias shape {bias.shape} does not match {weight.shape[1]} units"
        )

    def backward(g):
        return (
            g @ weight.data.T if x.requires_grad else None,
            x.data.T @ g if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return _from_op(x.data @ weight.data + bias.data, (x, weight, bias), backward)


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x (N,C,H,W) with kernel (F,C,kh,kw).

    Output spatial extent is (H + 2*padding - kh) // stride + 1 per axis.
    No kernel flip: this is the deep-learning convention.
    """
    x, kernel, bias = _coerce(x), _coerce(kernel), _coerce(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ConfigurationError(
            f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}"
        )
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ConfigurationError(
            f"conv2d channel mismatch: input has {c}, kernel expects {kc}"
        )
    if bias.shape != (f,):
        raise ConfigurationError(f"conv2d bias shape {bias.shape} != ({f},)")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d invalid stride={stride} padding={padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1 or h + 2 * padding < kh or w + 2 * padding < kw:
        raise ConfigurationError(
            f"conv2d kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # im2col: one BLAS matmul does the whole batch
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (N, C, ho, wo, kh, kw)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, c * kh * kw
    )
    wmat = kernel.data.reshape(f, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out) + bias.data[None, :, None, None]

    def backward(g):
        gx = gk = gb = None
        g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        if kernel.requires_grad:
            gk = (g2d.T @ cols).reshape(f, c, kh, kw)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = (g2d @ wmat).reshape(n, ho, wo, c, kh, kw)
            gwin = gcols.transpose(0, 3, 1, 2, 4, 5)  # (N, C, ho, wo, kh, kw)
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    gxp[
                        :,
                        :,
                        u : u + (ho - 1) * stride + 1 : stride,
                        v : v + (wo - 1) * stride + 1 : stride,
                    ] += gwin[:, :, :, :, u, v]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gk, gb)

    return _from_op(out, (x, kernel, bias), backward)


def maxpool2d(x, window: int, stride: int, same_pad: bool = False) -> Tensor:
    """Max over window x window patches.

    ``same_pad`` pads the bottom/right edges with -inf so the output
    keeps ceil(extent / stride) positions (needed for stride-1 pooling
    that must preserve the spatial extent).
    """
    x = _coerce(x)
    if x.ndim != 4:
        raise ConfigurationError(f"maxpool2d expects 4-D input, got {x.shape}")
    if window < 1 or stride < 1:
        raise ConfigurationError(f"maxpool2d invalid window={window} stride={stride}")
    n, c, h, w = x.shape
    if same_pad:
        ho = -(-h // stride)
        wo = -(-w // stride)
        pad_h = max(0, (ho - 1) * stride + window - h)
        pad_w = max(0, (wo - 1) * stride + window - w)
        xp = np.pad(
            x.data,
            ((0, 0), (0, 0), (0, pad_h), (0, pad_w)),
            constant_values=-np.inf,
        )
    else:
        if window > h or window > w:
            raise ConfigurationError(
                f"maxpool2d window {window} exceeds input extent {h}x{w}"
            )
        pad_h = pad_w = 0
        xp = x.data
        ho = (h - window) // stride + 1
        wo = (w - window) // stride + 1

    windows = np.lib.stride_tricks.sliding_window_view(xp, (window, window), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, ho, wo, window * window)
    idx = np.argmax(flat, axis=-1)  # first max in scan order on ties
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros((n, c, h + pad_h, w + pad_w))
        ni, ci, ii, ji = np.indices((n, c, ho, wo))
        rows = ii * stride + idx // window
        cols = ji * stride + idx % window
        np.add.at(gx, (ni, ci, rows, cols), g)
        return (gx[:, :, :h, :w],)

    return _from_op(out, (x,), backward)


def avgpool2d(x, factor: int) -> Tensor:
    """Non-overlapping mean pooling by an integer factor."""
    x = _coerce(x)
    if x.ndim != 4:
        raise ConfigurationError(f"avgpool2d expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise ConfigurationError(
            f"avgpool2d factor {factor} must divide spatial extent {h}x{w}"
        )
    ho, wo = h // factor, w // factor
    data = x.data.reshape(n, c, ho, factor, wo, factor).mean(axis=(3, 5))

    def backward(g):
        gx = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        return (gx / (factor * factor),)

    return _from_op(data, (x,), backward)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate (N, Ci, H, W) tensors along the channel axis."""
    tensors = [_coerce(t) for t in inputs]
    if not tensors:
        raise ConfigurationError("concat_channels needs at least one input")
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != ref.shape[0] or t.shape[2:] != ref.shape[2:]:
            raise ConfigurationError(
                f"concat_channels spatial mismatch: {t.shape} vs {ref.shape}"
            )
    data = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=1)
        return tuple(
            piece if t.requires_grad else None for t, piece in zip(tensors, pieces)
        )

    return _from_op(data, tuple(tensors), backward)


def _interp_matrix(src: int, dst: int) -> Array:
    """Align-corners linear interpolation weights, shape (dst, src)."""
    m = np.zeros((dst, src))
    if src == 1 or dst == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    m[np.arange(dst), lo] += 1.0 - frac
    m[np.arange(dst), hi] += frac
    return m


def upsample_bilinear(x, target_h: int, target_w: int) -> Tensor:
    """Align-corners bilinear upsampling of the two trailing axes."""
    x = _coerce(x)
    if x.ndim < 2:
        raise ConfigurationError("upsample_bilinear needs at least 2 axes")
    h, w = x.shape[-2:]
    if target_h < 1 or target_w < 1:
        raise ConfigurationError("upsample target extents must be positive")
    if target_h < h or target_w < w:
        raise ConfigurationError(
            f"upsample target {target_h}x{target_w} smaller than input {h}x{w}"
        )
    rows = _interp_matrix(h, target_h)
    cols = _interp_matrix(w, target_w)
    # separable: interpolate rows then columns via broadcast matmuls
    data = rows @ x.data @ cols.T

    def backward(g):
        return (rows.T @ g @ cols,)

    return _from_op(data, (x,), backward)


def softmax_tempered(logits, tau: float) -> Tensor:
    """Row-wise softmax of logits / tau, stabilized by max subtraction."""
    logits = _coerce(logits)
    if tau <= 0:
        raise ConfigurationError(f"softmax temperature must be positive, got {tau}")
    if logits.ndim != 2:
        raise ConfigurationError(f"softmax_tempered expects (N, K), got {logits.shape}")
    z = logits.data / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * probs).sum(axis=1, keepdims=True)
        return (probs * (g - inner) / tau,)

    return _from_op(probs, (logits,), backward)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    max_abs_err: float
    checked: int


@dataclass
class GradCheckReport:
    epsilon: float
    entries: list[GradCheckEntry]

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def failures(self, tolerance: float) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.max_rel_err > tolerance]


def _rel_err(a: float, n: float) -> float:
    denom = max(abs(a), abs(n), 1e-8)
    return abs(a - n) / denom


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-4,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` to central differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter
    values on every call. When ``max_entries_per_param`` is set, a
    seeded subset of coordinates is probed instead of every entry.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ConfigurationError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    zero_grad(params)
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    entries = []
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        count = flat.size
        if max_entries_per_param is not None and count > max_entries_per_param:
            picker = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(picker.choice(count, size=max_entries_per_param, replace=False))
        else:
            coords = np.arange(count)
        worst_rel = 0.0
        worst_abs = 0.0
        a_flat = a.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_fn().item()
            flat[i] = orig - epsilon
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            worst_rel = max(worst_rel, _rel_err(a_flat[i], numeric))
            worst_abs = max(worst_abs, abs(a_flat[i] - numeric))
        entries.append(
            GradCheckEntry(
                name=p.name or f"param{len(entries)}",
                max_rel_err=worst_rel,
                max_abs_err=worst_abs,
                checked=len(coords),
            )
        )
    return GradCheckReport(epsilon=epsilon, entries=entries)
