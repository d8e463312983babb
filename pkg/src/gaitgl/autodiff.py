"""Dense-tensor engine with reverse-mode gradient accumulation.

Tensors wrap numpy arrays.  Every differentiable operation records a tape
node (parent references plus a backward closure) on its output tensor;
``backward`` walks the recorded nodes in reverse insertion order exactly
once and accumulates gradients into leaves.  ``grad_check`` validates any
analytic gradient against central finite differences.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

from .errors import DimensionError, DomainError, GradientError

_DTYPES = {"single": np.float32, "double": np.float64}
_default_dtype = np.float64


def set_default_precision(name: str) -> None:
    """Select 'single' or 'double' as the dtype for new params and batches."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}, expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype():
    return _default_dtype


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    """Dense real array of rank 1..5 plus optional tape bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "name", "parents", "backward_fn", "tid")
    _ids = itertools.count()

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.parents = None
        self.backward_fn = None
        self.tid = next(Tensor._ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


class Param(Tensor):
    """Trainable tensor: persistent zero-initialized gradient buffer."""

    def __init__(self, data, name: str = ""):
        super().__init__(np.asarray(data), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def record(data, parents, backward_fn, name: str = "") -> Tensor:
    """Create an output tensor, attaching a tape node when grads are live."""
    out = Tensor(data, name=name)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def accumulate(t: Tensor, g, own: bool = False) -> None:
    """Add a gradient contribution to ``t`` (lazy buffer creation).

    own=True transfers ownership of a freshly allocated ``g`` so the first
    contribution needs no copy; callers must not reuse the array.
    """
    if t.grad is None:
        if own and g.dtype == t.data.dtype:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad.

    The tape is consumed: interior node references are dropped so the
    graph cannot be replayed.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    # Reachable subgraph, then reverse insertion order.
    seen = {loss.tid}
    stack = [loss]
    nodes = []
    while stack:
        t = stack.pop()
        nodes.append(t)
        if t.parents is not None:
            for p in t.parents:
                if p.tid not in seen:
                    seen.add(p.tid)
                    stack.append(p)
    nodes.sort(key=lambda t: t.tid, reverse=True)

    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    for t in nodes:
        if t.backward_fn is None:
            continue
        if t.grad is not None:
            t.backward_fn(t.grad)
        t.backward_fn = None
        t.parents = None
        if not isinstance(t, Param):
            t.grad = None


# ---------------------------------------------------------------------------
# Elementwise operations and simple structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add: shapes differ {a.data.shape} vs {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            accumulate(a, g)
        if b.requires_grad:
            accumulate(b, g)

    return record(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul: shapes differ {a.data.shape} vs {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            accumulate(a, g * b.data)
        if b.requires_grad:
            accumulate(b, g * a.data)

    return record(a.data * b.data, (a, b), bwd)


def mul_hw(x: Tensor, m) -> Tensor:
    """Multiply every (batch, channel, frame) slice of x by an HxW plane."""
    m = np.asarray(m, dtype=x.data.dtype)
    if m.shape != x.data.shape[-2:]:
        raise DimensionError(
            f"mask extents {m.shape} do not match feature extents {x.data.shape[-2:]}")

    def bwd(g):
        if x.requires_grad:
            accumulate(x, g * m)

    return record(x.data * m, (x,), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        if a.requires_grad:
            accumulate(a, g * c)

    return record(a.data * c, (a,), bwd)


def powc(a: Tensor, c: float) -> Tensor:
    """Elementwise a**c with scalar exponent c."""
    c = float(c)
    if c != int(c) and (a.data < 0).any():
        raise DomainError("pow: negative base with fractional exponent")
    out = a.data ** c

    def bwd(g):
        if a.requires_grad:
            accumulate(a, g * c * a.data ** (c - 1.0))

    return record(out, (a,), bwd)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.data >= 0
    out = np.where(pos, a.data, a.data * slope)

    def bwd(g):
        if a.requires_grad:
            accumulate(a, g * np.where(pos, 1.0, slope))

    return record(out, (a,), bwd)


def elementwise(op: str, a: Tensor, b=None, slope: float = 0.01) -> Tensor:
    """Dispatcher over the basic pointwise ops.

    op in {'add', 'mul', 'pow', 'scale', 'leaky_relu'}; b is a tensor for
    add/mul, a scalar for pow/scale, unused for leaky_relu.  An HxW array
    passed to 'mul' broadcasts over the leading (batch, channel, frame)
    axes.
    """
    if op == "add":
        return add(a, b)
    if op == "mul":
        if isinstance(b, Tensor):
            return mul(a, b)
        b = np.asarray(b)
        if b.ndim == 2:
            return mul_hw(a, b)
        raise DimensionError(f"mul: cannot broadcast operand of shape {b.shape}")
    if op == "pow":
        return powc(a, b)
    if op == "scale":
        return scale(a, b)
    if op == "leaky_relu":
        return leaky_relu(a, slope)
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """Contract the last axis of x against the first axis of w[A, B]."""
    if w.data.ndim != 2:
        raise DimensionError(f"matmul: weight must be rank 2, got {w.data.ndim}")
    if x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(
            f"matmul: inner extents disagree {x.data.shape} vs {w.data.shape}")
    out = x.data @ w.data

    def bwd(g):
        if x.requires_grad:
            accumulate(x, g @ w.data.T)
        if w.requires_grad:
            xm = x.data.reshape(-1, x.data.shape[-1])
            gm = g.reshape(-1, g.shape[-1])
            accumulate(w, xm.T @ gm)

    return record(out, (x, w), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        if x.requires_grad:
            accumulate(x, g.reshape(x.data.shape))

    return record(x.data.reshape(shape), (x,), bwd)


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.data.shape[axis] for p in parts])

    def bwd(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                accumulate(p, g[tuple(idx)])

    return record(out, tuple(parts), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx] = g
            accumulate(x, full)

    return record(np.ascontiguousarray(x.data[idx]), (x,), bwd)


def swap_last2(x: Tensor) -> Tensor:
    """Transpose the final two axes."""
    axes = tuple(range(x.data.ndim - 2)) + (x.data.ndim - 1, x.data.ndim - 2)

    def bwd(g):
        if x.requires_grad:
            accumulate(x, g.transpose(axes))

    return record(np.ascontiguousarray(x.data.transpose(axes)), (x,), bwd)


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries as a scalar-shaped tensor."""

    def bwd(g):
        if x.requires_grad:
            accumulate(x, np.broadcast_to(g, x.data.shape))

    return record(np.asarray(x.data.sum()), (x,), bwd)


def tmean(x: Tensor) -> Tensor:
    return scale(tsum(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# Head ops: per-strip fully connected bank and generalized-mean reduction
# ---------------------------------------------------------------------------

def strip_fc(x: Tensor, w: Tensor) -> Tensor:
    """Apply an independent FC weight per horizontal strip.

    x: [N, C, S] strip features, w: [S, C, O] one weight matrix per strip;
    returns [N, S, O].
    """
    if w.data.ndim != 3:
        raise DimensionError(f"strip_fc: weights must be rank 3, got {w.data.ndim}")
    if x.data.ndim != 3 or x.data.shape[1] != w.data.shape[1] or x.data.shape[2] != w.data.shape[0]:
        raise DimensionError(
            f"strip_fc: features {x.data.shape} incompatible with weights {w.data.shape}")
    out = np.einsum("ncs,sco->nso", x.data, w.data, optimize=True)

    def bwd(g):
        if x.requires_grad:
            accumulate(x, np.einsum("nso,sco->ncs", g, w.data, optimize=True))
        if w.requires_grad:
            accumulate(w, np.einsum("ncs,nso->sco", x.data, g, optimize=True))

    return record(out, (x, w), bwd)


def gem_lastaxis(x: Tensor, p: Tensor) -> Tensor:
    """Generalized-mean reduction over the last axis with learnable exponent.

    y = (mean(x**p, axis=-1)) ** (1/p) for x >= 0 and scalar p.  Strips that
    are identically zero map to zero with zero gradient.
    """
    if p.data.size != 1:
        raise DimensionError("gem: exponent must be a scalar")
    if (x.data < 0).any():
        raise DomainError("gem: negative input; clamp activations before pooling")
    pv = float(p.data.reshape(-1)[0])
    count = x.data.shape[-1]
    xp = x.data ** pv
    m = xp.mean(axis=-1)
    live = m > 0
    out = np.zeros_like(m)
    out[live] = m[live] ** (1.0 / pv)

    def bwd(g):
        glive = g * live
        if x.requires_grad:
            # d out / d x_w = m^(1/p - 1) * x_w^(p-1) / count
            front = np.zeros_like(m)
            front[live] = m[live] ** (1.0 / pv - 1.0)
            gx = (glive * front)[..., None] * (x.data ** (pv - 1.0)) / count
            accumulate(x, gx)
        if p.requires_grad:
            # d out / d p = out * (-ln(m)/p^2 + mean(x^p ln x)/(p*m))
            logx = np.zeros_like(x.data)
            posx = x.data > 0
            logx[posx] = np.log(x.data[posx])
            s = (xp * logx).mean(axis=-1)
            dp = np.zeros_like(m)
            dp[live] = out[live] * (-np.log(m[live]) / pv ** 2 + s[live] / (pv * m[live]))
            accumulate(p, np.asarray((glive * dp).sum(), dtype=p.data.dtype).reshape(p.data.shape))

    return record(out, (x, p), bwd)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def grad_check(f, x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps a tensor to a tensor; the implicit objective is sum(f(x)).  The
    error at each coordinate is |analytic - numeric| / max(1, |numeric|).
    Run at double precision.
    """
    probe = Tensor(np.array(x.data, dtype=np.float64, copy=True), requires_grad=True)
    out = f(probe)
    loss = tsum(out)
    backward(loss)
    analytic = np.zeros_like(probe.data) if probe.grad is None else probe.grad.copy()

    base = probe.data.copy()
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            # Snapshot: f may pass its argument's buffer straight through.
            hi = np.array(f(Tensor(base)).data, copy=True)
            flat[i] = orig - eps
            lo = f(Tensor(base)).data
            # Subtract before summing so unperturbed outputs cancel exactly.
            nflat[i] = float((hi - lo).sum()) / (2.0 * eps)
            flat[i] = orig

    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
