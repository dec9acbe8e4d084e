"""Dense tensors with reverse-mode automatic differentiation on a tape.

Tensors wrap row-major numpy arrays (float64 in test mode, float32 in fast
mode). Every differentiable op appends one node to the active tape; backward
replays the tape once in reverse, accumulating gradients into every
requires_grad leaf. No graph optimization, no higher-order derivatives.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Tape", "ShapeError", "ContractError", "DegenerateRowError",
    "LabelError", "tensor", "parameter", "backward", "no_grad", "active_tape",
    "set_default_dtype", "default_dtype", "make_rng",
    "add", "sub", "mul", "scale", "neg", "matmul", "relu", "gelu",
    "softmax_lastdim", "layer_norm", "conv2d", "cross_entropy_logits",
    "sum_", "mean_", "maximum", "concat", "reshape", "transpose",
    "slice_", "linear", "global_avg_pool", "gradcheck",
    "Linear", "LayerNorm", "xavier_uniform",
]


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class ContractError(ValueError):
    """An op precondition other than shape was violated."""


class DegenerateRowError(FloatingPointError):
    """A softmax slice was entirely -inf; callers must guard such rows."""


class LabelError(ValueError):
    """A class label lies outside [0, C)."""


_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch between test mode (float64) and fast mode (float32)."""
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dt}; use float32 or float64")
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


def make_rng(seed: int) -> np.random.Generator:
    """Explicitly seeded PCG64 stream; same seed, same values."""
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    """n-d array plus gradient accumulator, participating in the active tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the named functions carry the contracts
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


class _Node:
    """One executed op: its output and the rule pushing grads to its inputs."""

    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...],
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed differentiable ops (a Wengert list).

    Execution order is a topological order by construction; the backward
    sweep visits each node exactly once, in reverse.
    """

    def __init__(self):
        self.recording = True
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def clear(self) -> None:
        self._nodes.clear()


_TAPE = Tape()


def active_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference / numeric probing)."""
    prev = _TAPE.recording
    _TAPE.recording = False
    try:
        yield
    finally:
        _TAPE.recording = prev


def _coerce(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    track = _TAPE.recording and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track, dtype=out_data.dtype)
    if track:
        _TAPE._nodes.append(_Node(out, inputs, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad of every requires_grad leaf reachable from `loss`.

    The tape is consumed: it is cleared after the sweep, ready for the next
    forward pass.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_TAPE._nodes):
        g = node.out.grad
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = gi.astype(t.data.dtype, copy=True) if gi.dtype != t.data.dtype else gi.copy()
            else:
                t.grad += gi
        node.out.grad = None  # free intermediate storage as we go
    _TAPE.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so g collapses back to `shape`."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    a = _coerce(a, _DEFAULT_DTYPE)
    b = _coerce(b, a.dtype)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bw)


def sub(a: Tensor, b) -> Tensor:
    a = _coerce(a, _DEFAULT_DTYPE)
    b = _coerce(b, a.dtype)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    a = _coerce(a, _DEFAULT_DTYPE)
    b = _coerce(b, a.dtype)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bw)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = x.data * s

    def bw(g):
        return (g * s,)

    return _record(out, (x,), bw)


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the whole gradient routes to `a`."""
    out = np.maximum(a.data, b.data)

    def bw(g):
        take_a = a.data >= b.data  # ties included: first operand wins
        ga = np.where(take_a, g, 0.0)
        gb = np.where(take_a, 0.0, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bw(g):
        return (g * (x.data > 0.0),)

    return _record(out, (x,), bw)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF form x * Phi(x), not the tanh approximation."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (phi + x.data * pdf),)

    return _record(out.astype(x.dtype, copy=False), (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, numpy semantics (leading dims broadcast)."""
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner extents disagree for {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        bt = np.swapaxes(b.data, -1, -2) if b.ndim > 1 else b.data
        at = np.swapaxes(a.data, -1, -2) if a.ndim > 1 else a.data
        ga = _unbroadcast(g @ bt, a.shape)
        gb = _unbroadcast(at @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w + b with w of shape (d_in, d_out)."""
    return add(matmul(x, w), b)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)  # row-major, view where possible
    in_shape = x.shape

    def bw(g):
        return (g.reshape(in_shape),)

    return _record(out, (x,), bw)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _record(out, (x,), bw)


def slice_(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _record(np.array(out, copy=True), (x,), bw)


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def bw(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _record(out, tuple(parts), bw)


def sum_(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if axes is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _record(np.asarray(out), (x,), bw)


def mean_(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if axes is None:
        count = x.size
    else:
        ax = (axes,) if isinstance(axes, int) else tuple(axes)
        count = int(np.prod([x.shape[a] for a in ax]))
    return scale(sum_(x, axes=axes, keepdims=keepdims), 1.0 / count)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all but the last axis (spatial pooling of ...xd features)."""
    return mean_(x, axes=tuple(range(x.ndim - 1)))


# ---------------------------------------------------------------------------
# normalization, softmax, losses


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stable softmax over the last axis; -inf entries map to exact 0."""
    m = np.max(x.data, axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateRowError("softmax slice with every entry -inf")
    e = np.exp(x.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1 (biased, +eps), then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gy = g * gamma.data
        gmean = gy.mean(axis=-1, keepdims=True)
        gxhat = (gy * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gy - gmean - xhat * gxhat)
        axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), bw)


def cross_entropy_logits(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_logits wants BxC logits, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise LabelError(f"labels must lie in [0,{c}), got range "
                         f"[{labels.min()},{labels.max()}]")
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=1, keepdims=True)
    lse = np.log(z) + m
    picked = logits.data[np.arange(n), labels]
    out = np.asarray((lse[:, 0] - picked).mean())

    def bw(g):
        p = e / z  # softmax
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return _record(out, (logits,), bw)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(n,c,H,W) padded input -> (n, c*k*k, ho*wo) patch matrix."""
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, ho, wo, k, k),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    # (n, c, k, k, ho, wo) -> rows indexed by (c,k,k)
    return np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation: x (c_in,H,W) or (n,c_in,H,W), w (c_out,c_in,k,k)."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d wants (n,c,H,W) and (c_out,c_in,k,k), got {x.shape}, {w.shape}")
    n, c_in, h, wdt = xd.shape
    c_out, c_in_w, k, k2 = w.shape
    if c_in != c_in_w or k != k2:
        raise ShapeError(f"conv2d kernel {w.shape} incompatible with input {x.shape}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wdt + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent {ho}x{wo} non-positive for input {h}x{wdt}, "
                         f"kernel {k}, stride {stride}, pad {pad}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, k, stride, ho, wo)                       # (n, ckk, howo)
    wmat = w.data.reshape(c_out, c_in * k * k)
    out = (wmat @ cols).reshape(n, c_out, ho, wo)

    def bw(g):
        gd = g[None] if squeeze else g
        gmat = gd.reshape(n, c_out, ho * wo)
        gw = np.tensordot(gmat, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gcols = wmat.T @ gmat                                   # (n, ckk, howo)
        gcols = gcols.reshape(n, c_in, k, k, ho, wo)
        gxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                gxp[:, :, ki:ki + ho * stride:stride, kj:kj + wo * stride:stride] += gcols[:, :, ki, kj]
        gx = gxp[:, :, pad:pad + h, pad:pad + wdt] if pad else gxp
        return (gx[0] if squeeze else gx), gw

    return _record(out[0] if squeeze else out, (x, w), bw)


# ---------------------------------------------------------------------------
# parameter-owning layers


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype=None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype or _DEFAULT_DTYPE)


class Linear:
    """Affine layer with xavier-uniform weight, zero bias."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, dtype=None,
                 zero_init: bool = False):
        dt = dtype or _DEFAULT_DTYPE
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=dt)
        else:
            w = xavier_uniform(rng, (d_in, d_out), d_in, d_out, dt)
        self.w = parameter(w, dtype=dt)
        self.b = parameter(np.zeros(d_out, dtype=dt), dtype=dt)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)

    def parameters(self):
        yield "w", self.w
        yield "b", self.b


class LayerNorm:
    """Last-axis layer normalization with learned affine (gamma=1, beta=0 init)."""

    def __init__(self, dim: int, eps: float = 1e-5, dtype=None):
        dt = dtype or _DEFAULT_DTYPE
        self.gamma = parameter(np.ones(dim, dtype=dt), dtype=dt)
        self.beta = parameter(np.zeros(dim, dtype=dt), dtype=dt)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)

    def parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor],
              eps: float = 1e-5, max_elems: int | None = None,
              rng: np.random.Generator | None = None) -> float:
    """Central-difference check of d fn / d params; returns max relative error.

    `fn` must rebuild the forward pass from the current parameter values on
    every call. Analytic gradients come from one tape sweep; numeric probes
    run untracked. Use float64 parameters; float32 probes are unreliable.
    """
    for p in params:
        p.zero_grad()
    loss = fn()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_elems is not None and n > max_elems:
            idxs = (rng or np.random.default_rng(0)).choice(n, size=max_elems, replace=False)
        else:
            idxs = range(n)
        for i in idxs:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                hi = fn().item()
                flat[i] = orig - eps
                lo = fn().item()
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            a = ana.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-6)
            worst = max(worst, err)
    return worst
