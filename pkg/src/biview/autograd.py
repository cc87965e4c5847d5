"""Minimal float32 tape-based autograd engine.

Everything trainable in this package runs on this backend: a `Tensor` wraps a
row-major float32 numpy array, records the operations applied to it, and
`backward()` walks the tape in reverse topological order. Heavy ops (conv,
batch norm, losses) are fused nodes with hand-derived backward passes so the
graph stays small and the arithmetic stays inside BLAS calls.

Conventions:
  - dtype is float32 engine-wide; tolerances elsewhere assume it.
  - `no_grad()` disables taping (used for momentum encoders and evaluation).
  - gradients are accumulated by rebinding (`t.grad = t.grad + g`), never by
    in-place mutation, so aliasing between grads and op outputs is safe.
"""

from __future__ import annotations

import logging
import math
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import NumericalError, ShapeError

_logger = logging.getLogger(__name__)

DTYPE = np.float32

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Context manager that suspends graph recording."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float32 array plus (optionally) a gradient and a tape entry.

    `data` is the value, `grad` the accumulated gradient (same shape, or None),
    `requires_grad` marks leaves the optimizer owns and interior nodes that
    must propagate. `_parents`/`_backward` are tape internals.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- introspection -------------------------------------------------------
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- tape ----------------------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded tape."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operator sugar ------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index_rows(self, key)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _acc(t: Tensor, g: np.ndarray) -> None:
    """Accumulate gradient g into t.grad (rebinding, shape-checked)."""
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match value shape {t.data.shape}")
    if g.dtype != DTYPE:
        g = g.astype(DTYPE)
    t.grad = g if t.grad is None else t.grad + g


def _node(data: np.ndarray, inputs: tuple[Tensor, ...]) -> tuple[Tensor, bool]:
    """Create an output tensor; returns (tensor, needs_backward)."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in inputs):
        out.requires_grad = True
        out._parents = tuple(p for p in inputs if p.requires_grad)
        return out, True
    return out, False


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic (with broadcasting)
# ---------------------------------------------------------------------------

def add(x, y) -> Tensor:
    x, y = astensor(x), astensor(y)
    try:
        data = x.data + y.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {x.shape} with {y.shape}") from None
    out, rec = _node(data, (x, y))
    if rec:
        def _bwd():
            g = out.grad
            if x.requires_grad:
                _acc(x, _unbroadcast(g, x.data.shape))
            if y.requires_grad:
                _acc(y, _unbroadcast(g, y.data.shape))
        out._backward = _bwd
    return out


def sub(x, y) -> Tensor:
    x, y = astensor(x), astensor(y)
    try:
        data = x.data - y.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {x.shape} with {y.shape}") from None
    out, rec = _node(data, (x, y))
    if rec:
        def _bwd():
            g = out.grad
            if x.requires_grad:
                _acc(x, _unbroadcast(g, x.data.shape))
            if y.requires_grad:
                _acc(y, _unbroadcast(-g, y.data.shape))
        out._backward = _bwd
    return out


def mul(x, y) -> Tensor:
    x, y = astensor(x), astensor(y)
    try:
        data = x.data * y.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {x.shape} with {y.shape}") from None
    out, rec = _node(data, (x, y))
    if rec:
        xd, yd = x.data, y.data
        def _bwd():
            g = out.grad
            if x.requires_grad:
                _acc(x, _unbroadcast(g * yd, xd.shape))
            if y.requires_grad:
                _acc(y, _unbroadcast(g * xd, yd.shape))
        out._backward = _bwd
    return out


def div(x, y) -> Tensor:
    x, y = astensor(x), astensor(y)
    try:
        data = x.data / y.data
    except ValueError:
        raise ShapeError(f"div: cannot broadcast {x.shape} with {y.shape}") from None
    out, rec = _node(data, (x, y))
    if rec:
        xd, yd = x.data, y.data
        def _bwd():
            g = out.grad
            if x.requires_grad:
                _acc(x, _unbroadcast(g / yd, xd.shape))
            if y.requires_grad:
                _acc(y, _unbroadcast(-g * xd / (yd * yd), yd.shape))
        out._backward = _bwd
    return out


def exp(x) -> Tensor:
    x = astensor(x)
    data = np.exp(x.data)
    out, rec = _node(data, (x,))
    if rec:
        def _bwd():
            _acc(x, out.grad * data)
        out._backward = _bwd
    return out


def log(x) -> Tensor:
    x = astensor(x)
    data = np.log(x.data)
    out, rec = _node(data, (x,))
    if rec:
        xd = x.data
        def _bwd():
            _acc(x, out.grad / xd)
        out._backward = _bwd
    return out


def relu(x) -> Tensor:
    x = astensor(x)
    data = np.maximum(x.data, 0.0).astype(DTYPE, copy=False)
    out, rec = _node(data, (x,))
    if rec:
        mask = x.data > 0
        def _bwd():
            _acc(x, out.grad * mask)
        out._backward = _bwd
    return out


def sigmoid(x) -> Tensor:
    x = astensor(x)
    # numerically stable split by sign
    xd = x.data
    data = np.empty_like(xd)
    pos = xd >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    data[~pos] = ex / (1.0 + ex)
    out, rec = _node(data, (x,))
    if rec:
        def _bwd():
            _acc(x, out.grad * data * (1.0 - data))
        out._backward = _bwd
    return out


# ---------------------------------------------------------------------------
# reductions / reshapes / indexing
# ---------------------------------------------------------------------------

def tsum(x) -> Tensor:
    x = astensor(x)
    data = np.asarray(x.data.sum(dtype=DTYPE))
    out, rec = _node(data, (x,))
    if rec:
        def _bwd():
            _acc(x, np.broadcast_to(out.grad, x.data.shape).astype(DTYPE))
        out._backward = _bwd
    return out


def tmean(x) -> Tensor:
    x = astensor(x)
    n = x.data.size
    data = np.asarray(x.data.mean(dtype=DTYPE))
    out, rec = _node(data, (x,))
    if rec:
        def _bwd():
            _acc(x, np.broadcast_to(out.grad / n, x.data.shape).astype(DTYPE))
        out._backward = _bwd
    return out


def reshape(x, shape) -> Tensor:
    x = astensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    out, rec = _node(data, (x,))
    if rec:
        def _bwd():
            _acc(x, out.grad.reshape(x.data.shape))
        out._backward = _bwd
    return out


def index_rows(x, key) -> Tensor:
    """Row indexing: integer (drops the axis) or slice along axis 0."""
    x = astensor(x)
    if not isinstance(key, (int, np.integer, slice)):
        raise ShapeError(f"index: unsupported key {key!r} for shape {x.shape}")
    data = x.data[key]
    out, rec = _node(np.ascontiguousarray(data), (x,))
    if rec:
        def _bwd():
            g = np.zeros_like(x.data)
            g[key] = out.grad
            _acc(x, g)
        out._backward = _bwd
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [astensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list (no shapes to concatenate)")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    out, rec = _node(data, tuple(tensors))
    if rec:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def _bwd():
            g = out.grad
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    _acc(t, np.ascontiguousarray(g[tuple(idx)]))
        out._backward = _bwd
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(x, y) -> Tensor:
    """matmul for 1-D/2-D operands (vector dot, mat-vec, vec-mat, mat-mat)."""
    x, y = astensor(x), astensor(y)
    if x.ndim not in (1, 2) or y.ndim not in (1, 2):
        raise ShapeError(f"matmul: only 1-D/2-D supported, got {x.shape} @ {y.shape}")
    try:
        data = x.data @ y.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {x.shape} @ {y.shape}") from None
    out, rec = _node(np.asarray(data), (x, y))
    if rec:
        xd, yd = x.data, y.data
        def _bwd():
            g = out.grad
            if x.ndim == 2 and y.ndim == 2:
                if x.requires_grad:
                    _acc(x, g @ yd.T)
                if y.requires_grad:
                    _acc(y, xd.T @ g)
            elif x.ndim == 2 and y.ndim == 1:
                if x.requires_grad:
                    _acc(x, np.outer(g, yd).astype(DTYPE))
                if y.requires_grad:
                    _acc(y, xd.T @ g)
            elif x.ndim == 1 and y.ndim == 2:
                if x.requires_grad:
                    _acc(x, yd @ g)
                if y.requires_grad:
                    _acc(y, np.outer(xd, g).astype(DTYPE))
            else:  # 1-D dot
                if x.requires_grad:
                    _acc(x, g * yd)
                if y.requires_grad:
                    _acc(y, g * xd)
        out._backward = _bwd
    return out


def linear(x, weight, bias=None) -> Tensor:
    """Affine map: x (B, Din) or (Din,) times weight (Dout, Din) plus bias (Dout,)."""
    x, weight = astensor(x), astensor(weight)
    if weight.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-D (Dout, Din), got {weight.shape}")
    squeeze = x.ndim == 1
    xd = x.data[None, :] if squeeze else x.data
    if xd.ndim != 2 or xd.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    data = xd @ weight.data.T
    inputs = [x, weight]
    if bias is not None:
        bias = astensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
        data = data + bias.data
        inputs.append(bias)
    if squeeze:
        data = data[0]
    out, rec = _node(data, tuple(inputs))
    if rec:
        def _bwd():
            g = out.grad[None, :] if squeeze else out.grad
            if x.requires_grad:
                gx = g @ weight.data
                _acc(x, gx[0] if squeeze else gx)
            if weight.requires_grad:
                _acc(weight, g.T @ xd)
            if bias is not None and bias.requires_grad:
                _acc(bias, g.sum(axis=0))
        out._backward = _bwd
    return out


# ---------------------------------------------------------------------------
# convolutional network ops
# ---------------------------------------------------------------------------

def _conv_window_view(xp: np.ndarray, kh: int, kw: int, oh: int, ow: int, stride: int) -> np.ndarray:
    """Zero-copy (N, C, KH, KW, OH, OW) sliding-window view of a padded input."""
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(xp.shape[0], xp.shape[1], kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW layout.

    x: (N, C, H, W); weight: (F, C, KH, KW); bias: (F,) or None.
    Forward/backward both reduce to single tensordot (GEMM) calls over an
    im2col window view; the input-gradient scatter is KH*KW strided adds.
    """
    x, weight = astensor(x), astensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match weight {weight.shape}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {weight.shape} too large for input {x.shape} (padding={padding})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    view = _conv_window_view(xp, kh, kw, oh, ow, stride)
    data = np.tensordot(view, weight.data, axes=([1, 2, 3], [1, 2, 3]))  # (N, OH, OW, F)
    data = np.ascontiguousarray(data.transpose(0, 3, 1, 2))
    inputs = [x, weight]
    if bias is not None:
        bias = astensor(bias)
        if bias.shape != (f,):
            raise ShapeError(f"conv2d: bias {bias.shape} incompatible with weight {weight.shape}")
        data += bias.data[None, :, None, None]
        inputs.append(bias)
    out, rec = _node(data, tuple(inputs))
    if rec:
        def _bwd():
            g = out.grad  # (N, F, OH, OW)
            if bias is not None and bias.requires_grad:
                _acc(bias, g.sum(axis=(0, 2, 3)))
            if weight.requires_grad:
                gw = np.tensordot(g, view, axes=([0, 2, 3], [0, 4, 5]))  # (F, C, KH, KW)
                _acc(weight, gw)
            if x.requires_grad:
                # (N, OH, OW, C, KH, KW)
                gcols = np.tensordot(g, weight.data, axes=([1], [0]))
                gxp = np.zeros_like(xp)
                for ki in range(kh):
                    hi = ki + stride * oh
                    for kj in range(kw):
                        wj = kj + stride * ow
                        gxp[:, :, ki:hi:stride, kj:wj:stride] += gcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
                _acc(x, np.ascontiguousarray(gx))
        out._backward = _bwd
    return out


def batchnorm2d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5,
                update_running: bool | None = None) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes with batch statistics and (when `update_running`)
    folds the biased batch moments into the running buffers:
    running <- (1 - momentum) * running + momentum * batch. Evaluation mode
    normalizes with the running buffers. The buffers are plain numpy arrays
    owned by the caller; this op is their only writer.
    """
    x, gamma, beta = astensor(x), astensor(gamma), astensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: need 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma {gamma.shape}/beta {beta.shape} do not match input {x.shape}")
    if update_running is None:
        update_running = training
    xd = x.data
    if training:
        mean = xd.mean(axis=(0, 2, 3), dtype=np.float32)
        var = xd.var(axis=(0, 2, 3), dtype=np.float32)
        if update_running:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        mean = running_mean.astype(DTYPE, copy=False)
        var = running_var.astype(DTYPE, copy=False)
    inv = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = (xd - mean[None, :, None, None]) * inv[None, :, None, None]
    data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out, rec = _node(data.astype(DTYPE, copy=False), (x, gamma, beta))
    if rec:
        def _bwd():
            g = out.grad
            if beta.requires_grad:
                _acc(beta, g.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                _acc(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gxhat = g * gamma.data[None, :, None, None]
                if training:
                    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
                    s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                    s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                    gx = (inv[None, :, None, None] / m) * (m * gxhat - s1 - xhat * s2)
                else:
                    gx = gxhat * inv[None, :, None, None]
                _acc(x, gx.astype(DTYPE, copy=False))
        out._backward = _bwd
    return out


def maxpool2d(x, kernel: int = 2, stride: int = 2) -> Tensor:
    """Max pooling; the implemented case is kernel=stride=2 on even maps."""
    x = astensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: need 4-D input, got {x.shape}")
    if kernel != 2 or stride != 2:
        raise ShapeError(f"maxpool2d: only kernel=2, stride=2 supported, got kernel={kernel}, stride={stride}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial dims must be even, got {x.shape}")
    h2, w2 = h // 2, w // 2
    windows = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = windows.argmax(axis=-1)
    data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    out, rec = _node(np.ascontiguousarray(data), (x,))
    if rec:
        def _bwd():
            g4 = np.zeros((n, c, h2, w2, 4), dtype=DTYPE)
            np.put_along_axis(g4, idx[..., None], out.grad[..., None], axis=-1)
            gx = g4.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            _acc(x, np.ascontiguousarray(gx))
        out._backward = _bwd
    return out


def global_avg_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    x = astensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: need 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    data = x.data.mean(axis=(2, 3), dtype=DTYPE)
    out, rec = _node(data, (x,))
    if rec:
        def _bwd():
            gx = np.broadcast_to(out.grad[:, :, None, None] / DTYPE(h * w), x.data.shape)
            _acc(x, np.ascontiguousarray(gx))
        out._backward = _bwd
    return out


def upsample_nearest2(x) -> Tensor:
    """Nearest-neighbor x2 upsampling with a defined gradient (2x2 block sum)."""
    x = astensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2: need 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    out, rec = _node(data, (x,))
    if rec:
        def _bwd():
            gx = out.grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
            _acc(x, gx)
        out._backward = _bwd
    return out


# ---------------------------------------------------------------------------
# normalization / losses
# ---------------------------------------------------------------------------

def l2_normalize(x) -> Tensor:
    """Scale rows (2-D) or the vector (1-D) to unit Euclidean norm.

    All-zero rows map to all-zero rows and are flagged with a warning (the
    gradient there is defined as zero).
    """
    x = astensor(x)
    if x.ndim not in (1, 2):
        raise ShapeError(f"l2_normalize: need 1-D or 2-D input, got {x.shape}")
    xd = x.data
    norms = np.sqrt((xd * xd).sum(axis=-1, keepdims=True, dtype=DTYPE))
    zero = norms == 0.0
    if zero.any():
        _logger.warning("l2_normalize: %d all-zero row(s) left as zeros", int(zero.sum()))
    safe = np.where(zero, DTYPE(1.0), norms)
    data = xd / safe
    out, rec = _node(data, (x,))
    if rec:
        def _bwd():
            g = out.grad
            dot = (g * data).sum(axis=-1, keepdims=True, dtype=DTYPE)
            _acc(x, (g - data * dot) / safe)
        out._backward = _bwd
    return out


def logsumexp(x) -> Tensor:
    """Stable log(sum(exp(x))) of a 1-D tensor -> scalar."""
    x = astensor(x)
    if x.ndim != 1:
        raise ShapeError(f"logsumexp: need 1-D input, got {x.shape}")
    m = x.data.max()
    z = np.exp(x.data - m)
    s = z.sum(dtype=DTYPE)
    data = np.asarray(m + np.log(s), dtype=DTYPE)
    out, rec = _node(data, (x,))
    if rec:
        soft = z / s
        def _bwd():
            _acc(x, out.grad * soft)
        out._backward = _bwd
    return out


def softmax_nll(logits, labels, reduction: str = "mean") -> Tensor:
    """Fused softmax + negative log-likelihood.

    logits: (B, K) or (K,); labels: int array (B,) or scalar int with values
    in [0, K). reduction: 'mean', 'sum' or 'none'.
    """
    logits = astensor(logits)
    squeeze = logits.ndim == 1
    ld = logits.data[None, :] if squeeze else logits.data
    if ld.ndim != 2:
        raise ShapeError(f"softmax_nll: logits must be 1-D or 2-D, got {logits.shape}")
    b, k = ld.shape
    lab = np.atleast_1d(np.asarray(labels))
    if lab.shape != (b,):
        raise ShapeError(f"softmax_nll: labels shape {lab.shape} does not match logits {logits.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        raise ShapeError(f"softmax_nll: labels must be integers, got dtype {lab.dtype} for logits {logits.shape}")
    if lab.min() < 0 or lab.max() >= k:
        raise ShapeError(f"softmax_nll: label values outside [0, {k}) for logits {logits.shape}")
    if reduction not in ("mean", "sum", "none"):
        raise ValueError(f"softmax_nll: unknown reduction {reduction!r}")
    m = ld.max(axis=1, keepdims=True)
    z = np.exp(ld - m)
    s = z.sum(axis=1, keepdims=True, dtype=DTYPE)
    lse = (m[:, 0] + np.log(s[:, 0])).astype(DTYPE)
    nll = lse - ld[np.arange(b), lab]
    if reduction == "mean":
        data = np.asarray(nll.mean(dtype=DTYPE))
    elif reduction == "sum":
        data = np.asarray(nll.sum(dtype=DTYPE))
    else:
        data = nll[0] if squeeze else nll
    out, rec = _node(data, (logits,))
    if rec:
        soft = z / s
        def _bwd():
            gl = soft.copy()
            gl[np.arange(b), lab] -= 1.0
            if reduction == "mean":
                gl *= out.grad / b
            elif reduction == "sum":
                gl *= out.grad
            else:
                g = np.atleast_1d(out.grad)
                gl *= g[:, None]
            _acc(logits, gl[0] if squeeze else gl)
        out._backward = _bwd
    return out


# ---------------------------------------------------------------------------
# bilinear resize (forward only)
# ---------------------------------------------------------------------------

def resize_bilinear_array(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of the trailing two axes (half-pixel centers).

    Accepts (..., H, W); identity sizes return an exact copy. Forward only —
    used by inference-time analysis and augmentation, never trained through.
    """
    img = np.asarray(img)
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if img.ndim < 2:
        raise ShapeError(f"resize_bilinear: need at least 2-D input, got {img.shape}")
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"resize_bilinear: target size {(oh, ow)} invalid for input {img.shape}")
    h, w = img.shape[-2:]
    if (h, w) == (oh, ow):
        return img.astype(np.float32, copy=True)
    work = img.astype(np.float64, copy=False)

    def _axis_coords(n_in: int, n_out: int):
        scale = n_in / n_out
        src = (np.arange(n_out) + 0.5) * scale - 0.5
        i0 = np.floor(src).astype(np.int64)
        frac = src - i0
        i0c = np.clip(i0, 0, n_in - 1)
        i1c = np.clip(i0 + 1, 0, n_in - 1)
        return i0c, i1c, frac

    y0, y1, fy = _axis_coords(h, oh)
    x0, x1, fx = _axis_coords(w, ow)
    top = work[..., y0, :] * (1.0 - fy)[..., :, None] + work[..., y1, :] * fy[..., :, None]
    data = top[..., :, x0] * (1.0 - fx) + top[..., :, x1] * fx
    return data.astype(np.float32)


def resize_bilinear(x, out_hw: tuple[int, int]) -> Tensor:
    """Tensor wrapper over `resize_bilinear_array`; the output never requires grad."""
    x = astensor(x)
    return Tensor(resize_bilinear_array(x.data, out_hw))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(scalar_function, x, eps: float = 1e-2) -> float:
    """Compare analytic and central-difference gradients of a scalar function.

    Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
    `scalar_function` receives a Tensor shaped like `x` and must return a
    scalar Tensor. Non-finite outputs abort with the offending coordinate.
    """
    if eps <= 0:
        raise ValueError(f"grad_check: eps must be positive, got {eps}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = scalar_function(leaf)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ShapeError("grad_check: function must return a scalar Tensor")
    if not np.isfinite(out.data).all():
        raise NumericalError("grad_check: non-finite output at the unperturbed point")
    out.backward()
    analytic = (np.zeros_like(x0) if leaf.grad is None else leaf.grad).reshape(-1).astype(np.float64)
    if not np.isfinite(analytic).all():
        bad = int(np.flatnonzero(~np.isfinite(analytic))[0])
        raise NumericalError(f"grad_check: non-finite analytic gradient at coordinate {bad}")
    flat = x0.reshape(-1)
    numeric = np.empty_like(analytic)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + DTYPE(eps)
            fp = float(np.asarray(scalar_function(Tensor(x0)).data).reshape(()))
            flat[i] = orig - DTYPE(eps)
            fm = float(np.asarray(scalar_function(Tensor(x0)).data).reshape(()))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericalError(f"grad_check: non-finite output perturbing coordinate {i}")
            numeric[i] = (fp - fm) / (2.0 * float(DTYPE(eps)))
    if flat.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max())


def required_ops() -> dict:
    """The frozen op inventory every model in this package is built from.

    Keys are op names; values are the callables (taped forward with backward,
    except `resize_bilinear`, which is forward-only by contract).
    """
    return {
        "conv2d": conv2d,
        "linear": linear,
        "matmul": matmul,
        "relu": relu,
        "batchnorm2d": batchnorm2d,
        "maxpool2d": maxpool2d,
        "global_avg_pool": global_avg_pool,
        "resize_bilinear": resize_bilinear,
        "softmax_nll": softmax_nll,
        "add": add,
        "mul": mul,
        "sub": sub,
        "l2_normalize": l2_normalize,
        "concat": concat,
    }
