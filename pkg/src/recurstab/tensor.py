"""Minimal deterministic tensor engine with reverse-mode differentiation.

Feature maps are float32 arrays of shape [h, w, channels], convolution
kernels are [k, k, c_in, c_out] with odd k and "same" spatial output.
Every differentiable operation records a closure on a tape; calling
``backward`` on a scalar replays the tape in reverse topological order.

Circular padding is the default everywhere because it makes a convolution
exactly equal to multiplication by a block matrix of circulant blocks,
which is what all spectral computations in :mod:`recurstab.spectral`
assume. Zero padding is available behind the ``pad`` flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PAD_MODES = ("circular", "zero")
DEFAULT_PAD = "circular"


class TensorError(ValueError):
    """Raised on shape mismatches, invalid values or tape misuse."""


def _check_pad(pad):
    if pad not in PAD_MODES:
        raise TensorError(f"unknown padding mode {pad!r}, expected one of {PAD_MODES}")


class Tensor:
    """A float32 array plus an optional gradient buffer and tape hooks."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop", "_backward_done")

    def __init__(self, data, requires_grad=False, _parents=(), _backprop=None):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backprop = _backprop
        self._backward_done = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def is_finite(self):
        """Exposed divergence query; non-finite values are never silent."""
        return bool(np.isfinite(self.data).all())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    # -- reverse mode --------------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every tensor this scalar depends on.

        Raises if called twice on the same recorded value; re-record the
        computation to differentiate again.
        """
        if self.size != 1:
            raise TensorError(f"backward expects a scalar, got shape {self.shape}")
        if self._backward_done:
            raise TensorError("backward already called on this value; re-record the computation")
        self._backward_done = True

        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)


def _toposort(root):
    """Reverse topological order of the tape below ``root`` (iterative)."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float32, copy=True)
    else:
        t.grad = t.grad + g


def _reduce_to_shape(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- kernels ------------------------------------------------------------------


@dataclass
class KernelTensor:
    """4-D convolution weights [k, k, c_in, c_out] with odd spatial size."""

    weights: Tensor

    def __post_init__(self):
        if not isinstance(self.weights, Tensor):
            self.weights = Tensor(self.weights)
        w = self.weights.data
        if w.ndim != 4:
            raise TensorError(f"kernel must be 4-D [k,k,c_in,c_out], got shape {w.shape}")
        if w.shape[0] != w.shape[1]:
            raise TensorError(f"kernel spatial dims must match, got {w.shape[:2]}")
        if w.shape[0] % 2 == 0:
            raise TensorError(f"kernel size must be odd for same-size output, got k={w.shape[0]}")
        if not np.isfinite(w).all():
            raise TensorError("kernel weights must be finite")

    @property
    def k(self):
        return self.weights.data.shape[0]

    @property
    def m_in(self):
        return self.weights.data.shape[2]

    @property
    def m_out(self):
        return self.weights.data.shape[3]


def kernel_array(kernel):
    """Coerce a KernelTensor / Tensor / ndarray kernel argument to an ndarray."""
    if isinstance(kernel, KernelTensor):
        return kernel.weights.data
    if isinstance(kernel, Tensor):
        return kernel.data
    return np.asarray(kernel)


def _kernel_tensor(kernel):
    if isinstance(kernel, KernelTensor):
        return kernel.weights
    if isinstance(kernel, Tensor):
        return kernel
    return Tensor(np.asarray(kernel, dtype=np.float32))


# -- raw convolution cores (dtype-preserving, shared by Tensor ops and oracles)


def conv2d_raw(x, kernel, pad=DEFAULT_PAD):
    """Same-size 2-D cross-correlation of [h,w,c_in] with [k,k,c_in,c_out].

    With circular padding this equals multiplication by the block-circulant
    operator matrix built from the kernel (see spectral.materialize_operator).
    """
    _check_pad(pad)
    K = kernel_array(kernel)
    k = K.shape[0]
    p = (k - 1) // 2
    if x.ndim != 3:
        raise TensorError(f"feature map must be [h,w,c], got shape {x.shape}")
    if x.shape[2] != K.shape[2]:
        raise TensorError(
            f"channel mismatch: input has {x.shape[2]} channels, kernel expects {K.shape[2]}"
        )
    if min(x.shape[0], x.shape[1]) < k:
        raise TensorError(f"spatial size {x.shape[:2]} smaller than kernel size {k}")
    if p:
        mode = "wrap" if pad == "circular" else "constant"
        x = np.pad(x, ((p, p), (p, p), (0, 0)), mode=mode)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(0, 1))
    return np.einsum("ijcab,abco->ijo", win, K, optimize=True)


def conv2d_kernel_grad_raw(x, grad_out, k, pad=DEFAULT_PAD):
    """Gradient of conv2d_raw w.r.t. the kernel: correlate input windows with grad."""
    _check_pad(pad)
    p = (k - 1) // 2
    if p:
        mode = "wrap" if pad == "circular" else "constant"
        x = np.pad(x, ((p, p), (p, p), (0, 0)), mode=mode)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(0, 1))
    return np.einsum("ijcab,ijo->abco", win, grad_out, optimize=True)


def adjoint_kernel(K):
    """Kernel realizing the adjoint operator: spatial flip + channel transpose."""
    return np.ascontiguousarray(K[::-1, ::-1].transpose(0, 1, 3, 2))


def conv2d_adjoint_raw(u, kernel, pad=DEFAULT_PAD):
    """Exact adjoint of conv2d_raw under the standard inner product."""
    return conv2d_raw(u, adjoint_kernel(kernel_array(kernel)), pad=pad)


# -- differentiable ops --------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad,
                 _parents=(a, b))

    def backprop(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _reduce_to_shape(g, a.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _reduce_to_shape(g, b.shape))

    out._backprop = backprop
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad,
                 _parents=(a, b))

    def backprop(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _reduce_to_shape(g * b.data, a.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _reduce_to_shape(g * a.data, b.shape))

    out._backprop = backprop
    return out


def div(a, b):
    """Elementwise a / b (b usually a traced scalar, e.g. a norm estimate)."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data / b.data, requires_grad=a.requires_grad or b.requires_grad,
                 _parents=(a, b))

    def backprop(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _reduce_to_shape(g / b.data, a.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _reduce_to_shape(-(g * a.data) / (b.data * b.data), b.shape))

    out._backprop = backprop
    return out


def scale(t, c):
    t = _as_tensor(t)
    c = float(c)
    out = Tensor(t.data * np.float32(c), requires_grad=t.requires_grad, _parents=(t,))

    def backprop(g):
        _accumulate(t, g * np.float32(c))

    out._backprop = backprop
    return out


def relu(t):
    t = _as_tensor(t)
    out = Tensor(np.maximum(t.data, 0), requires_grad=t.requires_grad, _parents=(t,))
    mask = t.data > 0

    def backprop(g):
        _accumulate(t, g * mask)

    out._backprop = backprop
    return out


def reshape(t, shape):
    t = _as_tensor(t)
    out = Tensor(t.data.reshape(shape), requires_grad=t.requires_grad, _parents=(t,))

    def backprop(g):
        _accumulate(t, g.reshape(t.shape))

    out._backprop = backprop
    return out


def sqrt(t):
    t = _as_tensor(t)
    out = Tensor(np.sqrt(t.data), requires_grad=t.requires_grad, _parents=(t,))

    def backprop(g):
        _accumulate(t, g / (2.0 * out.data))

    out._backprop = backprop
    return out


def concat_channels(parts):
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1),
                 requires_grad=any(p.requires_grad for p in parts),
                 _parents=tuple(parts))
    splits = np.cumsum([p.shape[-1] for p in parts])[:-1]

    def backprop(g):
        for p, gpart in zip(parts, np.split(g, splits, axis=-1)):
            if p.requires_grad or p._parents:
                _accumulate(p, gpart)

    out._backprop = backprop
    return out


def conv2d(x, kernel, pad=DEFAULT_PAD, bias=None, unchecked=False):
    """Same-size 2-D convolution of a feature map; differentiable in x and kernel.

    Rejects non-finite inputs unless ``unchecked`` is set (divergence probes
    opt in so NaN/Inf can propagate to where the harness observes them).
    """
    x = _as_tensor(x)
    kt = _kernel_tensor(kernel)
    if not unchecked and not np.isfinite(x.data).all():
        raise TensorError("non-finite values in conv2d input (pass unchecked=True to allow)")
    y = conv2d_raw(x.data, kt.data, pad=pad)
    if bias is not None:
        bias = _as_tensor(bias)
        y = y + bias.data
    parents = (x, kt) if bias is None else (x, kt, bias)
    out = Tensor(y, requires_grad=any(p.requires_grad for p in parents), _parents=parents)
    k = kt.data.shape[0]

    def backprop(g):
        g = g.astype(np.float32, copy=False)
        if x.requires_grad or x._parents:
            _accumulate(x, conv2d_raw(g, adjoint_kernel(kt.data), pad=pad))
        if kt.requires_grad or kt._parents:
            _accumulate(kt, conv2d_kernel_grad_raw(x.data, g, k, pad=pad))
        if bias is not None and (bias.requires_grad or bias._parents):
            _accumulate(bias, g.sum(axis=(0, 1)))

    out._backprop = backprop
    return out


def kernel_transpose(kernel):
    """Differentiable flip+transpose turning a kernel into its adjoint kernel."""
    kt = _kernel_tensor(kernel)
    out = Tensor(adjoint_kernel(kt.data), requires_grad=kt.requires_grad, _parents=(kt,))

    def backprop(g):
        _accumulate(kt, adjoint_kernel(g))

    out._backprop = backprop
    return out


def conv2d_adjoint(u, kernel, pad=DEFAULT_PAD, unchecked=False):
    """Adjoint convolution: <conv2d(v), u> == <v, conv2d_adjoint(u)> exactly."""
    return conv2d(u, kernel_transpose(kernel), pad=pad, unchecked=unchecked)


def inner(a, b):
    """Full inner product reduced to a 0-d tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise TensorError(f"inner product shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(np.float32((a.data.astype(np.float64) * b.data).sum()),
                 requires_grad=a.requires_grad or b.requires_grad, _parents=(a, b))

    def backprop(g):
        if a.requires_grad or a._parents:
            _accumulate(a, g * b.data)
        if b.requires_grad or b._parents:
            _accumulate(b, g * a.data)

    out._backprop = backprop
    return out


def l2_norm(t):
    """Euclidean norm of all entries, as a 0-d tensor."""
    t = _as_tensor(t)
    val = np.float32(np.linalg.norm(t.data.astype(np.float64)))
    out = Tensor(val, requires_grad=t.requires_grad, _parents=(t,))

    def backprop(g):
        if val > 0:
            _accumulate(t, g * (t.data / val))

    out._backprop = backprop
    return out


def mse(a, b):
    """Mean squared error over all entries."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise TensorError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data.astype(np.float64) - b.data
    out = Tensor(np.float32(np.mean(diff * diff)),
                 requires_grad=a.requires_grad or b.requires_grad, _parents=(a, b))
    n = a.size

    def backprop(g):
        d = (2.0 / n) * (a.data - b.data)
        if a.requires_grad or a._parents:
            _accumulate(a, g * d)
        if b.requires_grad or b._parents:
            _accumulate(b, -g * d)

    out._backprop = backprop
    return out


def l1_center_pixel(y):
    """|value| of the spatial-center pixel of channel 0 (index floor(n/2) per axis)."""
    y = _as_tensor(y)
    ci, cj = y.shape[0] // 2, y.shape[1] // 2
    val = y.data[ci, cj, 0]
    out = Tensor(np.float32(abs(val)), requires_grad=y.requires_grad, _parents=(y,))
    sign = np.float32(np.sign(val))

    def backprop(g):
        buf = np.zeros_like(y.data)
        buf[ci, cj, 0] = g * sign
        _accumulate(y, buf)

    out._backprop = backprop
    return out
