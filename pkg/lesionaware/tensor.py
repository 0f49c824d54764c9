"""Dense tensors with reverse-mode automatic differentiation.

Every network in lesionaware is composed from the primitives in this module. A `Tensor` wraps a
numpy array; when any input of a primitive requires gradients, the result remembers its parents
and a closure that maps the result's gradient to its parents' gradients. `Tensor.backward`
replays those closures in reverse topological order.

    >>> x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    >>> loss = (x * x).sum()
    >>> loss.backward()
    >>> x.grad.tolist()
    [[2.0, 4.0], [6.0, 8.0]]

Gradients accumulate into leaf buffers until `zero_grad()`:

    >>> (x * x).sum().backward()
    >>> x.grad.tolist()
    [[4.0, 8.0], [12.0, 16.0]]

Convolution is cross-correlation (no kernel flip):

    >>> image = Tensor(np.arange(1.0, 10.0).reshape(1, 1, 3, 3))
    >>> conv2d(image, Tensor(np.ones((1, 1, 2, 2)))).data.tolist()
    [[[[12.0, 16.0], [24.0, 28.0]]]]

Stored values are always finite; anything else is a `NumericError` raised by the primitive that
produced it.
"""
import logging
from contextlib import contextmanager
from threading import local

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import DimensionError, GraphError, NumericError, UsageError


__all__ = [
    'Tensor',
    'activate',
    'add',
    'as_tensor',
    'backward',
    'batch_norm',
    'channel_pool',
    'concat',
    'conv2d',
    'matmul',
    'mul',
    'no_grad',
    'numerical_grad',
    'pool2d',
    'relative_error',
    'resize_bilinear',
    'RunningStats',
    'topological_order',
]

log = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_grad_state = local()


def is_grad_enabled():
    return getattr(_grad_state, 'enabled', True)


@contextmanager
def no_grad():
    """Run primitives without recording them (inference, finite differences, pseudo-labels)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _check_finite(array, op):
    if not np.isfinite(array).all():
        raise NumericError(f'{op or "tensor"}: produced a non-finite value')


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if getattr(data, 'dtype', None) in _FLOAT_DTYPES else DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype)
        _check_finite(self.data, 'tensor')
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward = None
        self._op = ''
        self._retain = False

    @classmethod
    def _from_op(cls, data, parents, backward_fn, op):
        out = cls.__new__(cls)
        out.data = data
        _check_finite(data, op)
        tracked = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out.grad = None
        out._parents = tuple(parents) if tracked else ()
        out._backward = backward_fn if tracked else None
        out._op = op
        out._retain = False
        return out

    # ----------------------------------------------------------------------------------------------
    # Properties
    # ----------------------------------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    @property
    def T(self):
        if self.ndim != 2:
            raise DimensionError(f'transpose expects a 2-d tensor, got shape {self.shape}')
        return Tensor._from_op(self.data.T.copy(), (self,), lambda g: (g.T,), 'transpose')

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self.data.item()

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        grad_note = ', requires_grad=True' if self.requires_grad else ''
        return f'Tensor(shape={self.shape}, dtype={self.dtype}{grad_note})'

    def __len__(self):
        return self.shape[0]

    # ----------------------------------------------------------------------------------------------
    # Gradient bookkeeping
    # ----------------------------------------------------------------------------------------------
    def backward(self):
        backward(self)

    def zero_grad(self):
        if self.requires_grad and self.is_leaf:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad = None

    def retain_grad(self):
        """Keep the gradient of a non-leaf tensor after `backward` (Grad-CAM reads activations)."""
        self._retain = True
        return self

    def detach(self):
        return Tensor._from_op(self.data, (), None, 'detach')

    # ----------------------------------------------------------------------------------------------
    # Arithmetic
    # ----------------------------------------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), 'neg')

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data

        def backward_fn(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._from_op(a / b, (self, other), backward_fn, 'div')

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        source_shape = self.shape

        def backward_fn(g):
            full = np.zeros(source_shape, dtype=g.dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(np.array(self.data[index]), (self,), backward_fn, 'index')

    # ----------------------------------------------------------------------------------------------
    # Reductions and shape
    # ----------------------------------------------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        source_shape = self.shape

        def backward_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, source_shape),)

        return Tensor._from_op(
            np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward_fn, 'sum'
        )

    def mean(self, axis=None, keepdims=False):
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        source_shape = self.shape
        return Tensor._from_op(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(source_shape),), 'reshape'
        )

    # ----------------------------------------------------------------------------------------------
    # Elementwise functions
    # ----------------------------------------------------------------------------------------------
    def log(self):
        x = self.data
        if np.any(x <= 0):
            raise NumericError('log: input must be strictly positive')
        return Tensor._from_op(np.log(x), (self,), lambda g: (g / x,), 'log')

    def clip(self, low, high):
        x = self.data
        inside = (x >= low) & (x <= high)
        return Tensor._from_op(np.clip(x, low, high), (self,), lambda g: (g * inside,), 'clip')

    def relu(self):
        return activate(self, 'relu')

    def sigmoid(self):
        return activate(self, 'sigmoid')

    def softmax(self, axis=-1):
        return activate(self, 'softmax', axis=axis)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------------------------------
# Graph traversal
# --------------------------------------------------------------------------------------------------
def topological_order(root):
    """Tracked tensors reachable from `root`, every tensor after all of its parents.

    This list is the computation record replayed by `backward`.
    """
    order = []
    state = {}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 'done'
            order.append(node)
            continue
        if state.get(key) == 'done':
            continue
        if state.get(key) == 'visiting':
            raise GraphError(f'cycle through {node._op or "leaf"} in the computation record')
        state[key] = 'visiting'
        stack.append((node, True))
        for parent in node._parents:
            parent_state = state.get(id(parent))
            if parent_state == 'visiting':
                raise GraphError(f'cycle through {parent._op or "leaf"} in the computation record')
            if parent.requires_grad and parent_state is None:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(tensor) into `.grad` of every tracked leaf (and retained tensors)."""
    if loss.size != 1:
        raise UsageError(f'backward expects a scalar loss, got shape {loss.shape}')
    if not loss.requires_grad:
        return

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g
            continue
        if node._retain:
            node.grad = np.array(g) if node.grad is None else node.grad + g
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


# --------------------------------------------------------------------------------------------------
# Elementwise primitives
# --------------------------------------------------------------------------------------------------
def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a.dtype)
    b = as_tensor(b)
    return as_tensor(a, b.dtype), b


def add(a, b):
    a, b = _pair(a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward_fn, 'add')


def mul(a, b):
    a, b = _pair(a, b)
    x, y = a.data, b.data

    def backward_fn(g):
        return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

    return Tensor._from_op(x * y, (a, b), backward_fn, 'mul')


def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f'matmul: incompatible shapes {a.shape} and {b.shape}')
    x, y = a.data, b.data
    return Tensor._from_op(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g), 'matmul')


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError('concat: nothing to concatenate')
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f'concat: {exc}') from exc
    boundaries = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, boundaries, axis=axis))

    return Tensor._from_op(data, tensors, backward_fn, 'concat')


def activate(input, kind, axis=1):
    """Elementwise `relu` / `sigmoid`, or `softmax` along `axis`.

    >>> activate(Tensor([0.0]), 'sigmoid').data.tolist()
    [0.5]
    >>> activate(Tensor([-2.0, 3.0]), 'relu').data.tolist()
    [0.0, 3.0]
    """
    x = input.data
    if kind == 'relu':
        positive = x > 0
        return Tensor._from_op(np.where(positive, x, 0.0).astype(x.dtype), (input,), lambda g: (g * positive,), 'relu')

    if kind == 'sigmoid':
        s = expit(x)
        return Tensor._from_op(s, (input,), lambda g: (g * s * (1.0 - s),), 'sigmoid')

    if kind == 'softmax':
        if not -x.ndim <= axis < x.ndim:
            raise DimensionError(f'softmax: axis {axis} does not exist for shape {x.shape}')
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        s = e / e.sum(axis=axis, keepdims=True)

        def backward_fn(g):
            return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

        return Tensor._from_op(s, (input,), backward_fn, 'softmax')

    raise ValueError(f'Unknown activation {kind!r}')


# --------------------------------------------------------------------------------------------------
# Layer primitives
# --------------------------------------------------------------------------------------------------
def conv2d(input, weight, bias=None, stride=1, padding=0):
    """2-d cross-correlation of `[N, C_in, H, W]` with `[C_out, C_in, k, k]` plus per-channel bias."""
    if input.ndim != 4 or weight.ndim != 4:
        raise DimensionError(
            f'conv2d: expects 4-d input and weight, got {input.shape} and {weight.shape}'
        )
    n, c, h, w = input.shape
    c_out, c_in, k, k_w = weight.shape
    if k != k_w:
        raise DimensionError(f'conv2d: kernels must be square, got {k}x{k_w}')
    if c_in != c:
        raise DimensionError(f'conv2d: weight expects {c_in} input channels, input has {c}')
    if stride < 1 or padding < 0:
        raise DimensionError(f'conv2d: invalid stride {stride} / padding {padding}')
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(
            f'conv2d: kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}'
        )
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f'conv2d: bias shape {bias.shape} does not match {c_out} outputs')

    p, s = padding, stride
    x_padded = np.pad(input.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else input.data
    out_h = (h + 2 * p - k) // s + 1
    out_w = (w + 2 * p - k) // s + 1
    windows = sliding_window_view(x_padded, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    kernel = weight.data

    out = np.tensordot(windows, kernel, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        grad_weight = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_padded = np.zeros_like(x_padded)
        row_stop = s * (out_h - 1) + 1
        col_stop = s * (out_w - 1) + 1
        for i in range(k):
            for j in range(k):
                contribution = np.tensordot(g, kernel[:, :, i, j], axes=([1], [0]))
                grad_padded[:, :, i:i + row_stop:s, j:j + col_stop:s] += contribution.transpose(0, 3, 1, 2)
        grad_input = grad_padded[:, :, p:p + h, p:p + w] if p else grad_padded
        grads = (grad_input, grad_weight)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (input, weight) if bias is None else (input, weight, bias)
    return Tensor._from_op(out, parents, backward_fn, 'conv2d')


class RunningStats:
    """Exponential moving averages of per-channel mean and (unbiased) variance."""

    def __init__(self, channels, dtype=DEFAULT_DTYPE):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def update(self, mean, var, count, momentum):
        unbiased = var * (count / (count - 1)) if count > 1 else var
        self.mean = (1.0 - momentum) * self.mean + momentum * mean
        self.var = (1.0 - momentum) * self.var + momentum * unbiased


def batch_norm(input, gamma, beta, running_stats=None, training=True, eps=1e-5, momentum=0.1):
    """Per-channel normalization of `[N, C, H, W]` followed by `gamma * x_hat + beta`.

    Train mode normalizes with batch statistics (population variance) and updates
    `running_stats`; eval mode normalizes with `running_stats`.
    """
    if input.ndim != 4:
        raise DimensionError(f'batch_norm: expects a 4-d input, got {input.shape}')
    n, c, h, w = input.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f'batch_norm: gamma/beta must have shape ({c},)')
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f'batch_norm: momentum {momentum} outside [0, 1]')

    x = input.data
    axes = (0, 2, 3)
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if running_stats is not None:
            running_stats.update(mean, var, n * h * w, momentum)
    else:
        if running_stats is None:
            raise UsageError('batch_norm: eval mode needs running statistics')
        mean, var = running_stats.mean.astype(x.dtype), running_stats.var.astype(x.dtype)

    std = np.sqrt(var + eps)
    if np.any(std == 0):
        raise NumericError('batch_norm: zero variance with eps=0; eps must be > 0')
    std_b = std.reshape(1, -1, 1, 1)
    x_hat = (x - mean.reshape(1, -1, 1, 1)) / std_b
    g_scale = gamma.data.reshape(1, -1, 1, 1)
    out = g_scale * x_hat + beta.data.reshape(1, -1, 1, 1)

    def backward_fn(g):
        grad_gamma = (g * x_hat).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        d_x_hat = g * g_scale
        if training:
            grad_input = (
                d_x_hat
                - d_x_hat.mean(axis=axes, keepdims=True)
                - x_hat * (d_x_hat * x_hat).mean(axis=axes, keepdims=True)
            ) / std_b
        else:
            grad_input = d_x_hat / std_b
        return grad_input, grad_gamma, grad_beta

    return Tensor._from_op(out, (input, gamma, beta), backward_fn, 'batch_norm')


def pool2d(input, kind, window='global'):
    """Max or average pooling over non-overlapping windows, or the whole plane with `'global'`.

    >>> pool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 'avg').data.tolist()
    [[[[2.5]]]]
    """
    if input.ndim != 4:
        raise DimensionError(f'pool2d: expects a 4-d input, got {input.shape}')
    if kind not in ('max', 'avg'):
        raise ValueError(f'Unknown pooling kind {kind!r}')
    n, c, h, w = input.shape
    x = input.data

    if window == 'global':
        if kind == 'max':
            out = x.max(axis=(2, 3), keepdims=True)
            winners = x == out
            share = winners / winners.sum(axis=(2, 3), keepdims=True)
            return Tensor._from_op(out, (input,), lambda g: (g * share,), 'global_max_pool')

        # summed in sorted order so the result does not depend on pixel order
        out = np.sort(x.reshape(n, c, h * w), axis=-1).sum(axis=-1).reshape(n, c, 1, 1) / (h * w)
        return Tensor._from_op(
            out,
            (input,),
            lambda g: (np.broadcast_to(g / (h * w), x.shape),),
            'global_avg_pool',
        )

    k = int(window)
    if k < 1 or k > h or k > w:
        raise DimensionError(f'pool2d: window {k} does not fit a {h}x{w} input')
    if h % k or w % k:
        raise DimensionError(f'pool2d: window {k} does not divide {h}x{w}')
    blocks = x.reshape(n, c, h // k, k, w // k, k)

    if kind == 'max':
        out = blocks.max(axis=(3, 5))
        winners = blocks == out[:, :, :, None, :, None]
        share = winners / winners.sum(axis=(3, 5), keepdims=True)

        def backward_fn(g):
            return ((share * g[:, :, :, None, :, None]).reshape(x.shape),)

        return Tensor._from_op(out, (input,), backward_fn, 'max_pool')

    out = blocks.mean(axis=(3, 5))

    def backward_fn(g):
        spread = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), blocks.shape)
        return (spread.reshape(x.shape),)

    return Tensor._from_op(out, (input,), backward_fn, 'avg_pool')


def channel_pool(input, kind):
    """Per-pixel max or mean over the channel axis, `[N, C, H, W] -> [N, 1, H, W]`."""
    if input.ndim != 4 or input.shape[1] < 1:
        raise DimensionError(f'channel_pool: expects [N, C>=1, H, W], got {input.shape}')
    x = input.data
    if kind == 'max':
        out = x.max(axis=1, keepdims=True)
        winners = x == out
        share = winners / winners.sum(axis=1, keepdims=True)
        return Tensor._from_op(out, (input,), lambda g: (g * share,), 'channel_max_pool')
    if kind == 'avg':
        c = x.shape[1]
        out = np.sort(x, axis=1).sum(axis=1, keepdims=True) / c
        return Tensor._from_op(
            out, (input,), lambda g: (np.broadcast_to(g / c, x.shape),), 'channel_avg_pool'
        )
    raise ValueError(f'Unknown pooling kind {kind!r}')


def _interpolation_matrix(size_in, size_out, dtype):
    # corner-aligned: output index j samples input coordinate j * (in - 1) / (out - 1)
    matrix = np.zeros((size_out, size_in), dtype=np.float64)
    if size_out == 1 or size_in == 1:
        source = np.zeros(size_out)
    else:
        source = np.arange(size_out) * (size_in - 1) / (size_out - 1)
    low = np.minimum(np.floor(source).astype(int), size_in - 1)
    high = np.minimum(low + 1, size_in - 1)
    fraction = source - low
    rows = np.arange(size_out)
    np.add.at(matrix, (rows, low), 1.0 - fraction)
    np.add.at(matrix, (rows, high), fraction)
    return matrix.astype(dtype)


def resize_bilinear(input, out_h, out_w):
    """Corner-aligned bilinear resize of the two trailing axes.

    >>> resize_bilinear(Tensor([[[[0.0, 1.0], [2.0, 3.0]]]]), 3, 3).data[0, 0, 1].tolist()
    [1.0, 1.5, 2.0]
    """
    if input.ndim != 4:
        raise DimensionError(f'resize_bilinear: expects a 4-d input, got {input.shape}')
    if out_h < 1 or out_w < 1:
        raise DimensionError(f'resize_bilinear: invalid output size {out_h}x{out_w}')
    h, w = input.shape[2:]
    if (h, w) == (out_h, out_w):
        return Tensor._from_op(input.data.copy(), (input,), lambda g: (g,), 'resize_bilinear')

    rows = _interpolation_matrix(h, out_h, input.dtype)
    cols = _interpolation_matrix(w, out_w, input.dtype)
    out = np.matmul(np.matmul(rows, input.data), cols.T)
    return Tensor._from_op(
        out, (input,), lambda g: (np.matmul(np.matmul(rows.T, g), cols),), 'resize_bilinear'
    )


# --------------------------------------------------------------------------------------------------
# Verification helpers
# --------------------------------------------------------------------------------------------------
def numerical_grad(fn, tensor, step=1e-6):
    """Central finite-difference gradient of scalar `fn()` with respect to `tensor.data`."""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            upper = float(fn().data)
            flat[i] = original - step
            lower = float(fn().data)
            flat[i] = original
            grad.reshape(-1)[i] = (upper - lower) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    """`||a - n|| / max(||a||, ||n||)`, zero when both gradients vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)
