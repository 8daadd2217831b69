"""
Dense float64 tensors with reverse-mode differentiation.

Operations are plain functions over :class:`Tensor`. When a
:class:`GradTape` is active on the current thread and an input requires
a gradient, the operation records its output, its inputs and a backward
closure on the tape; :meth:`GradTape.gradient` replays the records in
reverse order. Outside a tape nothing is recorded.

Elementwise operations require equal shapes; :func:`broadcast_to` is the
only broadcasting operation.
"""

import logging
import threading

import numpy as np
from scipy.special import expit

from slotgate.constants import (
    L2_NORMALIZE_EPSILON,
    COSINE_DEGENERATE_NORM,
    BCE_CLAMP,
)
from slotgate.exceptions import ShapeError, NonFiniteError


LOGGER = logging.getLogger(__name__)

EXP_CLAMP_LOW = -745.0
EXP_CLAMP_HIGH = 709.0
LOG_CLAMP = 1e-300
LAYER_NORM_EPSILON = 1e-5

_local = threading.local()


# ————————————————————————————————————————————————————————————————— Classes


class Tensor:
    ''' A float64 array, optionally tracked for differentiation.

        :param check: verify all entries are finite (the default);
            a NaN or Inf raises :class:`NonFiniteError`.
    '''

    __slots__ = ('data', 'requires_grad')

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, check=True):

        data = np.asarray(data, dtype=np.float64)

        if check and not np.isfinite(data).all():
            raise NonFiniteError('tensor of shape {0} holds NaN or '
                                 'Inf values.'.format(data.shape))

        self.data = data
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):

        if self.data.size != 1:
            raise ShapeError('item() on a tensor of shape {0}.'.format(
                self.data.shape))

        return float(self.data.reshape(-1)[0])

    def detach(self):
        ''' Same values, cut from any tape. '''

        return Tensor(self.data, check=False)

    def __repr__(self):
        return 'Tensor(shape={0}, requires_grad={1})'.format(
            self.data.shape, self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):

        if isinstance(other, (int, float)):
            return scale(self, other)

        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    ''' Ordered record of the primitive operations run while active.

        Usage::

            with GradTape() as tape:
                loss = f(params)

            grads = tape.gradient(loss, params)

        Tapes are per-thread; a tape nested in another only records the
        operations run while it is the innermost one.
    '''

    def __init__(self):

        self.records = []

    def __enter__(self):

        stack = getattr(_local, 'tapes', None)

        if stack is None:
            stack = _local.tapes = []

        stack.append(self)

        return self

    def __exit__(self, exc_type, exc_val, exc_tb):

        _local.tapes.pop()

        return False

    def __len__(self):
        return len(self.records)

    def record(self, output, inputs, backward):

        self.records.append((output, inputs, backward))

    def gradient(self, target, sources):
        ''' Gradients of scalar :param:`target` with respect to each of
            :param:`sources`, as numpy arrays in the same order. Sources
            the target does not depend on get zeros. '''

        if target.size != 1:
            raise ShapeError('gradient target must be a scalar, got '
                             'shape {0}.'.format(target.shape))

        grads = {id(target): np.ones_like(target.data)}

        for output, inputs, backward in reversed(self.records):
            grad = grads.get(id(output))

            if grad is None:
                continue

            for tensor, input_grad in zip(inputs, backward(grad)):
                if input_grad is None or not tensor.requires_grad:
                    continue

                key = id(tensor)

                if key in grads:
                    grads[key] = grads[key] + input_grad

                else:
                    grads[key] = input_grad

        return [
            np.array(grads[id(source)], dtype=np.float64)
            if id(source) in grads else np.zeros_like(source.data)
            for source in sources
        ]


# ——————————————————————————————————————————————————————————————— Internals


def active_tape():

    stack = getattr(_local, 'tapes', None)

    return stack[-1] if stack else None


def as_tensor(value):

    if isinstance(value, Tensor):
        return value

    return Tensor(value)


def _result(data, inputs, backward):

    tape = active_tape()

    needs_grad = tape is not None and any(
        tensor.requires_grad for tensor in inputs)

    output = Tensor(data, requires_grad=needs_grad)

    if needs_grad:
        tape.record(output, inputs, backward)

    return output


def _check_same_shape(name, a, b):

    if a.shape != b.shape:
        raise ShapeError('{0}: shapes {1} and {2} differ.'.format(
            name, a.shape, b.shape))


def _unbroadcast(grad, shape):
    ''' Sum :param:`grad` back down to :param:`shape`. '''

    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)

    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)

    return grad


def _expand_reduced(grad, shape, axis, keepdims):
    ''' Broadcast a reduction gradient back to the input shape. '''

    if axis is not None and not keepdims:
        grad = np.expand_dims(grad, axis)

    return np.broadcast_to(grad, shape)


# —————————————————————————————————————————————————————————————— Creation


def tensor(data, requires_grad=False):

    return Tensor(np.array(data, dtype=np.float64),
                  requires_grad=requires_grad)


def zeros(shape, requires_grad=False):

    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False):

    return Tensor(np.ones(shape), requires_grad=requires_grad)


# ——————————————————————————————————————————————————————————— Elementwise


def add(a, b):

    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape('add', a, b)

    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):

    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape('sub', a, b)

    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):

    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape('mul', a, b)

    return _result(a.data * b.data, (a, b),
                   lambda g: (g * b.data, g * a.data))


def div(a, b):

    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape('div', a, b)

    return _result(a.data / b.data, (a, b),
                   lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def scale(a, factor):

    a = as_tensor(a)
    factor = float(factor)

    return _result(a.data * factor, (a, ), lambda g: (g * factor, ))


def shift(a, offset):

    a = as_tensor(a)

    return _result(a.data + float(offset), (a, ), lambda g: (g, ))


def broadcast_to(a, shape):
    ''' Explicit numpy-style broadcast; the only broadcasting op. '''

    a = as_tensor(a)
    shape = tuple(shape)

    try:
        data = np.broadcast_to(a.data, shape)

    except ValueError:
        raise ShapeError('cannot broadcast shape {0} to {1}.'.format(
            a.shape, shape))

    return _result(np.array(data), (a, ),
                   lambda g: (_unbroadcast(g, a.shape), ))


def exp(a):
    ''' Exponential; the input is clamped to the float64 range. '''

    a = as_tensor(a)
    inside = (a.data >= EXP_CLAMP_LOW) & (a.data <= EXP_CLAMP_HIGH)
    data = np.exp(np.clip(a.data, EXP_CLAMP_LOW, EXP_CLAMP_HIGH))

    return _result(data, (a, ), lambda g: (g * data * inside, ))


def log(a, eps=LOG_CLAMP):
    ''' Natural log of `max(a, eps)`; no gradient where clamped. '''

    a = as_tensor(a)
    inside = a.data >= eps
    clamped = np.maximum(a.data, eps)

    return _result(np.log(clamped), (a, ),
                   lambda g: (np.where(inside, g / clamped, 0.0), ))


def sigmoid(a):

    a = as_tensor(a)
    data = expit(a.data)

    return _result(data, (a, ), lambda g: (g * data * (1.0 - data), ))


def tanh(a):

    a = as_tensor(a)
    data = np.tanh(a.data)

    return _result(data, (a, ), lambda g: (g * (1.0 - data * data), ))


def silu(a):

    a = as_tensor(a)
    gate = expit(a.data)

    def backward(g):
        return (g * (gate + a.data * gate * (1.0 - gate)), )

    return _result(a.data * gate, (a, ), backward)


# —————————————————————————————————————————————————————————————— Reductions


def sum(a, axis=None, keepdims=False):

    a = as_tensor(a)

    return _result(
        a.data.sum(axis=axis, keepdims=keepdims), (a, ),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims), ))


def mean(a, axis=None, keepdims=False):

    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]

    return _result(
        a.data.mean(axis=axis, keepdims=keepdims), (a, ),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count, ))


def _extremum(a, axis, keepdims, pick):

    a = as_tensor(a)

    if axis is None:
        flat = a.data.reshape(-1)
        index = pick(flat)
        mask = np.zeros(flat.shape)
        mask[index] = 1.0
        mask = mask.reshape(a.shape)
        data = flat[index]

        return _result(np.array(data), (a, ), lambda g: (g * mask, ))

    index = np.expand_dims(pick(a.data, axis=axis), axis)
    mask = np.zeros(a.shape)
    np.put_along_axis(mask, index, 1.0, axis=axis)
    data = np.take_along_axis(a.data, index, axis=axis)

    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) * mask, )

    return _result(data, (a, ), backward)


def max(a, axis=None, keepdims=False):
    ''' Maximum; the gradient goes to the first maximal entry. '''

    return _extremum(a, axis, keepdims, np.argmax)


def min(a, axis=None, keepdims=False):
    ''' Minimum; the gradient goes to the first minimal entry. '''

    return _extremum(a, axis, keepdims, np.argmin)


# ————————————————————————————————————————————————————————————————— Shapes


def reshape(a, shape):

    a = as_tensor(a)

    try:
        data = a.data.reshape(shape)

    except ValueError:
        raise ShapeError('cannot reshape {0} to {1}.'.format(a.shape, shape))

    return _result(data, (a, ), lambda g: (g.reshape(a.shape), ))


def transpose(a, axes=None):
    ''' Permute axes; by default swap the last two. '''

    a = as_tensor(a)

    if axes is None:
        if a.ndim < 2:
            raise ShapeError('transpose needs at least 2 dimensions.')

        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]

    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    return _result(np.transpose(a.data, axes), (a, ),
                   lambda g: (np.transpose(g, inverse), ))


def concat(tensors, axis=0):

    tensors = [as_tensor(t) for t in tensors]

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)

    except ValueError as e:
        raise ShapeError('concat: {0}'.format(e))

    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    return _result(data, tuple(tensors),
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors, axis=0):

    tensors = [as_tensor(t) for t in tensors]

    return concat([reshape(t, t.shape[:axis] + (1, ) + t.shape[axis:])
                   for t in tensors], axis=axis)


def take(a, index, axis=0):
    ''' Gather entries along :param:`axis` with an integer index array;
        repeated indices accumulate their gradients. '''

    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    if index.size and (index.max() >= a.shape[axis] or index.min() < 0):
        raise ShapeError('take: index out of range for axis of size '
                         '{0}.'.format(a.shape[axis]))

    def backward(g):
        grad = np.zeros(a.shape)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (grad, )

    return _result(np.take(a.data, index, axis=axis), (a, ), backward)


def take_rows(a, index):

    return take(a, index, axis=0)


def slice_(a, key):
    ''' Basic (non-fancy) slicing. '''

    a = as_tensor(a)

    def backward(g):
        grad = np.zeros(a.shape)
        grad[key] = g
        return (grad, )

    return _result(np.array(a.data[key]), (a, ), backward)


# ——————————————————————————————————————————————————————————— Linear algebra


def matmul(a, b):
    ''' Matrix product over the last two axes. Supported: 2D·2D,
        ND·2D (shared right factor) and ND·ND with equal leading axes. '''

    a, b = as_tensor(a), as_tensor(b)

    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError('matmul: incompatible shapes {0} and {1}.'.format(
            a.shape, b.shape))

    if b.ndim == 2:
        def backward(g):
            grad_b = (a.data.reshape(-1, a.shape[-1]).T
                      @ g.reshape(-1, g.shape[-1]))
            return (g @ b.data.T, grad_b)

    elif a.shape[:-2] == b.shape[:-2]:
        def backward(g):
            return (g @ np.swapaxes(b.data, -1, -2),
                    np.swapaxes(a.data, -1, -2) @ g)

    else:
        raise ShapeError('matmul: leading axes {0} and {1} differ.'.format(
            a.shape[:-2], b.shape[:-2]))

    return _result(a.data @ b.data, (a, b), backward)


def softmax(a, axis=-1):
    ''' Max-subtracted softmax. '''

    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (data * (g - (g * data).sum(axis=axis, keepdims=True)), )

    return _result(data, (a, ), backward)


def log_softmax(a, axis=-1):

    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - log_norm
    probs = np.exp(data)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True), )

    return _result(data, (a, ), backward)


def l2_normalize(a, axis=-1, eps=L2_NORMALIZE_EPSILON):
    ''' `a / (‖a‖ + eps)` along :param:`axis`; zero vectors stay zero. '''

    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    denominator = norm + eps
    data = a.data / denominator

    def backward(g):
        projection = (g * a.data).sum(axis=axis, keepdims=True)
        safe_norm = np.where(norm > 0, norm, 1.0)
        correction = np.where(
            norm > 0,
            a.data * projection / (denominator * denominator * safe_norm),
            0.0)
        return (g / denominator - correction, )

    return _result(data, (a, ), backward)


def cosine_sim(u, v):
    ''' Cosine similarity of two equal-length vectors, as a scalar tensor.
        Defined as 0 when either norm is below 1e-12. '''

    u, v = as_tensor(u), as_tensor(v)

    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError('cosine_sim needs equal-length vectors, got {0} '
                         'and {1}.'.format(u.shape, v.shape))

    norm_u = np.sqrt(u.data @ u.data)
    norm_v = np.sqrt(v.data @ v.data)

    if norm_u < COSINE_DEGENERATE_NORM or norm_v < COSINE_DEGENERATE_NORM:
        return _result(np.array(0.0), (u, v),
                       lambda g: (np.zeros(u.shape), np.zeros(v.shape)))

    value = np.clip((u.data @ v.data) / (norm_u * norm_v), -1.0, 1.0)

    def backward(g):
        grad_u = v.data / (norm_u * norm_v) - value * u.data / norm_u ** 2
        grad_v = u.data / (norm_u * norm_v) - value * v.data / norm_v ** 2
        return (g * grad_u, g * grad_v)

    return _result(np.array(value), (u, v), backward)


def cosine_rows(rows, v):
    ''' Cosine of every row of a (T, d) tensor against a length-d vector;
        degenerate rows score 0. '''

    rows, v = as_tensor(rows), as_tensor(v)

    if rows.ndim != 2 or v.ndim != 1 or rows.shape[1] != v.shape[0]:
        raise ShapeError('cosine_rows: shapes {0} and {1}.'.format(
            rows.shape, v.shape))

    norm_rows = np.sqrt((rows.data * rows.data).sum(axis=1))
    norm_v = np.sqrt(v.data @ v.data)
    valid = (norm_rows >= COSINE_DEGENERATE_NORM) & (
        norm_v >= COSINE_DEGENERATE_NORM)

    safe_rows = np.where(valid, norm_rows, 1.0)
    safe_v = norm_v if norm_v >= COSINE_DEGENERATE_NORM else 1.0

    values = np.where(
        valid, (rows.data @ v.data) / (safe_rows * safe_v), 0.0)
    values = np.clip(values, -1.0, 1.0)

    def backward(g):
        weight = np.where(valid, g, 0.0)[:, None]
        grad_rows = weight * (
            v.data[None, :] / (safe_rows * safe_v)[:, None]
            - values[:, None] * rows.data / (safe_rows ** 2)[:, None])
        grad_v = (weight * (
            rows.data / (safe_rows * safe_v)[:, None]
            - values[:, None] * v.data[None, :] / safe_v ** 2)).sum(axis=0)
        return (grad_rows, grad_v)

    return _result(values, (rows, v), backward)


def layer_norm(a, gain, bias, eps=LAYER_NORM_EPSILON):
    ''' Normalization over the last axis, then affine `gain`, `bias`. '''

    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)

    if gain.shape != (a.shape[-1], ) or bias.shape != gain.shape:
        raise ShapeError('layer_norm: gain/bias must have shape '
                         '({0},).'.format(a.shape[-1]))

    centered = a.data - a.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(
        (centered * centered).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std

    def backward(g):
        g_normed = g * gain.data
        grad_a = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, g.shape[-1])
        grad_gain = (flat_g * normed.reshape(flat_g.shape)).sum(axis=0)
        return (grad_a, grad_gain, flat_g.sum(axis=0))

    return _result(normed * gain.data + bias.data, (a, gain, bias), backward)


# ———————————————————————————————————————————————————————————————— Losses


def binary_cross_entropy(pred, target, eps=BCE_CLAMP):
    ''' Mean BCE of probabilities :param:`pred` against a constant
        :param:`target` array of the same shape. Predictions are clamped
        to [eps, 1 − eps]; clamped entries get no gradient. '''

    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)

    if target.shape != pred.shape:
        raise ShapeError('binary_cross_entropy: shapes {0} and {1}.'.format(
            pred.shape, target.shape))

    clipped = np.clip(pred.data, eps, 1.0 - eps)
    inside = (pred.data >= eps) & (pred.data <= 1.0 - eps)
    count = pred.size

    data = -np.mean(target * np.log(clipped)
                    + (1.0 - target) * np.log(1.0 - clipped))

    def backward(g):
        grad = (clipped - target) / (clipped * (1.0 - clipped)) / count
        return (g * grad * inside, )

    return _result(np.array(data), (pred, ), backward)


def cross_entropy(logits, targets):
    ''' Mean negative log-likelihood of integer :param:`targets` under
        row-wise softmax of (M, V) :param:`logits`. '''

    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)

    if logits.ndim != 2 or targets.shape != (logits.shape[0], ):
        raise ShapeError('cross_entropy: logits {0}, targets {1}.'.format(
            logits.shape, targets.shape))

    if targets.size == 0:
        raise ShapeError('cross_entropy: no targets.')

    rows = np.arange(targets.size)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    data = -log_probs[rows, targets].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return (g * grad / targets.size, )

    return _result(np.array(data), (logits, ), backward)


# ——————————————————————————————————————————————————————————— Gradient check


def evaluate_scalar(func, x):
    ''' Run :param:`func` on :param:`x` outside any tape. '''

    try:
        value = func(x)

    except NonFiniteError:
        raise NonFiniteError('function output is not finite.')

    value = value.item() if isinstance(value, Tensor) else float(value)

    if not np.isfinite(value):
        raise NonFiniteError('function output is not finite.')

    return value


def finite_difference(func, x, step=1e-4):
    ''' Central differences `(f(x+h) − f(x−h)) / 2h`, one coordinate at a
        time. :param:`x` is perturbed in place and restored. '''

    numeric = np.zeros(x.shape)
    flat_x = x.data.reshape(-1)
    flat_numeric = numeric.reshape(-1)

    for index in range(flat_x.size):
        original = flat_x[index]

        flat_x[index] = original + step
        plus = evaluate_scalar(func, x)

        flat_x[index] = original - step
        minus = evaluate_scalar(func, x)

        flat_x[index] = original
        flat_numeric[index] = (plus - minus) / (2.0 * step)

    return numeric


def analytic_gradient(func, x):

    with GradTape() as tape:
        value = func(x)

    if not isinstance(value, Tensor) or value.size != 1:
        raise ShapeError('grad_check needs a scalar tensor function.')

    if not np.isfinite(value.data).all():
        raise NonFiniteError('function output is not finite.')

    return tape.gradient(value, [x])[0]


def grad_check(func, x, step=1e-4):
    ''' Compare the tape gradient of scalar :param:`func` at :param:`x`
        with central differences.

        :returns: the maximum relative error, each coordinate's
            denominator being `max(|analytic|, |numeric|, 1e-8)`.
    '''

    values = x.data if isinstance(x, Tensor) else x
    x = Tensor(np.array(values, dtype=np.float64, copy=True),
               requires_grad=True)

    analytic = analytic_gradient(func, x)
    numeric = finite_difference(func, x, step=step)

    denominator = np.maximum(
        np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    error = float(np.max(np.abs(analytic - numeric) / denominator))

    LOGGER.debug('grad_check over {0} coordinates: max relative error '
                 '{1:.3e}.'.format(x.size, error))

    return error
