# Copyright 2023 NUMSnet Contributors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""The image operations the five Unet-family architectures are built from.

All image tensors are laid out (batch, channel, height, width). Every op
returns a new Tensor and, when an input requires gradients, records the
backward rule on the tape.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from tensor_engine.errors import ShapeError
from tensor_engine.tensor import OpKind, Tensor, note_branch

AXIS_NAMES = ('batch', 'channel', 'height', 'width')


def _require_rank(tensor, rank, what):
    if tensor.ndim != rank:
        raise ShapeError('rank', '%s must have %d axes, got shape %s' % (what, rank, list(tensor.shape)))


def _same_padding(kernel):
    # an odd kernel pads (k-1)/2 on both sides; an even one puts the extra
    # row on the far side
    before = (kernel - 1) // 2
    return before, kernel - 1 - before


def conv2d(x, weight, bias=None, padding='same', stride=1):
    """2-D cross-correlation (no kernel flip).

    x: [N, Cin, H, W]; weight: [Cout, Cin, kh, kw]; bias: [Cout] or None.
    'same' padding keeps H and W at stride 1; 'valid' adds no padding.
    """
    _require_rank(x, 4, 'conv2d input')
    _require_rank(weight, 4, 'conv2d weight')
    n, cin, height, width = x.shape
    cout, weight_cin, kh, kw = weight.shape

    if weight_cin != cin:
        raise ShapeError('channel', 'input has %d channels, weight expects %d' % (cin, weight_cin))
    if bias is not None and bias.shape != (cout,):
        raise ShapeError('channel', 'bias shape %s does not match %d filters' % (list(bias.shape), cout))
    if stride < 1:
        raise ShapeError('stride', 'stride must be positive, got %d' % stride)

    if padding == 'same':
        top, bottom = _same_padding(kh)
        left, right = _same_padding(kw)
    elif padding == 'valid':
        top = bottom = left = right = 0
    else:
        raise ValueError('padding must be "same" or "valid", got %r' % (padding,))

    padded = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    if kh > padded.shape[2]:
        raise ShapeError('height', 'kernel height %d exceeds padded input height %d' % (kh, padded.shape[2]))
    if kw > padded.shape[3]:
        raise ShapeError('width', 'kernel width %d exceeds padded input width %d' % (kw, padded.shape[3]))

    out_h = (padded.shape[2] - kh) // stride + 1
    out_w = (padded.shape[3] - kw) // stride + 1

    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]

    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward(g):
        grad_weight = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_bias = g.sum(axis=(0, 2, 3)) if bias is not None else None

        grad_padded = np.zeros_like(padded)
        for a in range(kh):
            for b in range(kw):
                contribution = np.tensordot(g, weight.data[:, :, a, b], axes=([1], [0]))
                grad_padded[:, :, a:a + stride * out_h:stride, b:b + stride * out_w:stride] += \
                    contribution.transpose(0, 3, 1, 2)
        grad_x = grad_padded[:, :, top:top + height, left:left + width]

        return grad_x, grad_weight, grad_bias

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, OpKind.CONV2D, inputs, backward,
                           {'padding': (top, bottom, left, right), 'stride': stride})


def conv_transpose2d(x, weight, bias=None, stride=2):
    """Transposed convolution with kernel == stride (non-overlapping taps).

    x: [N, Cin, H, W]; weight: [Cin, Cout, k, k]; output [N, Cout, kH, kW].
    With the same weight array this is the adjoint of conv2d(stride=k,
    padding='valid').
    """
    _require_rank(x, 4, 'conv_transpose2d input')
    _require_rank(weight, 4, 'conv_transpose2d weight')
    n, cin, height, width = x.shape
    weight_cin, cout, kh, kw = weight.shape

    if weight_cin != cin:
        raise ShapeError('channel', 'input has %d channels, weight expects %d' % (cin, weight_cin))
    if (kh, kw) != (stride, stride):
        raise ShapeError('kernel', 'kernel %dx%d must equal the stride %d' % (kh, kw, stride))
    if bias is not None and bias.shape != (cout,):
        raise ShapeError('channel', 'bias shape %s does not match %d filters' % (list(bias.shape), cout))

    # [N, H, W, Cout, kh, kw] -> [N, Cout, H, kh, W, kw] -> interleave
    taps = np.tensordot(x.data, weight.data, axes=([1], [0]))
    out = taps.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, height * kh, width * kw)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward(g):
        blocks = g.reshape(n, cout, height, kh, width, kw)
        grad_x = np.tensordot(blocks, weight.data, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        grad_weight = np.tensordot(x.data, blocks, axes=([0, 2, 3], [0, 2, 4]))
        grad_bias = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return grad_x, grad_weight, grad_bias

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, OpKind.CONV_TRANSPOSE2D, inputs, backward, {'stride': stride})


def maxpool2d(x, size=2):
    """Max-pool with a size x size window and equal stride.

    Extents must divide evenly; the gradient goes to the first maximum of
    each window in row-major order.
    """
    _require_rank(x, 4, 'maxpool2d input')
    n, c, height, width = x.shape
    if height % size:
        raise ShapeError('height', 'extent %d is not divisible by the pool size %d' % (height, size))
    if width % size:
        raise ShapeError('width', 'extent %d is not divisible by the pool size %d' % (width, size))

    out_h, out_w = height // size, width // size
    windows = x.data.reshape(n, c, out_h, size, out_w, size).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, out_h, out_w, size * size)

    argmax = windows.argmax(axis=-1)
    note_branch(np.equal(windows, windows.max(axis=-1, keepdims=True)))
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros((n, c, out_h, out_w, size * size), dtype=g.dtype)
        np.put_along_axis(routed, argmax[..., None], g[..., None], axis=-1)
        routed = routed.reshape(n, c, out_h, out_w, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(n, c, height, width),)

    return Tensor._from_op(np.ascontiguousarray(out), OpKind.MAXPOOL2D, (x,), backward, {'argmax': argmax})


def concat_channels(*tensors):
    """Concatenate along the channel axis (axis 1)."""
    if not tensors:
        raise ShapeError('channel', 'nothing to concatenate')

    first = tensors[0]
    for other in tensors[1:]:
        if other.ndim != first.ndim:
            raise ShapeError('rank', 'cannot concatenate shapes %s and %s' % (list(first.shape), list(other.shape)))
        for axis in range(first.ndim):
            if axis != 1 and other.shape[axis] != first.shape[axis]:
                name = AXIS_NAMES[axis] if axis < len(AXIS_NAMES) else 'axis %d' % axis
                raise ShapeError(name, 'cannot concatenate shapes %s and %s' % (
                    list(first.shape), list(other.shape)))

    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    out = np.concatenate([t.data for t in tensors], axis=1)
    return Tensor._from_op(out, OpKind.CONCAT, tensors, backward)


def slice_channels(x, start, stop):
    """Channels [start, stop) of x; the inverse of concat_channels."""
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError('channel', 'range [%d, %d) outside %d channels' % (start, stop, x.shape[1]))
    shape = x.shape

    def backward(g):
        grad = np.zeros(shape, dtype=g.dtype)
        grad[:, start:stop] = g
        return (grad,)

    return Tensor._from_op(x.data[:, start:stop].copy(), OpKind.SLICE, (x,), backward)


def relu(x):
    active = x.data > 0
    note_branch(active)

    def backward(g):
        return (g * active,)

    return Tensor._from_op(x.data * active, OpKind.RELU, (x,), backward)


def sigmoid(x):
    out = expit(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, OpKind.SIGMOID, (x,), backward)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.99, eps=1e-3):
    """Per-channel batch normalisation.

    In training mode the batch statistics normalise the input and the
    running statistics move towards them:
    running = momentum * running + (1 - momentum) * batch. In inference
    mode the running statistics are used as-is.
    """
    _require_rank(x, 4, 'batchnorm2d input')
    if eps <= 0:
        raise ValueError('eps must be positive, got %r' % (eps,))
    channels = x.shape[1]
    for name, stat in (('gamma', gamma), ('beta', beta), ('running_mean', running_mean),
                       ('running_var', running_var)):
        if stat.shape != (channels,):
            raise ShapeError('channel', '%s has shape %s, input has %d channels' % (
                name, list(stat.shape), channels))

    axes = (0, 2, 3)
    scale = gamma.data[None, :, None, None]

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean.data[...] = momentum * running_mean.data + (1.0 - momentum) * mean
        running_var.data[...] = momentum * running_var.data + (1.0 - momentum) * var
    else:
        mean = running_mean.data
        var = running_var.data

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    normalized = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = scale * normalized + beta.data[None, :, None, None]

    def backward(g):
        grad_gamma = (g * normalized).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        grad_normalized = g * scale

        if training:
            count = x.data.size // channels
            grad_x = (inv_std[None, :, None, None] / count) * (
                count * grad_normalized
                - grad_normalized.sum(axis=axes, keepdims=True)
                - normalized * (grad_normalized * normalized).sum(axis=axes, keepdims=True))
        else:
            grad_x = grad_normalized * inv_std[None, :, None, None]

        return grad_x, grad_gamma, grad_beta

    return Tensor._from_op(out.astype(x.dtype), OpKind.BATCHNORM2D, (x, gamma, beta), backward,
                           {'mean': mean, 'inv_std': inv_std, 'training': training})


def dropout(x, rate, training, stream):
    """Inverted dropout: survivors are scaled by 1 / (1 - rate) at train
    time so inference is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError('dropout rate must be in [0, 1), got %r' % (rate,))
    if not training or rate == 0.0:
        return x

    keep = stream.random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep * scale

    def backward(g):
        return (g * mask,)

    return Tensor._from_op((x.data * mask).astype(x.dtype), OpKind.DROPOUT, (x,), backward, {'mask': keep})


def upsample_nearest(x, factor):
    """Repeat every pixel factor x factor times."""
    _require_rank(x, 4, 'upsample input')
    if factor == 1:
        return x
    n, c, height, width = x.shape

    def backward(g):
        return (g.reshape(n, c, height, factor, width, factor).sum(axis=(3, 5)),)

    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return Tensor._from_op(out, OpKind.UPSAMPLE, (x,), backward)
