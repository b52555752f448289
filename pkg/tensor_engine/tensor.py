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

"""Dense tensors with a reverse-mode autodiff tape.

A Tensor wraps a numpy array. Operations on tensors that require gradients
record a TapeNode holding the inputs and whatever the backward rule needs;
backward() walks those nodes in reverse topological order and accumulates
gradients into the leaf tensors.
"""

import contextlib
import enum
import threading

import numpy as np

from tensor_engine.errors import DTypeError, GraphError, ShapeError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# training runs in float32; verification oracles pass float64 explicitly
DEFAULT_DTYPE = np.dtype(np.float32)

_tape = threading.local()


class OpKind(enum.Enum):
    ADD = 'add'
    SUB = 'sub'
    MUL = 'mul'
    DIV = 'div'
    NEG = 'neg'
    SUM = 'sum'
    MEAN = 'mean'
    LOG = 'log'
    CLIP = 'clip'
    RESHAPE = 'reshape'
    CONV2D = 'conv2d'
    CONV_TRANSPOSE2D = 'conv_transpose2d'
    MAXPOOL2D = 'maxpool2d'
    CONCAT = 'concat'
    SLICE = 'slice'
    RELU = 'relu'
    SIGMOID = 'sigmoid'
    BATCHNORM2D = 'batchnorm2d'
    DROPOUT = 'dropout'
    UPSAMPLE = 'upsample'


class TapeNode(object):
    """One recorded operation.

    backward_fn maps the gradient of the node's output to a tuple with one
    entry per input (None where an input needs no gradient).
    """

    __slots__ = ('op_kind', 'input_refs', 'saved_ctx', 'backward_fn')

    def __init__(self, op_kind, input_refs, backward_fn, saved_ctx=None):
        self.op_kind = op_kind
        self.input_refs = tuple(input_refs)
        self.backward_fn = backward_fn
        self.saved_ctx = saved_ctx or {}


def recording():
    """True unless inside a no_grad() block."""
    return getattr(_tape, 'enabled', True)


@contextlib.contextmanager
def no_grad():
    """Run operations without recording a tape (inference)."""
    previous = recording()
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = previous


@contextlib.contextmanager
def record_branches():
    """Collect the branch masks of non-smooth ops (relu, maxpool, clip).

    Yields a list the ops append to. Two evaluations that produce equal
    lists went down the same side of every kink and tie.
    """
    previous = getattr(_tape, 'branches', None)
    branches = []
    _tape.branches = branches
    try:
        yield branches
    finally:
        _tape.branches = previous


def note_branch(mask):
    branches = getattr(_tape, 'branches', None)
    if branches is not None:
        branches.append(np.packbits(np.asarray(mask, dtype=bool).ravel()).tobytes())


def _as_array(data, dtype):
    if dtype is not None:
        array = np.asarray(data, dtype=dtype)
    elif isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES:
        array = data
    else:
        array = np.asarray(data, dtype=DEFAULT_DTYPE)

    if array.dtype not in FLOAT_DTYPES:
        raise DTypeError('unsupported dtype %s (float32 or float64 only)' % array.dtype)

    for axis, extent in enumerate(array.shape):
        if extent < 1:
            raise ShapeError('axis %d' % axis, 'extent must be >= 1, got %d' % extent)

    return array


class Tensor(object):
    """A dense float32/float64 array that can take part in autodiff."""

    def __init__(self, data, requires_grad=False, dtype=None, _node=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = _node

    @classmethod
    def _from_op(cls, data, op_kind, inputs, backward_fn, saved_ctx=None):
        """Wrap an op result, recording a tape node when any input needs
        gradients."""
        needs_grad = recording() and any(t.requires_grad for t in inputs)
        node = TapeNode(op_kind, inputs, backward_fn, saved_ctx) if needs_grad else None
        return cls(data, requires_grad=needs_grad, _node=node)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def node(self):
        return self._node

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        """Same values, no history, no gradient."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return 'Tensor(shape=%s, dtype=%s, requires_grad=%s)' % (
            list(self.shape), self.dtype, self.requires_grad)

    def __len__(self):
        return self.shape[0]

    # elementwise arithmetic

    def _coerce(self, other):
        if isinstance(other, Tensor):
            if other.dtype != self.dtype:
                raise DTypeError('cannot mix %s and %s' % (self.dtype, other.dtype))
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._from_op(a.data + b.data, OpKind.ADD, (a, b), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._from_op(a.data - b.data, OpKind.SUB, (a, b), backward)

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._from_op(a.data * b.data, OpKind.MUL, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            return (_unbroadcast(g / b.data, a.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._from_op(a.data / b.data, OpKind.DIV, (a, b), backward)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __neg__(self):
        def backward(g):
            return (-g,)

        return Tensor._from_op(-self.data, OpKind.NEG, (self,), backward)

    # reductions and shape

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        out = self.data.sum(axis=axis, keepdims=keepdims)
        return Tensor._from_op(np.asarray(out, dtype=self.dtype), OpKind.SUM, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        shape = self.shape
        count = self.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, shape).copy(),)

        out = self.data.mean(axis=axis, keepdims=keepdims)
        return Tensor._from_op(np.asarray(out, dtype=self.dtype), OpKind.MEAN, (self,), backward)

    def log(self):
        x = self.data

        def backward(g):
            return (g / x,)

        return Tensor._from_op(np.log(x), OpKind.LOG, (self,), backward)

    def clip(self, low, high):
        inside = (self.data >= low) & (self.data <= high)
        note_branch(inside)

        def backward(g):
            return (g * inside,)

        return Tensor._from_op(np.clip(self.data, low, high), OpKind.CLIP, (self,), backward,
                               {'inside': inside})

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape

        def backward(g):
            return (g.reshape(original),)

        return Tensor._from_op(self.data.reshape(shape), OpKind.RESHAPE, (self,), backward)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological_order(root):
    """Tensors reachable from root through recorded nodes, inputs first.

    Iterative so deep graphs (a whole Unet++ forward) don't hit the
    recursion limit.
    """
    order = []
    visited = set()
    stack = [(root, False)]

    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))

        if tensor.node is not None:
            for parent in tensor.node.input_refs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

    return order


def backward(loss):
    """Backpropagate from a single-element loss.

    Every leaf tensor with requires_grad reachable from `loss` has the
    gradient added to its .grad; calling this twice without zeroing
    accumulates.
    """
    if not isinstance(loss, Tensor):
        raise GraphError('backward() needs a Tensor, got %r' % type(loss))
    if loss.size != 1:
        raise GraphError('loss must have a single element, got shape %s' % list(loss.shape))
    if not loss.requires_grad:
        raise GraphError('loss does not depend on any tensor that requires grad')

    pending = {id(loss): np.ones_like(loss.data)}

    for tensor in reversed(_topological_order(loss)):
        grad = pending.pop(id(tensor), None)
        if grad is None:
            continue

        if tensor.node is None:
            grad = np.asarray(grad, dtype=tensor.dtype).reshape(tensor.shape)
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            continue

        input_grads = tensor.node.backward_fn(grad)
        for parent, parent_grad in zip(tensor.node.input_refs, input_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + parent_grad
            else:
                pending[id(parent)] = parent_grad
