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

"""Finite-difference checks for every differentiable op and for a tiny
NUMSnet forward pass, all in float64."""

import collections
import contextlib
import logging

import numpy as np

from metrics_losses import losses
from model_zoo.graph import LayerId
from model_zoo.zoo import build_numsnet
from tensor_engine import functional as F
from tensor_engine.gradcheck import finite_diff_check
from tensor_engine.rng import Stream
from tensor_engine.tensor import Tensor, no_grad

log = logging.getLogger(__name__)

TOLERANCE = 1e-4

# tiny NUMSnet: widths 2 at every depth, 16x16 input, two classes
TINY_WIDTHS = (2, 2, 2, 2, 2)
TINY_EXTENT = 16
TINY_CLASSES = 2
TINY_CHECKED_MAPS = (LayerId(2, 3), LayerId(3, 2))
# merge conv, encoder batch-norm scale, nested block bias, output kernel
TINY_CHECKED_PARAMS = ('X23.merge.conv1.weight', 'X23.merge.conv1.bias', 'X11.bn1.gamma', 'X12.conv1.bias',
                       'head.weight')


def _projected(out, weights):
    """Scalar sum(out * weights) so every output element matters."""
    return (out * Tensor(weights)).sum()


def _normal(shape):
    return lambda s, name: s.split(name).normal(shape)


def _case(shapes, op, stream, samplers=None):
    """fn/sampler pair for an op on inputs of the given shapes, projected
    onto fixed random weights."""
    samplers = samplers or [_normal(shape) for shape in shapes]
    weights = {}

    def fn(*tensors):
        out = op(*tensors)
        if out.shape not in weights:
            weights[out.shape] = stream.split('projection').normal(out.shape)
        return _projected(out, weights[out.shape])

    def sampler(s):
        return [draw(s, 'input-%d' % k) for k, draw in enumerate(samplers)]

    return fn, sampler


def _positive(shape, low=0.5, high=2.0):
    return lambda s, name: s.split(name).uniform(low, high, shape)


def _build_cases():
    cases = collections.OrderedDict()

    cases['add'] = lambda s: _case([(2, 3), (3,)], lambda a, b: a + b, s)
    cases['mul'] = lambda s: _case([(2, 3), (2, 3)], lambda a, b: a * b, s)
    cases['div'] = lambda s: _case([(2, 3), (2, 3)], lambda a, b: a / b, s,
                                   samplers=[_normal((2, 3)), _positive((2, 3), 1.0, 2.0)])
    cases['mean'] = lambda s: _case([(2, 3, 4)], lambda a: a.mean(axis=1), s)
    cases['log'] = lambda s: _case([(3, 4)], lambda a: a.log(), s, samplers=[_positive((3, 4))])
    cases['conv2d'] = lambda s: _case([(2, 3, 5, 5), (4, 3, 3, 3), (4,)],
                                      lambda x, w, b: F.conv2d(x, w, b, padding='same'), s)
    cases['conv2d_valid'] = lambda s: _case([(1, 2, 6, 6), (3, 2, 3, 3), (3,)],
                                            lambda x, w, b: F.conv2d(x, w, b, padding='valid'), s)
    cases['conv_transpose2d'] = lambda s: _case([(2, 3, 3, 3), (3, 2, 2, 2), (2,)],
                                                lambda x, w, b: F.conv_transpose2d(x, w, b, stride=2), s)
    cases['maxpool2d'] = lambda s: _case([(2, 2, 4, 4)], F.maxpool2d, s)
    cases['relu'] = lambda s: _case([(3, 8)], F.relu, s)
    cases['sigmoid'] = lambda s: _case([(3, 8)], F.sigmoid, s)
    cases['concat_channels'] = lambda s: _case(
        [(1, 2, 3, 3), (1, 3, 3, 3)], lambda a, b: F.slice_channels(F.concat_channels(a, b), 1, 4), s)
    cases['upsample_nearest'] = lambda s: _case([(1, 2, 3, 3)], lambda a: F.upsample_nearest(a, 2), s)
    cases['batchnorm2d_train'] = lambda s: _case(
        [(2, 3, 4, 4), (3,), (3,)],
        lambda x, g, b: F.batchnorm2d(x, g, b, Tensor(np.zeros(3)), Tensor(np.ones(3)), training=True), s,
        samplers=[_normal((2, 3, 4, 4)), _positive((3,)), _normal((3,))])
    cases['batchnorm2d_eval'] = lambda s: _case(
        [(2, 3, 4, 4), (3,), (3,)],
        lambda x, g, b: F.batchnorm2d(x, g, b, Tensor(np.full(3, 0.1)), Tensor(np.full(3, 1.5)),
                                      training=False), s,
        samplers=[_normal((2, 3, 4, 4)), _positive((3,)), _normal((3,))])
    cases['dropout_train'] = lambda s: _case(
        [(2, 3, 4, 4)], lambda x: F.dropout(x, 0.5, True, Stream(s.seed, 'dropout-case')), s)
    cases['composite'] = _composite_case

    for name, loss in losses.LOSSES.items():
        cases['loss_' + name] = _loss_case(loss)

    cases['numsnet_tiny'] = _numsnet_case
    return cases


def _composite_case(stream):
    """conv -> batch-norm (train) -> relu -> pool -> dropout."""
    bn_mean, bn_var = Tensor(np.zeros(4)), Tensor(np.ones(4))

    def op(x, w, b, gamma, beta):
        y = F.conv2d(x, w, b)
        y = F.batchnorm2d(y, gamma, beta, bn_mean, bn_var, training=True)
        y = F.maxpool2d(F.relu(y))
        return F.dropout(y, 0.5, True, Stream(stream.seed, 'composite-dropout'))

    return _case([(2, 2, 4, 4), (4, 2, 3, 3), (4,), (4,), (4,)], op, stream,
                 samplers=[_normal((2, 2, 4, 4)), _normal((4, 2, 3, 3)), _normal((4,)),
                           _positive((4,)), _normal((4,))])


def _loss_case(loss):
    shape = (1, 2, 4, 4)

    def build(stream):
        target = (stream.split('target').random(shape) > 0.5).astype(np.float64)

        def fn(p_raw):
            return loss(p_raw, target)

        def sampler(s):
            return [s.split('p_raw').uniform(0.05, 0.95, shape)]

        return fn, sampler

    return build


def _layer_objects(model):
    objects = list(model.layers.values()) + list(model.merges.values()) + [model.head]
    return objects + list(model.supervision_heads.values())


@contextlib.contextmanager
def substituted(model, replacements):
    """Stand tensors in for named parameters inside every layer of `model`
    for the duration of the block, so gradients land on the stand-ins."""
    by_id = dict((id(model.parameters[name]), tensor) for name, tensor in replacements.items())
    swapped = []

    def visit(obj):
        if isinstance(obj, (list, tuple)):
            for item in obj:
                visit(item)
            return
        if isinstance(obj, Tensor) or not hasattr(obj, '__dict__'):
            return
        for attr, value in list(vars(obj).items()):
            if id(value) in by_id:
                swapped.append((obj, attr, value))
                setattr(obj, attr, by_id[id(value)])
            else:
                visit(value)

    visit(_layer_objects(model))
    if len(swapped) != len(by_id):
        raise KeyError('parameters not found in any layer: %s' % ', '.join(sorted(replacements)))
    try:
        yield model
    finally:
        for obj, attr, value in reversed(swapped):
            setattr(obj, attr, value)


def _numsnet_case(stream):
    """The gradient of the BDL loss of a second slice with respect to that
    slice's pixels, two of the maps carried over from the first, and a few
    parameters on the merge, encoder, nested and head paths."""
    model = build_numsnet(widths=TINY_WIDTHS, num_classes=TINY_CLASSES, seed=stream.seed, dtype=np.float64)
    shape = (1, 1, TINY_EXTENT, TINY_EXTENT)

    with no_grad():
        first = model.forward(Tensor(stream.split('slice-1').random(shape)), training=True,
                              stream=Stream(stream.seed, 'tiny-dropout-1'))
    carried = dict((layer, t.detach()) for layer, t in first.merged.items())
    target = (stream.split('target').random((1, TINY_CLASSES, TINY_EXTENT, TINY_EXTENT)) > 0.5).astype(np.float64)
    split = 1 + len(TINY_CHECKED_MAPS)

    def fn(x, *rest):
        previous = dict(carried)
        previous.update(zip(TINY_CHECKED_MAPS, rest[:split - 1]))
        with substituted(model, dict(zip(TINY_CHECKED_PARAMS, rest[split - 1:]))):
            result = model.forward(x, previous=previous, training=True,
                                   stream=Stream(stream.seed, 'tiny-dropout-2'))
        return losses.bce_dice_loss(result.p_raw, target)

    def sampler(s):
        return ([s.split('slice-2').random(shape)] + [carried[layer].data for layer in TINY_CHECKED_MAPS] +
                [model.parameters[name].data.copy() for name in TINY_CHECKED_PARAMS])

    return fn, sampler


CASES = _build_cases()


def run_suite(ops=None, seed=0, tolerance=TOLERANCE):
    """name -> max relative error for the selected cases (all by default)."""
    names = list(CASES) if not ops else list(ops)
    unknown = [name for name in names if name not in CASES]
    if unknown:
        raise KeyError('unknown gradient check(s): %s' % ', '.join(unknown))

    results = collections.OrderedDict()
    for name in names:
        stream = Stream(seed, 'gradcheck/' + name)
        fn, sampler = CASES[name](stream)
        results[name] = finite_diff_check(fn, sampler, tolerance=tolerance, stream=stream.split('points'))
        log.info('gradient check %s: max relative error %.3g', name, results[name])
    return results
