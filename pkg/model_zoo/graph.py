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

"""Layer graph shared by the Unet, wUnet, Unet++, NUMSnet and NUMS-all
models.

Layers sit on the X(i, j) grid: row i is the depth (1 at full resolution,
5 at the bottleneck), column j counts the up-sampling steps that led to
it. X(i, 1) are the encoder blocks, X(i, 6 - i) the decoder path a plain
Unet has, and everything in between the nested layers Unet++ adds.
"""

import collections
import enum
import re

import numpy as np

from tensor_engine import functional as F
from tensor_engine.rng import Stream
from tensor_engine.tensor import Tensor

DEPTH = 5

_LAYER_PATTERN = re.compile(r'^X\(?(\d)\s*,?\s*(\d)\)?$')


class Role(enum.Enum):
    ENCODER = 'encoder'
    NESTED = 'nested'
    DECODER = 'decoder'
    HEAD = 'head'
    PROPAGATION_MERGE = 'propagation-merge'


class LayerId(collections.namedtuple('LayerId', ['row', 'column'])):
    """Position X(row, column) on the depth-5 grid."""

    __slots__ = ()

    def __new__(cls, row, column):
        row, column = int(row), int(column)
        if not (1 <= row <= DEPTH and 1 <= column <= DEPTH and row + column <= DEPTH + 1):
            raise ValueError('X(%d,%d) is not on the depth-%d grid' % (row, column, DEPTH))
        return super(LayerId, cls).__new__(cls, row, column)

    @classmethod
    def parse(cls, text):
        """Accepts 'X(1,2)' or 'X12'."""
        match = _LAYER_PATTERN.match(text.strip())
        if not match:
            raise ValueError('not a layer id: %r' % (text,))
        return cls(match.group(1), match.group(2))

    @property
    def role(self):
        if self.column == 1:
            return Role.ENCODER
        if self.row + self.column == DEPTH + 1:
            return Role.DECODER
        return Role.NESTED

    @property
    def key(self):
        return 'X%d%d' % (self.row, self.column)

    def __str__(self):
        return 'X(%d,%d)' % (self.row, self.column)


NESTED_LAYERS = tuple(LayerId(i, j) for i, j in [(1, 2), (1, 3), (1, 4), (2, 2), (2, 3), (3, 2)])
UPSAMPLING_LAYERS = tuple(LayerId(i, j) for i, j in [
    (1, 2), (1, 3), (1, 4), (1, 5), (2, 2), (2, 3), (2, 4), (3, 2), (3, 3), (4, 2)])
ENCODER_LAYERS = tuple(LayerId(i, 1) for i in range(1, DEPTH + 1))
DECODER_LAYERS = tuple(LayerId(i, DEPTH + 1 - i) for i in range(DEPTH - 1, 0, -1))

# deep-supervision heads, keyed by the depth they read from
SUPERVISED_LAYERS = collections.OrderedDict(
    (layer.row, layer) for layer in sorted(DECODER_LAYERS))


class Parameter(Tensor):
    """A named tensor in a model's registry."""

    def __init__(self, name, data, trainable):
        super(Parameter, self).__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return 'Parameter(%r, shape=%s, trainable=%s)' % (self.name, list(self.shape), self.trainable)


class ParameterRegistry(collections.OrderedDict):
    """Stable name -> Parameter, in creation order."""

    def add(self, name, data, trainable=True):
        if name in self:
            raise KeyError('duplicate parameter name: %s' % name)
        param = Parameter(name, data, trainable)
        self[name] = param
        return param

    def trainable(self):
        return collections.OrderedDict((n, p) for n, p in self.items() if p.trainable)


def he_uniform(stream, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return stream.uniform(-limit, limit, shape).astype(dtype)


class ForwardContext(object):
    """Per-call switches: train/infer mode, dropout stream, hook."""

    def __init__(self, training=False, stream=None, hook=None):
        self.training = training
        self.stream = stream
        self.hook = hook

    def emit(self, layer_id, event, tensor):
        if self.hook is not None:
            self.hook(layer_id, event, tensor)


class ConvUnit(object):
    """3x3 same convolution, optional batch-norm, ReLU."""

    def __init__(self, registry, prefix, in_channels, out_channels, batch_norm, stream, dtype):
        fan_in = in_channels * 9
        self.weight = registry.add(prefix + '.weight',
                                   he_uniform(stream.split(prefix), (out_channels, in_channels, 3, 3), fan_in, dtype))
        self.bias = registry.add(prefix + '.bias', np.zeros(out_channels, dtype=dtype))

        self.batch_norm = batch_norm
        if batch_norm:
            bn = prefix.rsplit('.', 1)[0] + '.bn' + prefix[-1]
            self.gamma = registry.add(bn + '.gamma', np.ones(out_channels, dtype=dtype))
            self.beta = registry.add(bn + '.beta', np.zeros(out_channels, dtype=dtype))
            self.running_mean = registry.add(bn + '.running_mean', np.zeros(out_channels, dtype=dtype),
                                             trainable=False)
            self.running_var = registry.add(bn + '.running_var', np.ones(out_channels, dtype=dtype),
                                            trainable=False)

    def __call__(self, x, ctx):
        x = F.conv2d(x, self.weight, self.bias, padding='same')
        if self.batch_norm:
            x = F.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, ctx.training)
        return F.relu(x)


class ConvBlock(object):
    """Two ConvUnits, then dropout when a rate is set."""

    def __init__(self, registry, prefix, in_channels, out_channels, batch_norm, stream, dtype,
                 dropout_rate=None):
        self.prefix = prefix
        self.first = ConvUnit(registry, prefix + '.conv1', in_channels, out_channels, batch_norm, stream, dtype)
        self.second = ConvUnit(registry, prefix + '.conv2', out_channels, out_channels, batch_norm, stream, dtype)
        self.dropout_rate = dropout_rate

    def __call__(self, x, ctx):
        x = self.second(self.first(x, ctx), ctx)
        if self.dropout_rate:
            x = F.dropout(x, self.dropout_rate, ctx.training, ctx.stream.split(self.prefix + '.dropout'))
        return x


class UpConv(object):
    """2x2 transposed convolution, stride 2."""

    def __init__(self, registry, prefix, in_channels, out_channels, stream, dtype):
        self.weight = registry.add(prefix + '.weight',
                                   he_uniform(stream.split(prefix), (in_channels, out_channels, 2, 2),
                                              in_channels * 4, dtype))
        self.bias = registry.add(prefix + '.bias', np.zeros(out_channels, dtype=dtype))

    def __call__(self, x):
        return F.conv_transpose2d(x, self.weight, self.bias, stride=2)


class Head(object):
    """1x1 convolution to d planes and a sigmoid."""

    def __init__(self, registry, prefix, in_channels, num_classes, stream, dtype):
        self.prefix = prefix
        self.weight = registry.add(prefix + '.weight',
                                   he_uniform(stream.split(prefix), (num_classes, in_channels, 1, 1),
                                              in_channels, dtype))
        self.bias = registry.add(prefix + '.bias', np.zeros(num_classes, dtype=dtype))

    def __call__(self, x):
        return F.sigmoid(F.conv2d(x, self.weight, self.bias, padding='valid'))


class ForwardResult(collections.namedtuple('ForwardResult', ['p_raw', 'heads', 'merged'])):
    """p_raw: [N, d, H, W] in (0, 1); heads: depth -> [N, d, H, W] (empty
    without deep supervision); merged: propagated layer -> merged map."""

    __slots__ = ()


class ModelGraph(object):
    """One of the five architectures as an ordered layer graph.

    Use the build_* functions in model_zoo.zoo rather than this constructor.
    """

    def __init__(self, architecture, widths, num_classes, topology, batch_norm_depths=(),
                 dropout_layers=(), dropout_rate=0.5, propagated_layers=(), deep_supervision=False,
                 in_channels=1, seed=0, dtype=np.float32):
        widths = [int(w) for w in widths]
        if len(widths) != DEPTH:
            raise ValueError('widths must list %d depths, got %d' % (DEPTH, len(widths)))
        if any(w < 1 for w in widths):
            raise ValueError('widths must be positive, got %s' % widths)
        if not 1 <= num_classes <= 7:
            raise ValueError('num_classes must be in 1..7, got %d' % num_classes)
        if topology not in ('unet', 'nested'):
            raise ValueError('unknown topology %r' % (topology,))

        self.architecture = architecture
        self.widths = widths
        self.num_classes = int(num_classes)
        self.topology = topology
        self.batch_norm_depths = tuple(sorted(batch_norm_depths))
        self.dropout_layers = tuple(dropout_layers)
        self.dropout_rate = dropout_rate
        self.propagated_layers = tuple(sorted(propagated_layers))
        self.deep_supervision = deep_supervision
        self.in_channels = in_channels
        self.seed = seed
        self.dtype = np.dtype(dtype)

        self.parameters = ParameterRegistry()
        self.layers = collections.OrderedDict()
        self.roles = collections.OrderedDict()
        self.merges = collections.OrderedDict()
        self.supervision_heads = collections.OrderedDict()

        stream = Stream(seed, 'init/' + architecture)
        self._build(stream)

    @property
    def batch_norm(self):
        return bool(self.batch_norm_depths)

    def layer_order(self):
        """Grid layers in evaluation order."""
        order = list(ENCODER_LAYERS)
        for column in range(2, DEPTH + 1):
            for row in range(1, DEPTH + 1 - column + 1):
                layer = LayerId(row, column)
                if self.topology == 'nested' or layer.role is Role.DECODER:
                    order.append(layer)
        return order

    def skip_sources(self, layer):
        """Same-depth layers concatenated into `layer`, in order."""
        if self.topology == 'nested':
            return [LayerId(layer.row, j) for j in range(1, layer.column)]
        return [LayerId(layer.row, 1)]

    def _build(self, stream):
        registry = self.parameters
        w = self.widths
        dtype = self.dtype

        in_channels = self.in_channels
        for layer in self.layer_order():
            width = w[layer.row - 1]
            if layer.role is Role.ENCODER:
                rate = self.dropout_rate if layer in self.dropout_layers else None
                self.layers[layer] = ConvBlock(registry, layer.key, in_channels, width,
                                               layer.row in self.batch_norm_depths, stream, dtype, rate)
                in_channels = width
            else:
                up = UpConv(registry, layer.key + '.up', w[layer.row], width, stream, dtype)
                concat_channels = width * (len(self.skip_sources(layer)) + 1)
                block = ConvBlock(registry, layer.key, concat_channels, width, False, stream, dtype)
                self.layers[layer] = (up, block)
            self.roles[layer] = layer.role

            if layer in self.propagated_layers:
                self.merges[layer] = ConvBlock(registry, layer.key + '.merge', 2 * width, width, False,
                                               stream, dtype)

        self.head = Head(registry, 'head', w[0], self.num_classes, stream, dtype)

        if self.deep_supervision:
            for depth, layer in SUPERVISED_LAYERS.items():
                if depth == 1:
                    continue
                self.supervision_heads[depth] = Head(registry, 'ds.' + layer.key, w[depth - 1],
                                                     self.num_classes, stream, dtype)

    def head_parameter_names(self):
        """Parameters whose shape depends on num_classes."""
        heads = [self.head] + list(self.supervision_heads.values())
        return [p.name for head in heads for p in (head.weight, head.bias)]

    def zero_grad(self):
        for param in self.parameters.values():
            param.zero_grad()

    def forward(self, x, previous=None, training=False, stream=None, hook=None):
        """Run the graph on x: [N, in_channels, H, W].

        previous: propagated layer -> the previous scan's merged map. A
        propagated layer without an entry is merged with its own output.
        Architectures with no propagated layers ignore it.
        """
        if training and self.dropout_layers and stream is None:
            raise ValueError('training with dropout needs a stream')
        ctx = ForwardContext(training, stream, hook)
        previous = previous or {}

        outputs = {}
        merged = collections.OrderedDict()
        pooled = x
        for layer in self.layer_order():
            if layer.role is Role.ENCODER:
                out = self.layers[layer](pooled, ctx)
                ctx.emit(layer, 'output', out)
                if layer.row < DEPTH:
                    pooled = F.maxpool2d(out)
                    ctx.emit(layer, 'pool', pooled)
            else:
                up, block = self.layers[layer]
                below = up(outputs[LayerId(layer.row + 1, layer.column - 1)])
                sources = [outputs[s] for s in self.skip_sources(layer)] + [below]
                joined = F.concat_channels(*sources)
                ctx.emit(layer, 'concat', joined)
                out = block(joined, ctx)
                ctx.emit(layer, 'output', out)

            if layer in self.merges:
                prior = previous.get(layer)
                if prior is None:
                    prior = out
                ctx.emit(layer, 'merge_previous', prior)
                ctx.emit(layer, 'merge_current', out)
                out = self.merges[layer](F.concat_channels(prior, out), ctx)
                ctx.emit(layer, 'merged', out)
                merged[layer] = out

            outputs[layer] = out

        final = outputs[LayerId(1, DEPTH)]
        p_raw = self.head(final)

        heads = collections.OrderedDict()
        if self.deep_supervision:
            heads[1] = p_raw
            for depth, head in self.supervision_heads.items():
                source = outputs[SUPERVISED_LAYERS[depth]]
                heads[depth] = F.upsample_nearest(head(source), 2 ** (depth - 1))

        return ForwardResult(p_raw, heads, merged)

    def __call__(self, x, **kwargs):
        return self.forward(x, **kwargs)

    def __repr__(self):
        return 'ModelGraph(%s, widths=%s, num_classes=%d)' % (self.architecture, self.widths, self.num_classes)
