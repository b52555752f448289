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

"""Builders for the five architectures and their parameter accounting.

Batch-norm placement reproduces the non-trainable counts in REFERENCE_COUNTS:
Unet and wUnet normalise both convolutions of all five
encoder blocks; Unet++, NUMSnet and NUMS-all only encoder depths 1-4.
Propagation-merge units and decoder/nested blocks carry no batch-norm.
"""

import collections

from model_zoo.graph import (DEPTH, NESTED_LAYERS, UPSAMPLING_LAYERS, LayerId, ModelGraph,
                             Role)

UNET_WIDTHS = (32, 64, 128, 256, 512)
WUNET_WIDTHS = (35, 70, 140, 280, 560)

ARCHITECTURES = ('unet', 'wunet', 'unetpp', 'numsnet', 'numsall')

# (total, trainable, non-trainable) at the default widths with d = 3
REFERENCE_COUNTS = collections.OrderedDict([
    ('unet', (7767523, 7763555, 3968)),
    ('wunet', (9290998, 9286658, 4340)),
    ('unetpp', (9045507, 9043587, 1920)),
    ('numsnet', (11713943, 11711843, 2100)),
    ('numsall', (14526368, 14524268, 2100)),
])
REFERENCE_CLASSES = 3

DEFAULT_WIDTHS = {
    'unet': UNET_WIDTHS,
    'wunet': WUNET_WIDTHS,
    'unetpp': UNET_WIDTHS,
    'numsnet': WUNET_WIDTHS,
    'numsall': WUNET_WIDTHS,
}

ParamCount = collections.namedtuple('ParamCount', ['total', 'trainable', 'non_trainable'])


def _bn_depths(batch_norm, depths):
    return depths if batch_norm else ()


def build_unet(widths=UNET_WIDTHS, num_classes=3, batch_norm=True, deep_supervision=False, seed=0, **kwargs):
    """Classic depth-5 Unet with long skips."""
    return ModelGraph('unet', widths, num_classes, 'unet',
                      batch_norm_depths=_bn_depths(batch_norm, range(1, DEPTH + 1)),
                      deep_supervision=deep_supervision, seed=seed, **kwargs)


def build_wunet(widths=WUNET_WIDTHS, num_classes=3, batch_norm=True, deep_supervision=False, seed=0, **kwargs):
    """The Unet topology with wider filters."""
    return ModelGraph('wunet', widths, num_classes, 'unet',
                      batch_norm_depths=_bn_depths(batch_norm, range(1, DEPTH + 1)),
                      deep_supervision=deep_supervision, seed=seed, **kwargs)


def build_unetpp(widths=UNET_WIDTHS, num_classes=3, batch_norm=True, deep_supervision=False, seed=0, **kwargs):
    """Unet++: the six nested layers with dense same-depth skips."""
    return ModelGraph('unetpp', widths, num_classes, 'nested',
                      batch_norm_depths=_bn_depths(batch_norm, range(1, DEPTH)),
                      deep_supervision=deep_supervision, seed=seed, **kwargs)


def build_numsnet(widths=WUNET_WIDTHS, num_classes=3, batch_norm=True, deep_supervision=False, seed=0,
                  dropout_rate=0.5, **kwargs):
    """Unet++ at wUnet widths whose six nested layers are merged with the
    previous scan's maps; dropout after X(4,1) and X(5,1)."""
    return ModelGraph('numsnet', widths, num_classes, 'nested',
                      batch_norm_depths=_bn_depths(batch_norm, range(1, DEPTH)),
                      dropout_layers=(LayerId(4, 1), LayerId(5, 1)), dropout_rate=dropout_rate,
                      propagated_layers=NESTED_LAYERS, deep_supervision=deep_supervision, seed=seed, **kwargs)


def build_numsall(widths=WUNET_WIDTHS, num_classes=3, batch_norm=True, deep_supervision=False, seed=0,
                  dropout_rate=0.5, **kwargs):
    """NUMSnet propagating all ten up-sampling layers."""
    return ModelGraph('numsall', widths, num_classes, 'nested',
                      batch_norm_depths=_bn_depths(batch_norm, range(1, DEPTH)),
                      dropout_layers=(LayerId(4, 1), LayerId(5, 1)), dropout_rate=dropout_rate,
                      propagated_layers=UPSAMPLING_LAYERS, deep_supervision=deep_supervision, seed=seed, **kwargs)


BUILDERS = collections.OrderedDict([
    ('unet', build_unet),
    ('wunet', build_wunet),
    ('unetpp', build_unetpp),
    ('numsnet', build_numsnet),
    ('numsall', build_numsall),
])


def build_model(architecture, widths=None, **options):
    """Build by tag; widths default to the architecture's own."""
    if architecture not in BUILDERS:
        raise KeyError('unknown architecture %r (expected one of %s)' % (architecture, ', '.join(BUILDERS)))
    if widths is None:
        widths = DEFAULT_WIDTHS[architecture]
    return BUILDERS[architecture](widths=widths, **options)


def scaled_widths(architecture, divisor):
    """The default widths divided by `divisor`, rounded, at least 1."""
    return tuple(max(1, int(round(w / float(divisor)))) for w in DEFAULT_WIDTHS[architecture])


def count_params(model):
    """(total, trainable, non_trainable) summed over the registry."""
    trainable = non_trainable = 0
    for param in model.parameters.values():
        if param.trainable:
            trainable += param.size
        else:
            non_trainable += param.size
    return ParamCount(trainable + non_trainable, trainable, non_trainable)


def head_param_count(model):
    return sum(model.parameters[name].size for name in model.head_parameter_names())


def shape_table(model, height=256, width=256, batch=1):
    """Shapes every grid layer produces for a [batch, C, height, width]
    input, without running the model.

    Returns an OrderedDict keyed by (LayerId, event) with event one of
    'output', 'pool', 'concat', 'merged', plus ('head', 'output').
    """
    table = collections.OrderedDict()
    for layer in model.layer_order():
        scale = 2 ** (layer.row - 1)
        if height % scale or width % scale:
            raise ValueError('%dx%d cannot be pooled down to depth %d' % (height, width, layer.row))
        h, w = height // scale, width // scale
        channels = model.widths[layer.row - 1]

        if layer.role is Role.ENCODER:
            table[(layer, 'output')] = (batch, channels, h, w)
            if layer.row < DEPTH:
                table[(layer, 'pool')] = (batch, channels, h // 2, w // 2)
        else:
            concat = channels * (len(model.skip_sources(layer)) + 1)
            table[(layer, 'concat')] = (batch, concat, h, w)
            table[(layer, 'output')] = (batch, channels, h, w)
        if layer in model.merges:
            table[(layer, 'merged')] = (batch, channels, h, w)

    table[('head', 'output')] = (batch, model.num_classes, height, width)
    return table


def propagation_shapes(model, height, width, batch=1):
    """Propagated layer -> the shape its stored map must have."""
    table = shape_table(model, height, width, batch)
    return collections.OrderedDict((layer, table[(layer, 'merged')]) for layer in model.propagated_layers)
