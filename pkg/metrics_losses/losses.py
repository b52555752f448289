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

"""Differentiable segmentation losses on raw (sigmoid) predictions.

All three take P_raw as a Tensor of values in (0, 1) and the ground-truth
planes as an array or Tensor of the same shape, and return a scalar Tensor.
"""

import collections

import numpy as np

from tensor_engine.errors import ShapeError
from tensor_engine.tensor import Tensor

CLAMP = 1e-7
SMOOTH = 1.0


def _target(p_raw, g):
    data = g.data if isinstance(g, Tensor) else np.asarray(g)
    if data.shape != p_raw.shape:
        raise ShapeError('planes', 'prediction %s and ground truth %s differ' % (list(p_raw.shape), list(data.shape)))
    return Tensor(data, dtype=p_raw.dtype)


def soft_dice(p_raw, g):
    """(2 sum(P G) + 1) / (sum(P) + sum(G) + 1), pooled over every element."""
    g = _target(p_raw, g)
    return (2.0 * (p_raw * g).sum() + SMOOTH) / (p_raw.sum() + g.sum() + SMOOTH)


def dice_loss(p_raw, g):
    """DL = -Dice on the soft prediction."""
    return -soft_dice(p_raw, g)


def bce_loss(p_raw, g):
    """Mean binary cross-entropy with P_raw clamped to [1e-7, 1 - 1e-7]."""
    g = _target(p_raw, g)
    p = p_raw.clip(CLAMP, 1.0 - CLAMP)
    return -(g * p.log() + (1.0 - g) * (1.0 - p).log()).mean()


def bce_dice_loss(p_raw, g):
    """BDL = BCL / 2 + DL."""
    return bce_loss(p_raw, g) * 0.5 + dice_loss(p_raw, g)


LOSSES = collections.OrderedDict([
    ('DL', dice_loss),
    ('BCL', bce_loss),
    ('BDL', bce_dice_loss),
])


def get_loss(name):
    try:
        return LOSSES[name.upper()]
    except KeyError:
        raise KeyError('unknown loss %r (expected one of %s)' % (name, ', '.join(LOSSES)))
