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

"""Synthetic stacks for desk-scale experiments.

Each slice shows one large ellipsoidal "organ" and up to six smaller
lesion-like regions inside it. Every region's cross-section grows towards
the middle of the stack and shrinks towards both ends, so mid-stack slices
carry most of the ROI pixels. Masks are exact by construction.
"""

import logging

import numpy as np

from stack_data.stack import ImageStack, LabelStack
from tensor_engine.rng import Stream

log = logging.getLogger(__name__)

SYNTH_PIX = (205, 420, 500, 550, 600, 820, 850)
LUNG_CLASS_NAMES = ('GGO', 'Con', 'Lung')

BACKGROUND = 20.0
ORGAN = 90.0
NOISE = 6.0


def class_names_for(classes):
    if classes == 3:
        return LUNG_CLASS_NAMES
    return tuple('pix_%d' % p for p in SYNTH_PIX[:classes])


def _profile(n, spread):
    """Per-slice size factor in [0, 1]: 1 at the middle, falling to 0 at
    `spread` * n slices from it."""
    z = np.arange(n) + 0.5
    distance = np.abs(z - n / 2.0) / (spread * n)
    return np.sqrt(np.clip(1.0 - distance ** 2, 0.0, 1.0))


def _ellipse(extent, center, radii):
    rows, cols = np.mgrid[0:extent[0], 0:extent[1]]
    if min(radii) <= 0:
        return np.zeros(extent, dtype=bool)
    return ((rows - center[0]) / radii[0]) ** 2 + ((cols - center[1]) / radii[1]) ** 2 <= 1.0


def synth_stack(n, classes, seed=0, extent=(64, 64)):
    """Generate n slices with `classes` label classes.

    The last class is the organ; classes before it are lesions painted over
    the organ in order, so later classes overwrite earlier ones. Pixel
    values come from SYNTH_PIX. The same seed regenerates the stack
    bit-identically.
    """
    if n < 10:
        raise ValueError('need at least 10 slices, got %d' % n)
    if not 1 <= classes <= len(SYNTH_PIX):
        raise ValueError('classes must be in 1..%d, got %d' % (len(SYNTH_PIX), classes))
    extent = tuple(extent)
    height, width = extent
    stream = Stream(seed, 'synth')
    pix = SYNTH_PIX[:classes]

    organ_profile = 0.6 + 0.4 * _profile(n, 0.6)
    organ_radii = np.array([0.38 * height, 0.32 * width])
    organ_center = np.array([height / 2.0, width / 2.0])

    lesions = []
    for k in range(classes - 1):
        lesion = stream.split('lesion-%d' % k)
        angle = lesion.uniform(0, 2 * np.pi)
        offset = lesion.uniform(0.15, 0.45) * np.array([np.sin(angle), np.cos(angle)]) * organ_radii
        drift = lesion.uniform(-0.1, 0.1, 2) * organ_radii
        radius = lesion.uniform(0.10, 0.18) * min(height, width)
        spread = lesion.uniform(0.30, 0.42)
        lesions.append((organ_center + offset, drift, radius, _profile(n, spread)))

    step = 160.0 / max(1, classes - 1)
    noise = stream.split('noise')
    slices = np.empty((n,) + extent, dtype=np.uint8)
    masks = np.zeros((n,) + extent, dtype=np.int64)
    for z in range(n):
        t = (z + 0.5) / n - 0.5
        organ = _ellipse(extent, organ_center, organ_radii * organ_profile[z])
        image = np.full(extent, BACKGROUND)
        image[organ] = ORGAN
        masks[z][organ] = pix[-1]

        for k, (center, drift, radius, profile) in enumerate(lesions):
            region = _ellipse(extent, center + drift * t, (radius * profile[z], 0.8 * radius * profile[z]))
            region &= organ
            image[region] = ORGAN + step * (k + 1)
            masks[z][region] = pix[k]

        image += noise.split('slice-%d' % z).normal(extent, NOISE)
        slices[z] = np.clip(np.rint(image), 0, 255).astype(np.uint8)

    log.debug('synthesised %d slices, %d classes, seed %d', n, classes, seed)
    return (ImageStack('synth-%d' % seed, slices, bit_depth=8),
            LabelStack(masks, pix, class_names_for(classes)))
