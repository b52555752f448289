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

"""Slice preprocessing: resize, min-max normalisation, label planes and
thresholding."""

import collections
import logging

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

DEFAULT_EXTENT = (256, 256)
THRESHOLD = 0.5


def resize(image, extent, mask=False):
    """Resize a [H, W] slice to `extent`.

    Images use bilinear interpolation; masks use nearest neighbour, so a
    resized mask only holds values the original held.
    """
    image = np.asarray(image)
    extent = tuple(int(e) for e in extent)
    if len(extent) != 2 or min(extent) < 1:
        raise ValueError('extent must be two positive sizes, got %s' % (extent,))
    if image.shape == extent:
        return image.copy()

    factors = (extent[0] / float(image.shape[0]), extent[1] / float(image.shape[1]))
    if mask:
        out = ndimage.zoom(image, factors, order=0, mode='nearest')
    else:
        out = ndimage.zoom(image.astype(np.float64), factors, order=1, mode='nearest')
    assert out.shape == extent, 'zoom produced %s, wanted %s' % (out.shape, extent)
    return out


def normalize(image):
    """(I - min) / (max - min); a constant slice maps to zeros."""
    image = np.asarray(image, dtype=np.float64)
    low, high = image.min(), image.max()
    if high == low:
        return np.zeros_like(image)
    return (image - low) / (high - low)


def make_label_planes(mask, pix, num_classes=None):
    """One binary [H, W] plane per class: plane i = (mask == pix[i])."""
    pix = list(pix)
    if len(set(pix)) != len(pix):
        raise ValueError('class pixel values must be distinct: %s' % pix)
    if num_classes is not None:
        if num_classes > len(pix):
            raise ValueError('%d classes requested, %d pixel values known' % (num_classes, len(pix)))
        pix = pix[:num_classes]
    mask = np.asarray(mask)
    return np.stack([(mask == p) for p in pix]).astype(np.uint8)


def threshold_prediction(p_raw, tau=THRESHOLD):
    """Binary planes P = [P_raw > tau] (strict)."""
    return (np.asarray(p_raw) > tau).astype(np.uint8)


PreparedStack = collections.namedtuple('PreparedStack', [
    'stack_id', 'images', 'planes', 'annotated', 'class_names', 'pix'])
PreparedStack.__doc__ = """Model-ready arrays for one stack.

images: float32 [N, 1, H, W] in [0, 1]; planes: float32 [N, d, H, W] 0/1;
annotated: bool [N].
"""


def prepare_stack(images, labels, extent=None, num_classes=None):
    """Resize, normalise and split masks into planes for a whole stack."""
    extent = tuple(extent) if extent else tuple(images.extent)
    if len(images) != len(labels):
        raise ValueError('%d slices but %d masks' % (len(images), len(labels)))

    pix = labels.pix[:num_classes] if num_classes else labels.pix
    x = np.empty((len(images), 1) + extent, dtype=np.float32)
    y = np.empty((len(images), len(pix)) + extent, dtype=np.float32)
    for i in range(len(images)):
        x[i, 0] = normalize(resize(images.slices[i], extent))
        y[i] = make_label_planes(resize(labels.masks[i], extent, mask=True), pix)

    log.debug('prepared %s: %s images, %s planes', images.stack_id, x.shape, y.shape)
    return PreparedStack(images.stack_id, x, y, labels.annotated.copy(),
                         tuple(labels.class_names[:len(pix)]), tuple(pix))
