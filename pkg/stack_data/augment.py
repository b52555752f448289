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

"""Paired image/label augmentation.

One random affine transform per call, applied to the image with bilinear
interpolation and to every label plane with nearest neighbour, zero fill
outside the source. Rotation and shear ranges are in degrees and shifts
are fractions of the extent, composed in the order rotation, shift,
shear, zoom about the slice centre.
"""

import logging

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)


class AugmentationParams(object):

    def __init__(self, rotation_range=0.2, width_shift_range=0.2, height_shift_range=0.2,
                 shear_range=0.2, zoom_range=(0.8, 1.0)):
        low, high = zoom_range
        if not 0 < low <= high:
            raise ValueError('zoom range must satisfy 0 < lo <= hi, got %s' % (zoom_range,))
        for name, value in [('rotation_range', rotation_range), ('width_shift_range', width_shift_range),
                            ('height_shift_range', height_shift_range), ('shear_range', shear_range)]:
            if value < 0:
                raise ValueError('%s must be >= 0, got %r' % (name, value))
        self.rotation_range = rotation_range
        self.width_shift_range = width_shift_range
        self.height_shift_range = height_shift_range
        self.shear_range = shear_range
        self.zoom_range = (float(low), float(high))

    @classmethod
    def identity(cls):
        return cls(0.0, 0.0, 0.0, 0.0, (1.0, 1.0))

    def __repr__(self):
        return ('AugmentationParams(rotation=%g, shift=(%g, %g), shear=%g, zoom=%s)' %
                (self.rotation_range, self.height_shift_range, self.width_shift_range,
                 self.shear_range, self.zoom_range))


def _uniform(stream, bound):
    return stream.uniform(-bound, bound) if bound else 0.0


def sample_transform(params, extent, stream):
    """A 3x3 homogeneous matrix mapping output (row, col) to input (row, col)."""
    height, width = extent
    theta = np.deg2rad(_uniform(stream.split('rotation'), params.rotation_range))
    ty = _uniform(stream.split('height_shift'), params.height_shift_range) * height
    tx = _uniform(stream.split('width_shift'), params.width_shift_range) * width
    shear = np.deg2rad(_uniform(stream.split('shear'), params.shear_range))
    low, high = params.zoom_range
    if low == high:
        zy = zx = low
    else:
        zy = stream.split('zoom_height').uniform(low, high)
        zx = stream.split('zoom_width').uniform(low, high)

    rotation = np.array([[np.cos(theta), -np.sin(theta), 0],
                         [np.sin(theta), np.cos(theta), 0],
                         [0, 0, 1]])
    shift = np.array([[1, 0, ty],
                      [0, 1, tx],
                      [0, 0, 1]])
    shearing = np.array([[1, -np.sin(shear), 0],
                         [0, np.cos(shear), 0],
                         [0, 0, 1]])
    zoom = np.array([[zy, 0, 0],
                     [0, zx, 0],
                     [0, 0, 1]])
    matrix = rotation.dot(shift).dot(shearing).dot(zoom)

    center_y, center_x = height / 2.0 - 0.5, width / 2.0 - 0.5
    to_center = np.array([[1, 0, center_y], [0, 1, center_x], [0, 0, 1]])
    from_center = np.array([[1, 0, -center_y], [0, 1, -center_x], [0, 0, 1]])
    return to_center.dot(matrix).dot(from_center)


def _warp(plane, matrix, order):
    return ndimage.affine_transform(plane, matrix[:2, :2], offset=matrix[:2, 2], order=order,
                                    mode='constant', cval=0.0)


def augment_pair(image, planes, params, stream):
    """Apply one sampled transform to image [H, W] (or [1, H, W]) and label
    planes [d, H, W]; returns new arrays of the same shapes and dtypes."""
    image = np.asarray(image)
    planes = np.asarray(planes)
    extent = image.shape[-2:]
    if planes.shape[-2:] != extent:
        raise ValueError('image extent %s does not match label extent %s' % (extent, planes.shape[-2:]))

    matrix = sample_transform(params, extent, stream)
    if np.allclose(matrix, np.eye(3)):
        return image.copy(), planes.copy()

    flat = image.reshape((-1,) + extent)
    warped = np.stack([_warp(p.astype(np.float64), matrix, 1) for p in flat]).astype(image.dtype)
    labels = np.stack([_warp(p, matrix, 0) for p in planes]).astype(planes.dtype)
    return warped.reshape(image.shape), labels
