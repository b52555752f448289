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

"""Volumetric slice stacks on disk.

A stack directory looks like:

    images/0000.png    grayscale slice, 8- or 16-bit
    masks/0000.png     16-bit label mask; a missing file = unannotated
    manifest           'id <stack id>' and one 'class <pix> <name>' per class

Slice files are named by their zero-padded index; indices must be
contiguous and ascending.
"""

import logging
import os
import re

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

MANIFEST = 'manifest'
IMAGES = 'images'
MASKS = 'masks'

_SLICE_NAME = re.compile(r'^(\d+)\.png$')


class StackError(ValueError):
    """A stack directory that cannot be loaded; names the slice at fault
    when there is one."""

    def __init__(self, message, slice_index=None):
        if slice_index is not None:
            message = 'slice %d: %s' % (slice_index, message)
        super(StackError, self).__init__(message)
        self.slice_index = slice_index


class ImageStack(object):
    """Ordered single-channel slices of one volume, [N, H, W]."""

    def __init__(self, stack_id, slices, bit_depth=8, first_index=0):
        slices = np.asarray(slices)
        if slices.ndim != 3:
            raise StackError('slices must be [N, H, W], got shape %s' % (slices.shape,))
        self.stack_id = stack_id
        self.slices = slices
        self.bit_depth = bit_depth
        self.first_index = first_index

    def __len__(self):
        return self.slices.shape[0]

    @property
    def extent(self):
        return self.slices.shape[1:]

    @property
    def indices(self):
        return range(self.first_index, self.first_index + len(self))

    def __repr__(self):
        return 'ImageStack(%r, n=%d, extent=%s)' % (self.stack_id, len(self), self.extent)


class LabelStack(object):
    """Label masks aligned with an ImageStack.

    masks: [N, H, W] integer pixel values, 0 or one of `pix`; slices without
    annotation hold zeros and are flagged False in `annotated`.
    """

    def __init__(self, masks, pix, class_names=None, annotated=None):
        masks = np.asarray(masks)
        pix = tuple(int(p) for p in pix)
        if len(set(pix)) != len(pix):
            raise StackError('class pixel values must be distinct: %s' % (pix,))
        if 0 in pix:
            raise StackError('0 is reserved for background')
        self.masks = masks
        self.pix = pix
        self.class_names = tuple(class_names) if class_names else tuple('pix_%d' % p for p in pix)
        if len(self.class_names) != len(pix):
            raise StackError('%d class names for %d classes' % (len(self.class_names), len(pix)))
        if annotated is None:
            annotated = np.ones(len(masks), dtype=bool)
        self.annotated = np.asarray(annotated, dtype=bool)

    def __len__(self):
        return self.masks.shape[0]

    @property
    def num_classes(self):
        return len(self.pix)

    def validate(self, first_index=0):
        allowed = np.array((0,) + self.pix)
        for i, mask in enumerate(self.masks):
            stray = np.setdiff1d(np.unique(mask), allowed)
            if stray.size:
                raise StackError('mask holds pixel value %d, not in %s' % (stray[0], list(allowed)), first_index + i)


def read_manifest(path):
    stack_id = None
    pix, names = [], []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            fields = line.split(None, 2)
            if fields[0] == 'id' and len(fields) >= 2:
                stack_id = line.split(None, 1)[1]
            elif fields[0] == 'class' and len(fields) >= 2:
                try:
                    pix.append(int(fields[1]))
                except ValueError:
                    raise StackError('%s:%d: bad class pixel value %r' % (path, line_no, fields[1]))
                names.append(fields[2] if len(fields) > 2 else 'pix_%s' % fields[1])
            else:
                raise StackError('%s:%d: cannot parse %r' % (path, line_no, line))
    if not pix:
        raise StackError('%s declares no classes' % path)
    return stack_id, pix, names


def _scan(directory):
    found = {}
    if not os.path.isdir(directory):
        return found
    for name in os.listdir(directory):
        match = _SLICE_NAME.match(name)
        if match:
            found[int(match.group(1))] = os.path.join(directory, name)
    return found


def _read_png(path):
    image = Image.open(path)
    bit_depth = 8 if image.mode in ('L', 'P', '1') else 16
    return np.asarray(image).astype(np.int64), bit_depth


def load_stack(directory):
    """Read and validate a stack directory -> (ImageStack, LabelStack)."""
    images = _scan(os.path.join(directory, IMAGES))
    if not images:
        raise StackError('%s holds no slice images' % directory)

    indices = sorted(images)
    first = indices[0]
    expected = range(first, first + len(indices))
    if indices != list(expected):
        missing = sorted(set(expected) - set(indices))
        raise StackError('slice image missing', missing[0])

    manifest = os.path.join(directory, MANIFEST)
    if not os.path.exists(manifest):
        raise StackError('%s has no manifest' % directory)
    stack_id, pix, names = read_manifest(manifest)

    masks_found = _scan(os.path.join(directory, MASKS))
    stray = sorted(set(masks_found) - set(indices))
    if stray:
        raise StackError('mask without a slice image', stray[0])

    slices, masks, annotated = [], [], []
    extent = None
    bit_depth = 8
    for index in indices:
        pixels, depth = _read_png(images[index])
        bit_depth = max(bit_depth, depth)
        if pixels.ndim != 2:
            raise StackError('expected a single-channel image, got shape %s' % (pixels.shape,), index)
        if extent is None:
            extent = pixels.shape
        elif pixels.shape != extent:
            raise StackError('extent %s differs from %s' % (pixels.shape, extent), index)
        slices.append(pixels)

        if index in masks_found:
            mask, _ = _read_png(masks_found[index])
            if mask.shape != extent:
                raise StackError('mask extent %s differs from %s' % (mask.shape, extent), index)
            masks.append(mask)
            annotated.append(True)
        else:
            masks.append(np.zeros(extent, dtype=np.int64))
            annotated.append(False)

    image_stack = ImageStack(stack_id or os.path.basename(os.path.normpath(directory)),
                             np.stack(slices), bit_depth, first)
    label_stack = LabelStack(np.stack(masks), pix, names, annotated)
    label_stack.validate(first)

    log.info('loaded stack %s: %d slices, %d annotated', image_stack.stack_id, len(image_stack),
             int(label_stack.annotated.sum()))
    return image_stack, label_stack


def _write_png(path, array, bit_depth):
    if bit_depth == 8:
        Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)
    else:
        Image.fromarray(np.asarray(array, dtype=np.uint16)).save(path)


def save_stack(directory, images, labels):
    """Write the stack layout load_stack reads; masks are always 16-bit."""
    for sub in (IMAGES, MASKS):
        path = os.path.join(directory, sub)
        if not os.path.isdir(path):
            os.makedirs(path)

    width = max(4, len(str(images.first_index + len(images) - 1)))
    for position, index in enumerate(images.indices):
        name = '%0*d.png' % (width, index)
        _write_png(os.path.join(directory, IMAGES, name), images.slices[position], images.bit_depth)
        if labels.annotated[position]:
            _write_png(os.path.join(directory, MASKS, name), labels.masks[position], 16)

    with open(os.path.join(directory, MANIFEST), 'w') as f:
        f.write('id %s\n' % images.stack_id)
        for pix, name in zip(labels.pix, labels.class_names):
            f.write('class %d %s\n' % (pix, name))

    log.info('wrote stack %s to %s', images.stack_id, directory)
