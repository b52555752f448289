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

"""Class colour maps and mask overlays."""

import numpy as np

RED = (255, 0, 0)
GREEN = (0, 255, 0)
BLUE = (0, 0, 255)

# GGO, consolidation, lung
LUNG_COLORS = (RED, GREEN, BLUE)

HEART_COLORS = (
    (230, 25, 75),
    (60, 180, 75),
    (0, 130, 200),
    (255, 225, 25),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
)

# 205, 420 red; 500, 550 blue; 600, 820, 850 green
GROUPED_HEART_COLORS = (RED, RED, BLUE, BLUE, GREEN, GREEN, GREEN)

ALPHA = 0.5


def colors_for(num_classes, grouped_colors=False):
    if num_classes == 3:
        return LUNG_COLORS
    scheme = GROUPED_HEART_COLORS if grouped_colors else HEART_COLORS
    if num_classes > len(scheme):
        raise ValueError('no colour scheme for %d classes' % num_classes)
    return scheme[:num_classes]


def overlay(image, planes, colors, alpha=ALPHA):
    """RGB uint8 [H, W, 3]: the grayscale slice with each class blended in
    its colour; later planes are painted over earlier ones."""
    image = np.asarray(image, dtype=np.float64)
    if image.max() > 1.0:
        image = image / 255.0
    gray = np.clip(image * 255.0, 0, 255)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    for plane, color in zip(planes, colors):
        hit = np.asarray(plane).astype(bool)
        rgb[hit] = (1.0 - alpha) * rgb[hit] + alpha * np.asarray(color, dtype=np.float64)
    return np.rint(rgb).astype(np.uint8)
