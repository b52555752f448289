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

"""Named, seedable, splittable random streams.

Every stochastic operation in the engine (weight init, dropout masks,
augmentation, split draws, test-order shuffles) takes an explicit Stream.
Streams are counter-based (numpy's Philox bit generator), keyed by the root
seed and the stream's name, so the numbers a stream produces never depend
on what other streams were asked for.
"""

import zlib

import numpy as np


def _name_key(name):
    return zlib.crc32(name.encode('utf-8'))


class Stream(object):
    """A named random stream derived from a root seed."""

    def __init__(self, seed, name='root'):
        self.seed = int(seed)
        self.name = name

        key = np.random.SeedSequence(entropy=self.seed, spawn_key=(_name_key(name),))
        self.generator = np.random.Generator(np.random.Philox(key))

    def split(self, name):
        """A child stream; splitting the same name twice gives the same
        numbers."""
        return Stream(self.seed, '%s/%s' % (self.name, name))

    def random(self, shape):
        return self.generator.random(shape)

    def uniform(self, low, high, shape=None):
        return self.generator.uniform(low, high, shape)

    def normal(self, shape, scale=1.0):
        return self.generator.normal(0.0, scale, shape)

    def choice(self, population, size):
        """Draw `size` distinct items from `population`."""
        return self.generator.choice(population, size=size, replace=False)

    def permutation(self, items):
        return self.generator.permutation(items)

    def integers(self, low, high):
        return int(self.generator.integers(low, high))

    def __repr__(self):
        return 'Stream(seed=%d, name=%r)' % (self.seed, self.name)
