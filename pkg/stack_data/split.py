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

"""Train/validation/test splits over one ordered stack.

Four strategies decide where the training slices come from:

    RandomOrdered  uniform draw over the whole stack, sorted ascending
    InitialSeq     contiguous block starting at the first slice
    MidRand        uniform draw from the second half, sorted ascending
    MidSeq         contiguous block starting at the middle slice

|train| = floor(train_frac * N) and |validation| =
ceil(val_frac * (N - |train|)), drawn at random from the non-training
slices; everything else is test.
"""

import enum
import logging
import math
import re

import numpy as np

from tensor_engine.rng import Stream

log = logging.getLogger(__name__)

MIN_SLICES = 10
UNIVERSES = ('all', 'annotated')


class SplitError(ValueError):
    """The requested split cannot be drawn from this stack."""


class Strategy(enum.Enum):
    RANDOM_ORDERED = 'RandomOrdered'
    INITIAL_SEQ = 'InitialSeq'
    MID_RAND = 'MidRand'
    MID_SEQ = 'MidSeq'

    @classmethod
    def parse(cls, text):
        if isinstance(text, cls):
            return text
        wanted = re.sub(r'[-_,\s]', '', text).lower()
        for strategy in cls:
            if strategy.value.lower() == wanted:
                return strategy
        raise ValueError('unknown split strategy %r (expected one of %s)' % (
            text, ', '.join(s.value for s in cls)))

    @property
    def random(self):
        return self in (Strategy.RANDOM_ORDERED, Strategy.MID_RAND)


class SplitPlan(object):
    """Train, validation and test index lists for one stack."""

    def __init__(self, strategy, train, validation, test, seed=0, universe='all'):
        self.strategy = Strategy.parse(strategy)
        self.train = [int(i) for i in train]
        self.validation = [int(i) for i in validation]
        self.test = [int(i) for i in test]
        self.seed = seed
        self.universe = universe

    def __len__(self):
        return len(self.train) + len(self.validation) + len(self.test)

    def check(self, n):
        """Raise SplitError unless the three sets partition range(n) and
        train is strictly ascending."""
        if any(b <= a for a, b in zip(self.train, self.train[1:])):
            raise SplitError('train indices are not strictly ascending')
        together = self.train + self.validation + self.test
        if sorted(together) != list(range(n)):
            raise SplitError('train/validation/test do not partition %d slices' % n)

    def write(self, path):
        with open(path, 'w') as f:
            f.write('# train/validation/test split, one index list per line\n')
            f.write('strategy %s\n' % self.strategy.value)
            f.write('seed %d\n' % self.seed)
            f.write('universe %s\n' % self.universe)
            for name in ('train', 'validation', 'test'):
                f.write(' '.join([name] + [str(i) for i in getattr(self, name)]) + '\n')

    def __eq__(self, other):
        return isinstance(other, SplitPlan) and \
            (self.strategy, self.train, self.validation, self.test, self.seed, self.universe) == \
            (other.strategy, other.train, other.validation, other.test, other.seed, other.universe)

    def __ne__(self, other):
        return not self == other

    def __repr__(self):
        return 'SplitPlan(%s, train=%d, validation=%d, test=%d)' % (
            self.strategy.value, len(self.train), len(self.validation), len(self.test))


def read_plan(path):
    fields = {}
    with open(path) as f:
        for line in f:
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            key, _, rest = line.partition(' ')
            fields[key] = rest.split()
    try:
        return SplitPlan(fields['strategy'][0], fields['train'], fields.get('validation', []),
                         fields.get('test', []), int(fields.get('seed', ['0'])[0]),
                         fields.get('universe', ['all'])[0])
    except (KeyError, IndexError, ValueError) as e:
        raise SplitError('%s is not a split plan: %s' % (path, e))


def _reference(strategy, pool, n):
    """Position in `pool` where the strategy's window starts."""
    if strategy is Strategy.INITIAL_SEQ:
        return 0
    return int(np.searchsorted(pool, n // 2))


def _annotated_frac(indices, annotated):
    return float(np.mean(annotated[indices])) if len(indices) else 0.0


def _nearest_window(pool, start, size, annotated, min_frac):
    """Contiguous window of `pool` nearest `start` whose annotated fraction
    reaches min_frac, or None."""
    last = len(pool) - size
    for distance in range(len(pool)):
        for candidate in (start + distance, start - distance):
            if 0 <= candidate <= last:
                window = pool[candidate:candidate + size]
                if _annotated_frac(window, annotated) >= min_frac:
                    return window
    return None


def _draw(strategy, pool, ref, size, stream):
    if strategy is Strategy.RANDOM_ORDERED:
        return np.sort(stream.choice(pool, size))
    if strategy is Strategy.MID_RAND:
        tail = pool[min(ref, len(pool) - size):]
        return np.sort(stream.choice(tail, size))
    start = min(ref, len(pool) - size)
    return pool[start:start + size]


def sample_split(n, annotated=None, strategy=Strategy.RANDOM_ORDERED, train_frac=0.10, val_frac=0.01,
                 min_annotated_frac=0.5, seed=0, universe='all', max_retries=20):
    """Draw a SplitPlan over slices 0..n-1.

    annotated: bool per slice (None = every slice annotated).
    universe: 'all' draws training slices from every slice, 'annotated'
    only from annotated ones.

    When the annotated fraction of the training draw is below
    min_annotated_frac, random strategies redraw up to max_retries times;
    after that (or straight away for the sequential strategies) the
    contiguous window nearest the strategy's reference slice that meets
    the constraint is used. Raises SplitError when no window can.
    """
    strategy = Strategy.parse(strategy)
    if n < MIN_SLICES:
        raise SplitError('need at least %d slices, got %d' % (MIN_SLICES, n))
    if universe not in UNIVERSES:
        raise SplitError('universe must be one of %s, got %r' % (UNIVERSES, universe))
    annotated = np.ones(n, dtype=bool) if annotated is None else np.asarray(annotated, dtype=bool)
    if annotated.shape != (n,):
        raise SplitError('%d annotation flags for %d slices' % (annotated.size, n))

    n_train = int(math.floor(train_frac * n))
    if n_train < 1:
        raise SplitError('train_frac %.3g leaves no training slices out of %d' % (train_frac, n))
    pool = np.arange(n) if universe == 'all' else np.flatnonzero(annotated)
    if len(pool) < n_train:
        raise SplitError('%d training slices requested from %d candidates' % (n_train, len(pool)))
    if int(annotated[pool].sum()) < math.ceil(min_annotated_frac * n_train):
        raise SplitError('only %d annotated slices; %d training slices need %.0f%% annotated' % (
            int(annotated[pool].sum()), n_train, 100 * min_annotated_frac))

    stream = Stream(seed, 'split/' + strategy.value)
    ref = _reference(strategy, pool, n)

    train = None
    attempts = max_retries + 1 if strategy.random else 1
    for attempt in range(attempts):
        draw = _draw(strategy, pool, ref, n_train, stream.split('train-%d' % attempt))
        if _annotated_frac(draw, annotated) >= min_annotated_frac:
            train = draw
            break
        log.debug('%s draw %d is %.0f%% annotated; retrying', strategy.value, attempt,
                  100 * _annotated_frac(draw, annotated))
    if train is None:
        train = _nearest_window(pool, min(ref, len(pool) - n_train), n_train, annotated, min_annotated_frac)
        if train is None:
            raise SplitError('no %d-slice window is %.0f%% annotated' % (n_train, 100 * min_annotated_frac))
        log.info('%s fell back to slices %d..%d to meet the annotation constraint',
                 strategy.value, train[0], train[-1])

    rest = np.setdiff1d(np.arange(n), train)
    n_val = int(math.ceil(val_frac * len(rest)))
    validation = np.sort(stream.split('validation').choice(rest, n_val)) if n_val else np.array([], int)
    test = np.setdiff1d(rest, validation)

    plan = SplitPlan(strategy, train, validation, test, seed, universe)
    plan.check(n)
    return plan
