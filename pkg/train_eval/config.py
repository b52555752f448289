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

"""Training and experiment configuration.

Both TrainConfig and ExperimentSpec load from YAML mappings; unknown keys
are rejected. ExperimentSpec keeps its training settings under a `train`
key:

    name: my-run
    architectures: [numsnet, unetpp]
    strategies: [MidSeq]
    synth: {n: 60, classes: 3, extent: 64}
    width_divisor: 4
    train: {epochs: 60, batch_size: 5, loss: BDL}
"""

import copy
import dataclasses
import logging
import os
from typing import Any, Dict, List, Optional

import yaml

from model_zoo.zoo import ARCHITECTURES
from stack_data.split import UNIVERSES, Strategy
from metrics_losses.losses import LOSSES

log = logging.getLogger(__name__)

DATA_ROOT_ENV = 'NUMSNET_DATA_ROOT'

TEST_ORDERS = ('ordered', 'shuffled', 'reversed')
TEST_STATES = ('fresh', 'carry')

LUNG_BATCH_SIZE = 5
HEART_BATCH_SIZE = 10


class ConfigError(ValueError):
    """An invalid or unreadable configuration."""


def data_root():
    return os.environ.get(DATA_ROOT_ENV, '')


def resolve_data_path(path):
    """Relative stack paths are taken from $NUMSNET_DATA_ROOT when set."""
    if path and not os.path.isabs(path) and data_root() and not os.path.exists(path):
        return os.path.join(data_root(), path)
    return path


def _from_mapping(cls, mapping, where):
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError('%s must be a mapping, got %s' % (where, type(mapping).__name__))
    known = set(f.name for f in dataclasses.fields(cls))
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ConfigError('%s: unknown key(s) %s' % (where, ', '.join(unknown)))
    return mapping


@dataclasses.dataclass
class TrainConfig(object):
    loss: str = 'BDL'
    epochs: int = 60
    batch_size: int = LUNG_BATCH_SIZE
    lr: float = 1e-3
    deep_supervision: bool = False
    seed: int = 0
    detach_state: bool = True
    test_state: str = 'fresh'
    augment: bool = True
    threshold: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.loss.upper() not in LOSSES:
            raise ConfigError('loss must be one of %s, got %r' % (', '.join(LOSSES), self.loss))
        self.loss = self.loss.upper()
        if self.epochs < 1:
            raise ConfigError('epochs must be >= 1, got %r' % self.epochs)
        if self.batch_size < 1:
            raise ConfigError('batch_size must be >= 1, got %r' % self.batch_size)
        if not self.lr > 0:
            raise ConfigError('lr must be positive, got %r' % self.lr)
        if self.test_state not in TEST_STATES:
            raise ConfigError('test_state must be one of %s, got %r' % (TEST_STATES, self.test_state))
        if not 0 < self.threshold < 1:
            raise ConfigError('threshold must be in (0, 1), got %r' % self.threshold)

    @classmethod
    def from_dict(cls, mapping, where='train'):
        return cls(**_from_mapping(cls, mapping, where))

    def replace(self, **changes):
        changes = dict((k, v) for k, v in changes.items() if v is not None)
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass
class ExperimentSpec(object):
    name: str = 'experiment'
    architectures: List[str] = dataclasses.field(default_factory=lambda: ['numsnet'])
    strategies: List[str] = dataclasses.field(default_factory=lambda: ['RandomOrdered'])
    repetitions: int = 1
    seed: int = 0
    data: Optional[str] = None
    synth: Dict[str, Any] = dataclasses.field(default_factory=lambda: {'n': 60, 'classes': 3, 'extent': 64})
    extent: Optional[int] = None
    num_classes: Optional[int] = None
    width_divisor: int = 1
    widths: Optional[List[int]] = None
    train_frac: float = 0.10
    val_frac: float = 0.01
    min_annotated_frac: float = 0.5
    universe: str = 'all'
    test_orders: List[str] = dataclasses.field(default_factory=lambda: ['ordered'])
    transfer: Optional[Dict[str, Any]] = None
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        self.validate()

    def validate(self):
        if not self.architectures:
            raise ConfigError('%s: no architectures' % self.name)
        for arch in self.architectures:
            if arch not in ARCHITECTURES:
                raise ConfigError('%s: unknown architecture %r' % (self.name, arch))
        try:
            self.strategies = [Strategy.parse(s).value for s in self.strategies]
        except ValueError as e:
            raise ConfigError('%s: %s' % (self.name, e))
        if self.repetitions < 1:
            raise ConfigError('%s: repetitions must be >= 1' % self.name)
        if self.width_divisor < 1:
            raise ConfigError('%s: width_divisor must be >= 1' % self.name)
        if self.widths is not None and len(self.widths) != 5:
            raise ConfigError('%s: widths must list 5 depths' % self.name)
        if self.universe not in UNIVERSES:
            raise ConfigError('%s: universe must be one of %s' % (self.name, UNIVERSES))
        for order in self.test_orders:
            if order not in TEST_ORDERS:
                raise ConfigError('%s: unknown test order %r' % (self.name, order))
        if self.data is None:
            unknown = sorted(set(self.synth) - {'n', 'classes', 'extent', 'seed'})
            if unknown:
                raise ConfigError('%s: unknown synth key(s) %s' % (self.name, ', '.join(unknown)))
        if self.transfer is not None:
            unknown = sorted(set(self.transfer) - {'source_classes', 'pretrain_epochs', 'checkpoint'})
            if unknown:
                raise ConfigError('%s: unknown transfer key(s) %s' % (self.name, ', '.join(unknown)))

    @classmethod
    def from_dict(cls, mapping, where='experiment'):
        return cls(**_from_mapping(cls, copy.deepcopy(mapping), where))

    def to_dict(self):
        out = dataclasses.asdict(self)
        out['train'] = self.train.to_dict()
        return out


def load_yaml(path):
    try:
        with open(path) as f:
            return yaml.safe_load(f) or {}
    except (IOError, OSError) as e:
        raise ConfigError('cannot read %s: %s' % (path, e))
    except yaml.YAMLError as e:
        raise ConfigError('%s is not valid YAML: %s' % (path, e))


def load_train_config(path):
    return TrainConfig.from_dict(load_yaml(path), path)


_SYNTH_LUNG = {'n': 60, 'classes': 3, 'extent': 64}
_SYNTH_TRAIN = {'epochs': 60, 'batch_size': LUNG_BATCH_SIZE, 'loss': 'BDL', 'augment': False}

PRESETS = {
    # architecture comparison, averaged over five random ordered draws
    'exp-A': {
        'name': 'exp-A',
        'architectures': list(ARCHITECTURES),
        'strategies': ['RandomOrdered'],
        'repetitions': 5,
        'synth': dict(_SYNTH_LUNG),
        'width_divisor': 4,
        'train': dict(_SYNTH_TRAIN),
    },
    # where the training slices come from
    'exp-B': {
        'name': 'exp-B',
        'architectures': ['numsnet'],
        'strategies': ['InitialSeq', 'MidRand', 'MidSeq'],
        'synth': dict(_SYNTH_LUNG),
        'width_divisor': 4,
        'train': dict(_SYNTH_TRAIN),
    },
    # nested-only against all up-sampling layers propagated
    'exp-C': {
        'name': 'exp-C',
        'architectures': ['numsnet', 'numsall'],
        'strategies': ['MidSeq'],
        'synth': dict(_SYNTH_LUNG),
        'width_divisor': 4,
        'train': dict(_SYNTH_TRAIN),
    },
    # 3-class pretraining, head replaced for 7 classes, fine-tuned
    'exp-D': {
        'name': 'exp-D',
        'architectures': ['numsnet'],
        'strategies': ['RandomOrdered'],
        'synth': {'n': 60, 'classes': 7, 'extent': 64},
        'width_divisor': 4,
        'transfer': {'source_classes': 3, 'pretrain_epochs': 60},
        'train': dict(_SYNTH_TRAIN, batch_size=HEART_BATCH_SIZE),
    },
}


def load_experiment(name_or_path, **overrides):
    """A preset name or a YAML file, optionally layered over a preset
    named by its `preset` key; `overrides` replace top-level keys."""
    if name_or_path in PRESETS:
        mapping = copy.deepcopy(PRESETS[name_or_path])
    else:
        mapping = load_yaml(name_or_path)
        if not isinstance(mapping, dict):
            raise ConfigError('%s must hold a mapping' % name_or_path)
        base = mapping.pop('preset', None)
        if base is not None:
            if base not in PRESETS:
                raise ConfigError('%s: unknown preset %r' % (name_or_path, base))
            merged = copy.deepcopy(PRESETS[base])
            train = dict(merged.get('train', {}), **mapping.pop('train', {}))
            merged.update(mapping)
            merged['train'] = train
            mapping = merged

    for key, value in overrides.items():
        if value is None:
            continue
        if key in set(f.name for f in dataclasses.fields(ExperimentSpec)):
            mapping[key] = value
        else:
            mapping.setdefault('train', {})[key] = value

    spec = ExperimentSpec.from_dict(mapping, str(name_or_path))
    log.info('experiment %s: %s x %s, %d repetition(s)', spec.name, spec.architectures,
             spec.strategies, spec.repetitions)
    return spec
