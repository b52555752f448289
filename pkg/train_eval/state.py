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

"""The cross-scan propagation state carried between ordered slices."""

import collections
import logging

log = logging.getLogger(__name__)

PHASES = ('train', 'test')


class StateError(ValueError):
    """A propagation state used with the wrong model, stack or phase."""


class PropagationState(object):
    """Previous scan's merged maps for one stack.

    maps: LayerId -> Tensor, empty right after a reset (the first scan of a
    stack then merges each layer with its own output).
    """

    def __init__(self, stack_id=None, phase='train'):
        if phase not in PHASES:
            raise StateError('phase must be one of %s, got %r' % (PHASES, phase))
        self.stack_id = stack_id
        self.phase = phase
        self.maps = collections.OrderedDict()
        self.last_index = None
        self.resets = 0

    @property
    def empty(self):
        return not self.maps

    def reset(self, stack_id=None):
        """Forget all stored maps; optionally move to another stack."""
        self.maps = collections.OrderedDict()
        self.last_index = None
        if stack_id is not None:
            self.stack_id = stack_id
        self.resets += 1
        log.debug('propagation state reset (%s, stack %s)', self.phase, self.stack_id)

    def check(self, model, shapes=None):
        """Raise StateError unless the stored maps fit `model`.

        shapes: optional LayerId -> expected shape, as from
        model_zoo.zoo.propagation_shapes.
        """
        if self.empty:
            return
        if set(self.maps) != set(model.propagated_layers):
            raise StateError('state holds %s, %s propagates %s' % (
                sorted(str(k) for k in self.maps), model.architecture,
                sorted(str(k) for k in model.propagated_layers)))
        if shapes is not None:
            for layer, tensor in self.maps.items():
                if tuple(tensor.shape) != tuple(shapes[layer]):
                    raise StateError('%s: stored map %s, expected %s' % (layer, list(tensor.shape), list(shapes[layer])))

    def advance(self, merged, index=None, detach=True):
        """Store this scan's merged maps for the next one."""
        self.maps = collections.OrderedDict(
            (layer, tensor.detach() if detach else tensor) for layer, tensor in merged.items())
        self.last_index = index

    def detach(self):
        self.maps = collections.OrderedDict((layer, t.detach()) for layer, t in self.maps.items())

    def copy(self, phase=None):
        other = PropagationState(self.stack_id, phase or self.phase)
        other.maps = collections.OrderedDict(self.maps)
        other.last_index = self.last_index
        return other

    def __repr__(self):
        return 'PropagationState(%s, stack=%r, %d maps, last=%r)' % (
            self.phase, self.stack_id, len(self.maps), self.last_index)
