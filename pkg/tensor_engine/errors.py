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

"""Exceptions raised by the tensor engine."""


class EngineError(Exception):
    """Base class for tensor engine errors."""


class ShapeError(EngineError, ValueError):
    """An operand has the wrong extent along some axis.

    `axis` names the offending axis ('batch', 'channel', 'height', 'width',
    'kernel', 'rank', ...) so callers can report it without parsing text.
    """

    def __init__(self, axis, message):
        super(ShapeError, self).__init__('%s: %s' % (axis, message))
        self.axis = axis


class DTypeError(EngineError, TypeError):
    """Operands mix float32 and float64, or use an unsupported dtype."""


class GraphError(EngineError, ValueError):
    """backward() was called on something that is not a scalar loss."""
