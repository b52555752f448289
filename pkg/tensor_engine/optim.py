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

"""Adam with bias correction.

The update follows the Keras/TensorFlow formulation, where eps is added to
sqrt(v) and the bias corrections are folded into the step size:

    lr_t = lr * sqrt(1 - beta2^t) / (1 - beta1^t)
    param -= lr_t * m / (sqrt(v) + eps)
"""

import logging

import numpy as np

from tensor_engine.errors import ShapeError

log = logging.getLogger(__name__)

DEFAULT_LR = 1e-3
DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-7


class AdamState(object):
    """Moment buffers and step counter, keyed by parameter name."""

    def __init__(self, lr=DEFAULT_LR, beta1=DEFAULT_BETA1, beta2=DEFAULT_BETA2, eps=DEFAULT_EPS):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def hyperparameters(self):
        return (self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params, grads, state):
    """Apply one Adam update in place.

    params: name -> Tensor; grads: name -> array (a missing or None grad
    leaves the parameter and its moments untouched).
    """
    for name, param in params.items():
        grad = grads.get(name)
        if grad is not None and np.shape(grad) != param.shape:
            raise ShapeError('parameter', '%s: gradient shape %s does not match %s' % (
                name, list(np.shape(grad)), list(param.shape)))

    state.t += 1
    step_size = state.lr * np.sqrt(1.0 - state.beta2 ** state.t) / (1.0 - state.beta1 ** state.t)

    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue

        if name not in state.m:
            state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        elif state.m[name].shape != param.shape:
            raise ShapeError('parameter', '%s: moment shape %s does not match %s' % (
                name, list(state.m[name].shape), list(param.shape)))

        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * (grad * grad)

        param.data -= (step_size * m / (np.sqrt(v) + state.eps)).astype(param.dtype)


class Adam(object):
    """Adam over a fixed set of named parameters, reading their .grad."""

    def __init__(self, params, state=None, lr=DEFAULT_LR):
        self.params = dict(params)
        self.state = state if state is not None else AdamState(lr=lr)

    def zero_grad(self):
        for param in self.params.values():
            param.zero_grad()

    def step(self):
        grads = dict((name, param.grad) for name, param in self.params.items())
        adam_step(self.params, grads, self.state)
        log.debug('adam step %d', self.state.t)
