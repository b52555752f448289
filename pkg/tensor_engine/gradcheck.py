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

"""Central-difference verification of the autodiff rules."""

import logging

import numpy as np

from tensor_engine.tensor import Tensor, backward, no_grad, record_branches

log = logging.getLogger(__name__)

# relative errors are measured against max(|analytic|, |numeric|, FLOOR)
FLOOR = 1e-8

# fourth-order central difference: f'(x) ~ sum(w_i * f(x + o_i * h)) / h
STENCIL_OFFSETS = (-2.0, -1.0, 1.0, 2.0)
STENCIL_WEIGHTS = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0


def _evaluate(fn, arrays):
    with no_grad(), record_branches() as branches:
        value = fn(*[Tensor(a) for a in arrays]).item()
    return value, branches


def _check_point(fn, arrays, step, max_retries):
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(fn(*leaves))
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    _, base_branches = _evaluate(fn, arrays)

    worst = 0.0
    degenerate = False
    for k, array in enumerate(arrays):
        for index in np.ndindex(array.shape):
            original = array[index]
            h = step

            # a relu kink, pool tie or clamp edge inside the stencil makes
            # the difference quotient meaningless; shrink the step until
            # every probe takes the same branches as the base point
            for attempt in range(max_retries + 1):
                values = []
                same = True
                for offset in STENCIL_OFFSETS:
                    array[index] = original + offset * h
                    value, branches = _evaluate(fn, arrays)
                    values.append(value)
                    same = same and branches == base_branches
                array[index] = original

                if same:
                    break
                if attempt < max_retries:
                    h /= 10.0
            else:
                degenerate = True

            numeric = np.dot(STENCIL_WEIGHTS, values) / h
            exact = analytic[k][index]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), FLOOR)
            worst = max(worst, error)

    return worst, degenerate


def finite_diff_check(fn, inputs, step=1e-3, tolerance=1e-4, max_retries=3, stream=None):
    """Compare backward() against central differences.

    fn: callable taking one Tensor per input and returning a scalar Tensor.
    It must be deterministic (rebuild any dropout stream inside it).

    inputs: a sequence of arrays/Tensors (converted to float64), or a
    sampler callable(stream) -> sequence. With a sampler, a point that
    fails or sits on a kink is redrawn, at most max_retries times.

    Returns the max over all input elements of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    sampler = inputs if callable(inputs) else None
    if sampler is not None and stream is None:
        raise ValueError('a sampler needs a stream to draw points from')

    attempt = 0
    while True:
        point = sampler(stream.split('point-%d' % attempt)) if sampler is not None else inputs
        arrays = [np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in point]

        error, degenerate = _check_point(fn, arrays, step, max_retries)
        if sampler is None or attempt >= max_retries or (error < tolerance and not degenerate):
            return error

        attempt += 1
        log.info('gradient check point %d rejected (error %.3g, degenerate=%s); resampling',
                 attempt, error, degenerate)
