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

"""Ordered-scan training and evaluation.

Training walks each stack's training slices in ascending index order, in
batches of config.batch_size consecutive slices. Inside a batch slices go
through the model one at a time so each one can merge the previous scan's
maps; the optimizer steps once per batch on the summed loss of the
annotated slices. The propagation state is reset at the start of every
epoch and at every stack boundary, and carries across batch boundaries
within a stack.
"""

import collections
import csv
import logging
import time

import numpy as np

from metrics_losses.losses import get_loss
from metrics_losses.metrics import evaluate_planes
from model_zoo.graph import DEPTH
from model_zoo.zoo import propagation_shapes
from stack_data.augment import AugmentationParams, augment_pair
from stack_data.preprocess import threshold_prediction
from tensor_engine.optim import Adam
from tensor_engine.rng import Stream
from tensor_engine.tensor import Tensor, backward, no_grad
from train_eval.config import TEST_ORDERS
from train_eval.state import PropagationState, StateError

log = logging.getLogger(__name__)

# a training or test run over one stack: (PreparedStack, SplitPlan)
Run = collections.namedtuple('Run', ['stack', 'plan'])


def _slice_input(stack, index):
    return stack.images[index:index + 1], stack.planes[index:index + 1]


def _run_forward(model, x, state, training=False, stream=None, hook=None, index=None, detach=True):
    if not model.propagated_layers:
        return model.forward(x, training=training, stream=stream, hook=hook)

    if state is None:
        raise StateError('%s needs a propagation state' % model.architecture)
    state.check(model, propagation_shapes(model, x.shape[2], x.shape[3], x.shape[0]))
    result = model.forward(x, previous=state.maps, training=training, stream=stream, hook=hook)
    state.advance(result.merged, index, detach)
    return result


def forward_with_state(model, x, state, training=False, stream=None, hook=None, index=None, detach=True):
    """Run one slice through `model`, merging with and then updating `state`.

    x: Tensor or array [1, C, H, W]. Returns (P_raw, state); `state` is
    updated in place to hold this slice's merged maps. Models without
    propagated layers leave it untouched.
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x), dtype=model.dtype)
    result = _run_forward(model, x, state, training, stream, hook, index, detach)
    return result.p_raw, state


def _batches(indices, size):
    for start in range(0, len(indices), size):
        yield indices[start:start + size]


def _grad_norm(params):
    total = 0.0
    for param in params.values():
        if param.grad is not None:
            total += float(np.sum(np.square(param.grad, dtype=np.float64)))
    return np.sqrt(total)


EpochResult = collections.namedtuple('EpochResult', [
    'loss', 'depth_losses', 'steps', 'skipped', 'max_grad_norm', 'state'])


def train_epoch(model, runs, config, optimizer, stream, epoch=0, hook=None, augmentation=None):
    """One pass over every run's training slices.

    hook(event, info) receives 'reset' (stack_id), 'batch' (stack_id,
    indices, loss, stepped) and 'slice' (stack_id, index, loss) events.
    Returns an EpochResult whose loss is the mean slice loss over the
    annotated training slices.
    """
    loss_fn = get_loss(config.loss)
    augmentation = augmentation or AugmentationParams()
    state = PropagationState(phase='train')

    slice_losses = []
    depth_totals = collections.defaultdict(list)
    steps = skipped = 0
    max_norm = 0.0

    for stack, plan in runs:
        state.reset(stack.stack_id)
        if hook is not None:
            hook('reset', {'stack_id': stack.stack_id, 'epoch': epoch})

        for batch in _batches(plan.train, config.batch_size):
            model.zero_grad()
            total = None
            for index in batch:
                x, y = _slice_input(stack, index)
                slice_stream = stream.split('epoch-%d/%s/slice-%d' % (epoch, stack.stack_id, index))
                if config.augment:
                    image, planes = augment_pair(x[0], y[0], augmentation, slice_stream.split('augment'))
                    x, y = image[None], planes[None]

                result = _run_forward(model, Tensor(x, dtype=model.dtype), state, training=True,
                                      stream=slice_stream, index=index, detach=config.detach_state)
                if not stack.annotated[index]:
                    continue

                if model.deep_supervision and result.heads:
                    head_losses = collections.OrderedDict(
                        (depth, loss_fn(p, y)) for depth, p in result.heads.items())
                    loss = None
                    for depth, value in head_losses.items():
                        depth_totals[depth].append(value.item())
                        loss = value if loss is None else loss + value
                    loss = loss * (1.0 / len(head_losses))
                else:
                    loss = loss_fn(result.p_raw, y)

                slice_losses.append(loss.item())
                if hook is not None:
                    hook('slice', {'stack_id': stack.stack_id, 'index': index, 'loss': loss.item()})
                total = loss if total is None else total + loss

            stepped = total is not None
            if stepped:
                backward(total)
                max_norm = max(max_norm, _grad_norm(optimizer.params))
                optimizer.step()
                steps += 1
            else:
                skipped += 1
            if not config.detach_state:
                # gradients never cross a batch boundary
                state.detach()
            if hook is not None:
                hook('batch', {'stack_id': stack.stack_id, 'indices': list(batch),
                               'loss': total.item() if stepped else None, 'stepped': stepped})

    mean_loss = float(np.mean(slice_losses)) if slice_losses else float('nan')
    depth_losses = collections.OrderedDict(
        (depth, float(np.mean(values))) for depth, values in sorted(depth_totals.items()))
    return EpochResult(mean_loss, depth_losses, steps, skipped, max_norm, state)


class RunRecord(object):
    """What one training run produced."""

    def __init__(self, architecture, config, strategy=None):
        self.architecture = architecture
        self.strategy = strategy
        self.config = config.to_dict()
        self.losses = []
        self.depth_losses = collections.OrderedDict()
        self.steps = []
        self.max_grad_norms = []
        self.reports = []
        self.wall_time = 0.0
        self.counts = {}
        self.extra = {}
        self.final_state = None

    def add_epoch(self, result):
        self.losses.append(result.loss)
        for depth, value in result.depth_losses.items():
            self.depth_losses.setdefault(depth, []).append(value)
        self.steps.append(result.steps)
        self.max_grad_norms.append(result.max_grad_norm)
        self.final_state = result.state

    def record_counts(self, runs):
        """Absolute slice counts and fractions of the training runs."""
        total = sum(len(stack.annotated) for stack, _ in runs)
        train = sum(len(plan.train) for _, plan in runs)
        val = sum(len(plan.validation) for _, plan in runs)
        test = sum(len(plan.test) for _, plan in runs)
        annotated = sum(int(stack.annotated[plan.train].sum()) for stack, plan in runs)
        self.counts = {
            'slices': total, 'train': train, 'validation': val, 'test': test,
            'train_annotated': annotated,
            'train_fraction': train / float(total) if total else 0.0,
            'train_annotated_fraction': annotated / float(train) if train else 0.0,
        }

    def to_dict(self):
        return {
            'architecture': self.architecture,
            'strategy': self.strategy,
            'config': self.config,
            'losses': self.losses,
            'depth_losses': dict((str(k), v) for k, v in self.depth_losses.items()),
            'steps': self.steps,
            'max_grad_norms': self.max_grad_norms,
            'reports': [report.rows() for report in self.reports],
            'wall_time': self.wall_time,
            'counts': self.counts,
            'extra': self.extra,
        }

    def write_loss_csv(self, path):
        depths = list(self.depth_losses)
        with open(path, 'w') as f:
            writer = csv.writer(f)
            writer.writerow(['epoch', 'loss'] + ['depth_%d' % d for d in depths])
            for epoch, loss in enumerate(self.losses, 1):
                writer.writerow([epoch, '%.6f' % loss] +
                                ['%.6f' % self.depth_losses[d][epoch - 1] for d in depths])

    def __repr__(self):
        last = self.losses[-1] if self.losses else float('nan')
        return 'RunRecord(%s, %d epochs, final loss %.4f)' % (self.architecture, len(self.losses), last)


def train_model(model, runs, config, hook=None, optimizer=None, strategy=None, start_epoch=0):
    """Train for config.epochs epochs -> RunRecord.

    start_epoch: index of the first epoch, for runs resumed from a
    checkpoint; per-epoch random streams are keyed by this index.
    """
    runs = [Run(*r) for r in runs]
    stream = Stream(config.seed, 'train')
    optimizer = optimizer or Adam(model.parameters.trainable(), lr=config.lr)
    record = RunRecord(model.architecture, config, strategy)
    record.record_counts(runs)

    started = time.time()
    last = start_epoch + config.epochs
    for epoch in range(start_epoch, last):
        result = train_epoch(model, runs, config, optimizer, stream, epoch, hook)
        record.add_epoch(result)
        if not np.isfinite(result.loss):
            log.warning('%s epoch %d: loss is %s', model.architecture, epoch + 1, result.loss)
        log.info('%s epoch %d/%d: loss %.4f (%d steps)', model.architecture, epoch + 1, last,
                 result.loss, result.steps)
    record.wall_time = time.time() - started
    record.extra['epochs_done'] = last
    return record


def order_indices(indices, test_order, stream=None):
    """Test indices in the requested order: ascending, descending or a
    seeded shuffle."""
    indices = sorted(int(i) for i in indices)
    if test_order == 'ordered':
        return indices
    if test_order == 'reversed':
        return indices[::-1]
    if test_order == 'shuffled':
        if stream is None:
            raise ValueError('a shuffled test order needs a stream')
        return [int(i) for i in stream.permutation(indices)]
    raise ValueError('unknown test order %r (expected one of %s)' % (test_order, ', '.join(TEST_ORDERS)))


def predict_sequence(model, stack, order, state=None, hook=None):
    """index -> P_raw [d, H, W] for the slices in `order`, run in that order
    with one propagation state."""
    state = state if state is not None else PropagationState(stack.stack_id, phase='test')
    predictions = collections.OrderedDict()
    with no_grad():
        for index in order:
            x, _ = _slice_input(stack, index)
            p_raw, state = forward_with_state(model, x, state, index=index, hook=hook)
            predictions[index] = p_raw.data[0]
    return predictions


def evaluate(model, stack, indices, test_order='ordered', stream=None, initial_state=None, threshold=0.5,
             oracle=False, model_name=None):
    """Run the test slices in `test_order` and score the annotated ones.

    initial_state: carry a (training) state into the test sequence; by
    default each test sequence starts from an empty state.
    oracle: replace every prediction by its ground truth.
    """
    order = order_indices(indices, test_order, stream)
    if initial_state is not None:
        state = initial_state.copy(phase='test')
        state.stack_id = stack.stack_id
    else:
        state = PropagationState(stack.stack_id, phase='test')

    predictions = predict_sequence(model, stack, order, state)
    pairs = []
    for index in order:
        if not stack.annotated[index]:
            continue
        truth = stack.planes[index].astype(np.uint8)
        predicted = truth if oracle else threshold_prediction(predictions[index], threshold)
        pairs.append((predicted, truth))

    return evaluate_planes(pairs, stack.class_names, model_name or model.architecture, test_order)


def deep_supervision_trace(model, runs, config, hook=None):
    """Train with every depth head supervised; depth -> per-epoch loss of
    that head (config.loss)."""
    if not model.deep_supervision:
        raise ValueError('%s was built without deep-supervision heads' % model.architecture)
    record = train_model(model, runs, config, hook)
    trace = collections.OrderedDict((depth, record.depth_losses[depth]) for depth in range(1, DEPTH))
    return trace, record
