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

"""One experiment run: data, split, model, training and evaluation.

An experiment fans out into one job per (architecture, strategy,
repetition). Each job is a plain dict so it can travel as a JSON line
through the sweep; execute_run turns it back into a trained, evaluated
RunRecord.
"""

import logging

from model_zoo.checkpoint import load_checkpoint, transfer_adapt
from model_zoo.zoo import build_model, scaled_widths
from stack_data.preprocess import prepare_stack
from stack_data.split import sample_split
from stack_data.stack import load_stack
from stack_data.synth import synth_stack
from tensor_engine.rng import Stream
from train_eval.config import ExperimentSpec, resolve_data_path
from train_eval.harness import Run, evaluate, train_model

log = logging.getLogger(__name__)


def make_jobs(spec):
    """One job dict per (architecture, strategy, repetition)."""
    spec_dict = spec.to_dict()
    jobs = []
    for architecture in spec.architectures:
        for strategy in spec.strategies:
            for repetition in range(spec.repetitions):
                jobs.append({
                    'spec': spec_dict,
                    'architecture': architecture,
                    'strategy': strategy,
                    'repetition': repetition,
                })
    return jobs


def _extent(value):
    if value is None:
        return None
    if isinstance(value, int):
        return (value, value)
    return tuple(value)


def load_prepared(spec, classes=None):
    """The experiment's stack, model-ready.

    classes: generate the synthetic stack with this many classes instead
    of spec.synth['classes'] (used for transfer pretraining).
    """
    if spec.data is not None and classes is None:
        images, labels = load_stack(resolve_data_path(spec.data))
    else:
        synth = spec.synth
        images, labels = synth_stack(synth.get('n', 60), classes or synth.get('classes', 3),
                                     seed=synth.get('seed', spec.seed),
                                     extent=_extent(synth.get('extent', 64)))
    return prepare_stack(images, labels, extent=_extent(spec.extent),
                         num_classes=None if classes else spec.num_classes)


def _split(spec, stack, strategy, seed):
    return sample_split(len(stack.annotated), stack.annotated, strategy,
                        train_frac=spec.train_frac, val_frac=spec.val_frac,
                        min_annotated_frac=spec.min_annotated_frac, seed=seed, universe=spec.universe)


def _build(spec, architecture, num_classes, config, seed):
    widths = spec.widths or scaled_widths(architecture, spec.width_divisor)
    return build_model(architecture, widths=widths, num_classes=num_classes,
                       deep_supervision=config.deep_supervision, seed=seed)


def _pretrained(spec, architecture, strategy, config, seed):
    """Source model for a transfer run, trained here or read from
    transfer['checkpoint']."""
    transfer = spec.transfer
    if transfer.get('checkpoint'):
        model = load_checkpoint(resolve_data_path(transfer['checkpoint']), architecture)
        return model, {'source': transfer['checkpoint']}

    source_classes = transfer.get('source_classes', 3)
    source = load_prepared(spec, classes=source_classes)
    plan = _split(spec, source, strategy, seed)
    model = _build(spec, architecture, source_classes, config, seed)
    pretrain = config.replace(epochs=transfer.get('pretrain_epochs', config.epochs))
    record = train_model(model, [Run(source, plan)], pretrain, strategy=strategy)
    log.info('pretrained %s on %d classes: final loss %.4f', architecture, source_classes, record.losses[-1])
    return model, {'source_classes': source_classes, 'pretrain_losses': record.losses}


def execute_run(job):
    """Train and evaluate one job -> RunRecord with one EvalReport per
    test order."""
    spec = job['spec']
    if not isinstance(spec, ExperimentSpec):
        spec = ExperimentSpec.from_dict(spec)
    architecture = job['architecture']
    strategy = job['strategy']
    repetition = job.get('repetition', 0)

    seed = spec.seed + repetition
    config = spec.train.replace(seed=seed)
    stack = load_prepared(spec)
    num_classes = len(stack.class_names)
    plan = _split(spec, stack, strategy, seed)
    runs = [Run(stack, plan)]

    extra = {}
    if spec.transfer is not None:
        source, extra = _pretrained(spec, architecture, strategy, config, seed)
        model = transfer_adapt(source, num_classes)
        cold = _build(spec, architecture, num_classes, config, seed)
        extra['cold_epoch1_loss'] = train_model(cold, runs, config.replace(epochs=1)).losses[0]
    else:
        model = _build(spec, architecture, num_classes, config, seed)

    record = train_model(model, runs, config, strategy=strategy)
    record.extra.update(extra)
    record.extra['repetition'] = repetition
    if spec.transfer is not None:
        record.extra['warm_epoch1_loss'] = record.losses[0]

    name = '%s/%s' % (architecture, strategy)
    for order in spec.test_orders:
        initial = record.final_state if config.test_state == 'carry' else None
        report = evaluate(model, stack, plan.test, order, stream=Stream(seed, 'test-order/' + order),
                          initial_state=initial, threshold=config.threshold, model_name=name)
        record.reports.append(report)
        log.info('%s rep %d, %s test order: %r', name, repetition, order, report)
    return record
