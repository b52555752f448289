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

"""An MRJob that runs an experiment's repetitions and averages them.

Each input line is one job from train_eval.experiment.make_jobs. The
mapper trains and evaluates it; the reducer averages metric rows and loss
curves over repetitions and passes run records through.
"""

import collections
import logging
import os
import tempfile

import numpy as np
import simplejson as json
from mrjob.job import MRJob
from mrjob.protocol import JSONValueProtocol
from mrjob.step import MRStep

from metrics_losses.metrics import CSV_FIELDS, METRICS, write_rows
from train_eval.experiment import execute_run, make_jobs

log = logging.getLogger(__name__)

SWEEP_FIELDS = CSV_FIELDS + ('repetitions',)

SweepResult = collections.namedtuple('SweepResult', ['rows', 'curves', 'records'])


def _plain(value):
    """NaN -> None so every value survives a JSON round trip."""
    if isinstance(value, float) and np.isnan(value):
        return None
    return value


def _nanmean(values):
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else float('nan')


class ExperimentSweep(MRJob):
    """Fan (architecture, strategy, repetition) jobs out to mappers."""

    INPUT_PROTOCOL = JSONValueProtocol

    def sweep_mapper(self, _, job):
        """Run one job, yielding its metric rows, its loss curve and its
        record, keyed so repetitions of the same run meet in one reducer
        call."""
        record = execute_run(job)
        model = '%s/%s' % (job['architecture'], job['strategy'])

        for report in record.reports:
            for position, row in enumerate(report.rows()):
                yield (['row', model, row['test_order'], position],
                       dict((k, _plain(v)) for k, v in row.items()))

        yield ['curve', model], [_plain(loss) for loss in record.losses]

        summary = record.to_dict()
        summary['reports'] = None
        yield ['record', model, job['repetition']], json.loads(json.dumps(summary, ignore_nan=True))

    def average_reducer(self, key, values):
        """Average rows and curves over repetitions; records pass through."""
        kind = key[0]
        values = list(values)

        if kind == 'row':
            row = dict(values[0])
            for metric in METRICS:
                row[metric] = _plain(_nanmean([v[metric] for v in values]))
            for field in ('pred_pixels', 'true_pixels'):
                row[field] = int(round(np.mean([v[field] for v in values])))
            row['repetitions'] = len(values)
            yield key, row
        elif kind == 'curve':
            epochs = max(len(curve) for curve in values)
            yield key, [_plain(_nanmean([c[e] for c in values if e < len(c)])) for e in range(epochs)]
        else:
            for value in values:
                yield key, value

    def steps(self):
        return [MRStep(mapper=self.sweep_mapper, reducer=self.average_reducer)]


def collect(pairs):
    """Sort sweep output into a SweepResult.

    rows: averaged metric rows ordered by model, test order and class;
    curves: model -> mean loss per epoch; records: run summaries.
    """
    rows, curves, records = [], collections.OrderedDict(), []
    for key, value in sorted(pairs, key=lambda kv: kv[0]):
        if key[0] == 'row':
            for metric in METRICS:
                if value[metric] is None:
                    value[metric] = float('nan')
            rows.append(value)
        elif key[0] == 'curve':
            curves[key[1]] = [float('nan') if v is None else v for v in value]
        else:
            records.append(value)
    return SweepResult(rows, curves, records)


def run_experiment(spec, out_csv=None, runner='inline'):
    """Run every job of `spec` through ExperimentSweep -> SweepResult.

    runner: mrjob runner name; 'local' runs the mappers in parallel
    subprocesses. out_csv: also write the averaged rows there.
    """
    jobs = make_jobs(spec)
    log.info('experiment %s: %d job(s) on the %s runner', spec.name, len(jobs), runner)

    fd, path = tempfile.mkstemp(prefix='numsnet-%s-' % spec.name, suffix='.json')
    try:
        with os.fdopen(fd, 'w') as f:
            for job in jobs:
                f.write(json.dumps(job) + '\n')

        sweep = ExperimentSweep(['-r', runner, '--no-conf', path])
        with sweep.make_runner() as job_runner:
            job_runner.run()
            result = collect(sweep.parse_output(job_runner.cat_output()))
    finally:
        os.remove(path)

    if out_csv:
        write_rows(out_csv, result.rows, SWEEP_FIELDS)
        log.info('wrote %d averaged row(s) to %s', len(result.rows), out_csv)
    return result


if __name__ == '__main__':
    ExperimentSweep.run()
