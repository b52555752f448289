import math
import os
import shutil
import tempfile
import unittest
from io import BytesIO
from unittest import TestCase

import simplejson as json

from metrics_losses.metrics import METRICS, read_report_rows
from train_eval.config import ExperimentSpec
from train_eval.experiment import make_jobs
from train_eval.sweep import SWEEP_FIELDS, ExperimentSweep, collect, run_experiment

MODEL = 'numsnet/MidSeq'


def tiny_spec(**changes):
    settings = dict(
        name='tiny', architectures=['unet', 'numsnet'], strategies=['MidSeq'], repetitions=2, seed=3,
        synth={'n': 20, 'classes': 3, 'extent': 32}, width_divisor=16, train_frac=0.25,
        train={'epochs': 1, 'batch_size': 5, 'augment': False},
    )
    settings.update(changes)
    return ExperimentSpec(**settings)


def metric_row(dice, pred_pixels):
    row = dict((metric, 50.0) for metric in METRICS)
    row.update({'schema': 'numsnet-eval/1', 'model': MODEL, 'test_order': 'ordered', 'class': 'GGO',
                'slices': 14, 'pred_pixels': pred_pixels, 'true_pixels': 10})
    row['dice_smoothed'] = dice
    row['Pr'] = None
    return row


class ReducerTest(TestCase):

    def test_rows_average_over_repetitions(self):
        """Metrics average, undefined values drop out, pixels round"""
        job = ExperimentSweep([])
        rows = [metric_row(80.0, 3), metric_row(90.0, 4)]
        rows[1]['Re'] = None
        [(key, row)] = list(job.average_reducer(['row', MODEL, 'ordered', 0], rows))

        self.assertEqual(row['dice_smoothed'], 85.0)
        self.assertEqual(row['Re'], 50.0)
        self.assertIsNone(row['Pr'])
        self.assertEqual(row['pred_pixels'], 4)
        self.assertEqual(row['repetitions'], 2)

    def test_curves_average_per_epoch(self):
        """Loss curves average epoch by epoch"""
        job = ExperimentSweep([])
        [(_, curve)] = list(job.average_reducer(['curve', MODEL], [[1.0, 0.5], [0.0, None, 0.2]]))
        self.assertEqual(curve, [0.5, 0.5, 0.2])

    def test_records_pass_through(self):
        """Run records are not merged"""
        job = ExperimentSweep([])
        records = [{'losses': [1.0]}, {'losses': [2.0]}]
        self.assertEqual([v for _, v in job.average_reducer(['record', MODEL, 0], records)], records)

    def test_collect_restores_nan(self):
        """None metric values come back as NaN"""
        result = collect([(['curve', MODEL], [1.0, None]),
                          (['row', MODEL, 'ordered', 0], metric_row(80.0, 3))])
        self.assertTrue(math.isnan(result.rows[0]['Pr']))
        self.assertTrue(math.isnan(result.curves[MODEL][1]))


class SweepTest(TestCase):

    def test_smoke(self):
        """Does a complete sweep over two architectures and two repetitions"""
        lines = ''.join(json.dumps(job) + '\n' for job in make_jobs(tiny_spec()))
        job = ExperimentSweep(['-r', 'inline', '--no-conf', '-'])
        job.sandbox(stdin=BytesIO(lines.encode('utf_8')))

        with job.make_runner() as runner:
            runner.run()
            result = collect(job.parse_output(runner.cat_output()))

        self.assertEqual(len(result.rows), 2 * 4)
        self.assertEqual(set(r['model'] for r in result.rows), {'unet/MidSeq', MODEL})
        self.assertEqual([r['class'] for r in result.rows[:4]], ['GGO', 'Con', 'Lung', 'mean'])
        for row in result.rows:
            self.assertEqual(row['repetitions'], 2)
        self.assertEqual(sorted(result.curves), [MODEL, 'unet/MidSeq'])
        self.assertEqual(len(result.records), 4)
        self.assertEqual(sorted(r['extra']['repetition'] for r in result.records), [0, 0, 1, 1])

    def test_run_experiment_writes_csv(self):
        """run_experiment averages and writes one CSV row per class"""
        tmp_dir = tempfile.mkdtemp()
        try:
            path = os.path.join(tmp_dir, 'sweep.csv')
            result = run_experiment(tiny_spec(architectures=['unet'], repetitions=1), out_csv=path)
            rows = read_report_rows(path)
            with open(path) as f:
                header = [line for line in f if not line.startswith('#')][0]
        finally:
            shutil.rmtree(tmp_dir)

        self.assertEqual(len(rows), 4)
        self.assertEqual(len(result.rows), 4)
        self.assertEqual(header.strip().split(','), list(SWEEP_FIELDS))
        self.assertEqual(rows[-1]['class'], 'mean')
        self.assertEqual(rows[-1]['repetitions'], '1')


if __name__ == '__main__':
    unittest.main()
