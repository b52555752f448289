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

"""Segmentation metrics over binary class planes, and their reports.

Every metric takes P (prediction) and G (ground truth) planes shaped
[d, H, W] for one slice and returns per-class values plus their mean.
Precision and recall are undefined (NaN) for a class whose denominator is
empty; undefined values are left out of every mean rather than counted
as zero.
"""

import collections
import csv
import logging

import numpy as np

from tensor_engine.errors import ShapeError

log = logging.getLogger(__name__)

SCHEMA = 'numsnet-eval/1'
AGGREGATION = 'per slice per class, then mean over annotated test slices, then mean over classes'
METRICS = ('Pr', 'Re', 'IoU', 'dice_smoothed', 'dice_raw')
CSV_FIELDS = ('schema', 'model', 'test_order', 'class') + METRICS + ('slices', 'pred_pixels', 'true_pixels')

MetricValue = collections.namedtuple('MetricValue', ['per_class', 'mean'])


def _counts(p, g):
    p = np.asarray(p)
    g = np.asarray(g)
    if p.shape != g.shape:
        raise ShapeError('planes', 'prediction %s and ground truth %s differ' % (list(p.shape), list(g.shape)))
    if p.ndim == 2:
        p, g = p[None], g[None]
    p = p.astype(bool)
    g = g.astype(bool)
    axes = tuple(range(1, p.ndim))
    inter = np.logical_and(p, g).sum(axis=axes).astype(np.int64)
    return inter, p.sum(axis=axes).astype(np.int64), g.sum(axis=axes).astype(np.int64)


def _ratio(numerator, denominator, empty):
    out = np.full(numerator.shape, empty, dtype=np.float64)
    defined = denominator > 0
    out[defined] = numerator[defined] / denominator[defined].astype(np.float64)
    return out


def _value(per_class):
    defined = per_class[~np.isnan(per_class)]
    return MetricValue(per_class, float(defined.mean()) if defined.size else float('nan'))


def iou(p, g):
    """|P & G| / |P | G|; both empty counts as 1."""
    inter, n_p, n_g = _counts(p, g)
    return _value(_ratio(inter, n_p + n_g - inter, 1.0))


def dice(p, g):
    """(2|P & G| + 1) / (|P| + |G| + 1)."""
    inter, n_p, n_g = _counts(p, g)
    return _value((2.0 * inter + 1.0) / (n_p + n_g + 1.0))


def dice_raw(p, g):
    """2|P & G| / (|P| + |G|), without smoothing; both empty counts as 1."""
    inter, n_p, n_g = _counts(p, g)
    return _value(_ratio(2 * inter, n_p + n_g, 1.0))


def precision(p, g):
    inter, n_p, _ = _counts(p, g)
    return _value(_ratio(inter, n_p, np.nan))


def recall(p, g):
    inter, _, n_g = _counts(p, g)
    return _value(_ratio(inter, n_g, np.nan))


_METRIC_FUNCTIONS = collections.OrderedDict([
    ('Pr', precision),
    ('Re', recall),
    ('IoU', iou),
    ('dice_smoothed', dice),
    ('dice_raw', dice_raw),
])


class EvalReport(object):
    """Per-class metrics in percent for one model on one test sequence.

    per_class: metric -> list of d values (NaN where never defined);
    means: metric -> mean over classes with a defined value.
    """

    def __init__(self, class_names, per_class, pred_pixels, true_pixels, slices, model='', test_order='ordered'):
        self.class_names = list(class_names)
        self.per_class = collections.OrderedDict((m, [float(v) for v in per_class[m]]) for m in METRICS)
        self.pred_pixels = [int(c) for c in pred_pixels]
        self.true_pixels = [int(c) for c in true_pixels]
        self.slices = int(slices)
        self.model = model
        self.test_order = test_order

    @property
    def means(self):
        out = collections.OrderedDict()
        for metric, values in self.per_class.items():
            defined = [v for v in values if not np.isnan(v)]
            out[metric] = float(np.mean(defined)) if defined else float('nan')
        return out

    def rows(self):
        """One dict per class and a final 'mean' row, CSV_FIELDS keys."""
        rows = []
        for k, name in enumerate(self.class_names):
            row = collections.OrderedDict([('schema', SCHEMA), ('model', self.model),
                                           ('test_order', self.test_order), ('class', name)])
            for metric in METRICS:
                row[metric] = self.per_class[metric][k]
            row['slices'] = self.slices
            row['pred_pixels'] = self.pred_pixels[k]
            row['true_pixels'] = self.true_pixels[k]
            rows.append(row)

        mean = collections.OrderedDict([('schema', SCHEMA), ('model', self.model),
                                        ('test_order', self.test_order), ('class', 'mean')])
        mean.update(self.means)
        mean['slices'] = self.slices
        mean['pred_pixels'] = sum(self.pred_pixels)
        mean['true_pixels'] = sum(self.true_pixels)
        rows.append(mean)
        return rows

    def __eq__(self, other):
        if not isinstance(other, EvalReport):
            return False
        return np.array_equal(self._table(), other._table(), equal_nan=True) and \
            (self.class_names, self.pred_pixels, self.true_pixels, self.slices, self.model, self.test_order) == \
            (other.class_names, other.pred_pixels, other.true_pixels, other.slices, other.model, other.test_order)

    def __ne__(self, other):
        return not self == other

    def _table(self):
        return np.array([self.per_class[m] for m in METRICS], dtype=np.float64)

    def __repr__(self):
        means = self.means
        return 'EvalReport(%s, %s, Dice %.2f%%, IoU %.2f%%, %d slices)' % (
            self.model or '?', self.test_order, means['dice_smoothed'], means['IoU'], self.slices)


def evaluate_planes(pairs, class_names, model='', test_order='ordered'):
    """Build an EvalReport from (P, G) plane pairs, one per annotated test
    slice. Each metric is computed per slice per class, averaged over the
    slices where it is defined, then over classes."""
    d = len(class_names)
    values = dict((m, [[] for _ in range(d)]) for m in METRICS)
    pred_pixels = np.zeros(d, dtype=np.int64)
    true_pixels = np.zeros(d, dtype=np.int64)

    slices = 0
    for p, g in pairs:
        if np.shape(p)[0] != d:
            raise ShapeError('planes', '%d planes for %d classes' % (np.shape(p)[0], d))
        slices += 1
        for metric, fn in _METRIC_FUNCTIONS.items():
            for k, v in enumerate(fn(p, g).per_class):
                if not np.isnan(v):
                    values[metric][k].append(v)
        _, n_p, n_g = _counts(p, g)
        pred_pixels += n_p
        true_pixels += n_g

    per_class = {}
    for metric in METRICS:
        per_class[metric] = [100.0 * np.mean(v) if v else float('nan') for v in values[metric]]

    if not slices:
        log.warning('no annotated test slices to evaluate for %s', model or 'model')
    return EvalReport(class_names, per_class, pred_pixels, true_pixels, slices, model, test_order)


def _format(value):
    if isinstance(value, float):
        return '' if np.isnan(value) else '%.4f' % value
    return value


def write_rows(path, rows, fields=CSV_FIELDS):
    """Write report rows (dicts keyed by `fields`) under the schema header."""
    with open(path, 'w') as f:
        f.write('# schema %s\n' % SCHEMA)
        f.write('# aggregation: %s\n' % AGGREGATION)
        f.write('# values in percent; empty = undefined for every slice\n')
        writer = csv.writer(f)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_format(row[field]) for field in fields])


def write_csv(path, reports):
    """Write reports as CSV, one row per (model, class) plus mean rows."""
    write_rows(path, [row for report in reports for row in report.rows()])
    log.info('wrote %d report(s) to %s', len(reports), path)


def read_report_rows(path):
    """Rows of a CSV written by write_csv, as dicts; metric values are
    floats (NaN for empty cells)."""
    with open(path) as f:
        lines = [line for line in f if not line.startswith('#')]
    rows = []
    for row in csv.DictReader(lines):
        if row['schema'] != SCHEMA:
            raise ValueError('%s: unsupported report schema %r' % (path, row['schema']))
        for metric in METRICS:
            row[metric] = float(row[metric]) if row[metric] else float('nan')
        for field in ('slices', 'pred_pixels', 'true_pixels'):
            row[field] = int(row[field])
        rows.append(row)
    return rows
