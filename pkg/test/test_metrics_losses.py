import math
import os
import shutil
import tempfile
import unittest
from unittest import TestCase

import numpy as np

from metrics_losses.losses import bce_dice_loss, bce_loss, dice_loss, get_loss, soft_dice
from metrics_losses.metrics import (CSV_FIELDS, SCHEMA, dice, dice_raw, evaluate_planes, iou, precision,
                                    read_report_rows, recall, write_csv)
from tensor_engine.errors import ShapeError
from tensor_engine.tensor import Tensor

ORACLE_CASES = 1000
EXTENT = 8
SEED = 11


def brute_force(p, g):
    """Per-class metric values counted pixel by pixel."""
    out = {'iou': [], 'dice': [], 'dice_raw': [], 'precision': [], 'recall': []}
    for k in range(p.shape[0]):
        inter = union = n_p = n_g = 0
        for i in range(p.shape[1]):
            for j in range(p.shape[2]):
                a, b = bool(p[k, i, j]), bool(g[k, i, j])
                inter += a and b
                union += a or b
                n_p += a
                n_g += b
        out['iou'].append(inter / float(union) if union else 1.0)
        out['dice'].append((2.0 * inter + 1) / (n_p + n_g + 1))
        out['dice_raw'].append(2.0 * inter / (n_p + n_g) if n_p + n_g else 1.0)
        out['precision'].append(inter / float(n_p) if n_p else float('nan'))
        out['recall'].append(inter / float(n_g) if n_g else float('nan'))
    return out


class MetricTest(TestCase):

    def test_against_brute_force(self):
        """Vectorised metrics agree with pixel counting on random planes"""
        random = np.random.RandomState(SEED)
        functions = {'iou': iou, 'dice': dice, 'dice_raw': dice_raw, 'precision': precision, 'recall': recall}
        for case in range(ORACLE_CASES):
            d = random.randint(1, 4)
            density = random.uniform(0.0, 0.6)
            p = (random.rand(d, EXTENT, EXTENT) < density).astype(np.uint8)
            g = (random.rand(d, EXTENT, EXTENT) < density).astype(np.uint8)
            expected = brute_force(p, g)
            for name, fn in functions.items():
                np.testing.assert_allclose(fn(p, g).per_class, expected[name], rtol=0, atol=1e-12,
                                           err_msg='case %d %s' % (case, name))

    def test_dice_by_hand(self):
        """One shared pixel out of two predicted and one true gives 3/4"""
        p = np.array([[1, 1, 0, 0]])
        g = np.array([[1, 0, 0, 0]])
        self.assertEqual(dice(p, g).mean, 0.75)
        self.assertAlmostEqual(dice_raw(p, g).mean, 2.0 / 3)
        self.assertEqual(iou(p, g).mean, 0.5)

    def test_empty_planes(self):
        """Both empty: IoU and Dice are 1, precision and recall undefined"""
        empty = np.zeros((1, 4, 4))
        self.assertEqual(iou(empty, empty).mean, 1.0)
        self.assertEqual(dice(empty, empty).mean, 1.0)
        self.assertTrue(math.isnan(precision(empty, empty).mean))
        self.assertTrue(math.isnan(recall(empty, empty).mean))

    def test_undefined_left_out_of_mean(self):
        """An undefined class does not drag the mean towards zero"""
        p = np.zeros((2, 2, 2))
        g = np.zeros((2, 2, 2))
        p[1, 0, 0] = g[1, 0, 0] = 1
        value = precision(p, g)
        self.assertTrue(math.isnan(value.per_class[0]))
        self.assertEqual(value.mean, 1.0)

    def test_shape_mismatch(self):
        """P and G must have the same shape"""
        self.assertRaises(ShapeError, iou, np.zeros((2, 4, 4)), np.zeros((3, 4, 4)))


class EvalReportTest(TestCase):

    def test_perfect_prediction(self):
        """Ground truth scored against itself is 100% everywhere defined"""
        random = np.random.RandomState(SEED)
        planes = [(random.rand(3, EXTENT, EXTENT) < 0.3).astype(np.uint8) for _ in range(5)]
        planes[0][2] = 0
        report = evaluate_planes([(g, g) for g in planes], ['GGO', 'Con', 'Lung'], model='oracle')
        for metric, value in report.means.items():
            self.assertAlmostEqual(value, 100.0, places=10, msg=metric)
        self.assertEqual(report.slices, 5)
        self.assertEqual(report.pred_pixels, report.true_pixels)

    def test_per_slice_then_mean(self):
        """Slices are averaged after scoring, not pooled"""
        g = [np.array([[[1, 1, 1, 1]]]), np.array([[[1, 0, 0, 0]]])]
        p = [np.array([[[1, 1, 1, 1]]]), np.array([[[0, 1, 0, 0]]])]
        report = evaluate_planes(zip(p, g), ['a'])
        self.assertAlmostEqual(report.per_class['IoU'][0], 50.0)
        self.assertAlmostEqual(report.per_class['dice_raw'][0], 50.0)

    def test_never_defined_is_nan(self):
        """A class never predicted has NaN precision"""
        g = np.ones((1, 2, 2))
        report = evaluate_planes([(np.zeros((1, 2, 2)), g)], ['a'])
        self.assertTrue(math.isnan(report.per_class['Pr'][0]))
        self.assertEqual(report.per_class['Re'][0], 0.0)

    def test_planes_must_match_classes(self):
        """The plane count must equal the number of class names"""
        self.assertRaises(ShapeError, evaluate_planes, [(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))], ['a'])

    def test_csv_round_trip(self):
        """A written report reads back with its values and NaNs"""
        g = np.zeros((2, 4, 4))
        g[0, :2] = 1
        p = g.copy()
        p[0, 0, 0] = 0
        report = evaluate_planes([(p, g)], ['GGO', 'Lung'], model='unet', test_order='reverse')

        tmp_dir = tempfile.mkdtemp()
        try:
            path = os.path.join(tmp_dir, 'eval.csv')
            write_csv(path, [report])
            with open(path) as f:
                self.assertEqual(f.readline(), '# schema %s\n' % SCHEMA)
            rows = read_report_rows(path)
        finally:
            shutil.rmtree(tmp_dir)

        self.assertEqual([r['class'] for r in rows], ['GGO', 'Lung', 'mean'])
        self.assertEqual(set(rows[0]), set(CSV_FIELDS))
        self.assertEqual(rows[0]['model'], 'unet')
        self.assertEqual(rows[0]['test_order'], 'reverse')
        self.assertAlmostEqual(rows[0]['IoU'], 700.0 / 8, places=4)
        self.assertTrue(math.isnan(rows[1]['Pr']))
        self.assertEqual(rows[2]['true_pixels'], 8)


class LossTest(TestCase):

    def setUp(self):
        random = np.random.RandomState(SEED)
        self.p_raw = Tensor(random.uniform(0.01, 0.99, (2, 3, 6, 6)), dtype=np.float64)
        self.g = (random.rand(2, 3, 6, 6) < 0.4).astype(np.float64)

    def test_bdl_is_half_bcl_plus_dl(self):
        """BDL = BCL / 2 + DL"""
        expected = 0.5 * bce_loss(self.p_raw, self.g).item() + dice_loss(self.p_raw, self.g).item()
        self.assertAlmostEqual(bce_dice_loss(self.p_raw, self.g).item(), expected, delta=1e-12)

    def test_dice_loss_at_perfect_prediction(self):
        """DL is -1 when the prediction equals the labels"""
        self.assertAlmostEqual(dice_loss(Tensor(self.g), self.g).item(), -1.0, places=12)

    def test_soft_dice_matches_hard_dice(self):
        """On binary inputs the soft Dice is the smoothed Dice"""
        p = (np.random.RandomState(SEED + 1).rand(1, 6, 6) < 0.5).astype(np.float64)
        g = self.g[0, :1]
        self.assertAlmostEqual(soft_dice(Tensor(p), g).item(), dice(p, g).mean, places=12)

    def test_soft_dice_is_pooled(self):
        """With several classes and slices the soft Dice pools every
        element into one ratio instead of averaging per-class Dice"""
        p = np.array([[[[1.0, 1.0]], [[0.0, 0.0]]]])
        g = np.array([[[[1.0, 0.0]], [[1.0, 1.0]]]])
        # (2 * 1 + 1) / (2 + 3 + 1); per class it would be (0.75 + 1/3) / 2
        self.assertAlmostEqual(soft_dice(Tensor(p), g).item(), 0.5, places=12)

        rng = np.random.RandomState(SEED + 2)
        p = rng.rand(2, 3, 5, 5)
        g = (rng.rand(2, 3, 5, 5) < 0.4).astype(np.float64)
        pooled = (2.0 * np.sum(p * g) + 1.0) / (np.sum(p) + np.sum(g) + 1.0)
        self.assertAlmostEqual(soft_dice(Tensor(p), g).item(), pooled, places=12)

    def test_bce_is_clamped(self):
        """Hard wrong predictions give a large but finite loss"""
        g = np.array([[1.0, 0.0]])
        value = bce_loss(Tensor(1.0 - g), g).item()
        self.assertTrue(np.isfinite(value))
        self.assertAlmostEqual(value, -math.log(1e-7), places=3)

    def test_get_loss(self):
        """Losses are looked up by name"""
        self.assertIs(get_loss('bdl'), bce_dice_loss)
        self.assertIs(get_loss('DL'), dice_loss)
        self.assertRaises(KeyError, get_loss, 'focal')

    def test_shape_mismatch(self):
        """Labels must have the prediction's shape"""
        self.assertRaises(ShapeError, dice_loss, self.p_raw, self.g[:1])


if __name__ == '__main__':
    unittest.main()
