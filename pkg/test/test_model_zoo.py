import unittest
from unittest import TestCase

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from model_zoo.graph import (DECODER_LAYERS, NESTED_LAYERS, UPSAMPLING_LAYERS, LayerId, Role)
from model_zoo.zoo import (ARCHITECTURES, REFERENCE_COUNTS, REFERENCE_CLASSES, build_model, count_params,
                           head_param_count, propagation_shapes, scaled_widths, shape_table)
from tensor_engine.rng import Stream
from tensor_engine.tensor import Tensor, no_grad

# unet at widths 1,1,1,1,1 without batch-norm, d = 3:
# 5 encoder blocks of (9+1) + (9+1), 4 decoders of up (4+1) + (18+1) + (9+1),
# head 3 + 3
TOY_UNET_COUNT = 5 * 20 + 4 * (5 + 19 + 10) + 6

SMALL_EXTENT = 32


class LayerIdTest(TestCase):

    def test_parse_both_spellings(self):
        """'X(1,2)' and 'X12' name the same layer"""
        self.assertEqual(LayerId.parse('X(1,2)'), LayerId(1, 2))
        self.assertEqual(LayerId.parse('X12'), LayerId(1, 2))
        self.assertEqual(str(LayerId(3, 2)), 'X(3,2)')
        self.assertEqual(LayerId(3, 2).key, 'X32')

    def test_off_grid(self):
        """X(4,3) lies below the decoder diagonal"""
        self.assertRaises(ValueError, LayerId, 4, 3)
        self.assertRaises(ValueError, LayerId.parse, 'Y12')

    def test_roles(self):
        """The grid splits into five encoder, four decoder and six nested
        layers"""
        self.assertEqual([l.role for l in DECODER_LAYERS], [Role.DECODER] * 4)
        self.assertEqual(set(l.role for l in NESTED_LAYERS), {Role.NESTED})
        self.assertEqual(len(UPSAMPLING_LAYERS), 10)
        self.assertTrue(set(NESTED_LAYERS) < set(UPSAMPLING_LAYERS))


class ParameterCountTest(TestCase):

    def test_reference_counts(self):
        """Default widths, batch-norm and 3 classes reproduce the
        reference totals, trainable and non-trainable counts"""
        for architecture in ARCHITECTURES:
            model = build_model(architecture, num_classes=REFERENCE_CLASSES)
            self.assertEqual(tuple(count_params(model)), REFERENCE_COUNTS[architecture], architecture)

    def test_toy_unet(self):
        """A width-1 Unet without batch-norm is countable by hand"""
        model = build_model('unet', widths=[1, 1, 1, 1, 1], num_classes=3, batch_norm=False)
        self.assertEqual(count_params(model), (TOY_UNET_COUNT, TOY_UNET_COUNT, 0))

    def test_no_bn_has_no_frozen_parameters(self):
        """Without batch-norm every parameter is trainable"""
        model = build_model('numsnet', widths=scaled_widths('numsnet', 8), batch_norm=False)
        self.assertEqual(count_params(model).non_trainable, 0)

    def test_head_scales_with_classes(self):
        """Only the 1x1 head depends on the number of classes"""
        widths = scaled_widths('unetpp', 4)
        three = build_model('unetpp', widths=widths, num_classes=3)
        seven = build_model('unetpp', widths=widths, num_classes=7)
        self.assertEqual(count_params(seven).total - count_params(three).total,
                         head_param_count(seven) - head_param_count(three))
        self.assertEqual(head_param_count(three), 3 * widths[0] + 3)

    def test_numsall_adds_four_merges(self):
        """NUMS-all propagates the four decoder layers NUMSnet does not"""
        widths = scaled_widths('numsnet', 8)
        nums = build_model('numsnet', widths=widths)
        nums_all = build_model('numsall', widths=widths)
        self.assertEqual(len(nums.merges), 6)
        self.assertEqual(len(nums_all.merges), 10)

        extra = 0
        for layer in set(UPSAMPLING_LAYERS) - set(NESTED_LAYERS):
            w = widths[layer.row - 1]
            extra += (2 * w * 9 + w) + (w * 9 + w)
        self.assertEqual(count_params(nums_all).total - count_params(nums).total, extra)

    def test_unknown_architecture(self):
        """An unknown tag is a KeyError"""
        self.assertRaises(KeyError, build_model, 'bogus')

    def test_scaled_widths(self):
        """Scaled widths round and never reach zero"""
        self.assertEqual(scaled_widths('unet', 4), (8, 16, 32, 64, 128))
        self.assertEqual(scaled_widths('wunet', 1000), (1, 1, 1, 1, 1))


class ShapeTest(TestCase):

    def test_unet_dimension_claims(self):
        """128x128x32 after the first pool, a 16x16 bottleneck, 512 channels
        into X(4,2) giving 256, and a 256x256xd output"""
        table = shape_table(build_model('unet', num_classes=3))
        self.assertEqual(table[(LayerId(1, 1), 'pool')], (1, 32, 128, 128))
        self.assertEqual(table[(LayerId(5, 1), 'output')], (1, 512, 16, 16))
        self.assertEqual(table[(LayerId(4, 2), 'concat')], (1, 512, 32, 32))
        self.assertEqual(table[(LayerId(4, 2), 'output')], (1, 256, 32, 32))
        self.assertEqual(table[('head', 'output')], (1, 3, 256, 256))

    def test_nested_concat_widths(self):
        """X(1,4) of Unet++ concatenates three same-depth maps and the
        up-sampled one"""
        table = shape_table(build_model('unetpp', num_classes=3))
        self.assertEqual(table[(LayerId(1, 4), 'concat')], (1, 4 * 32, 256, 256))

    def test_unpoolable_extent(self):
        """An extent that cannot be halved four times is refused"""
        self.assertRaises(ValueError, shape_table, build_model('unet', widths=scaled_widths('unet', 8)), 40, 40)

    def test_forward_matches_table(self):
        """Every map a real forward pass emits has the tabled shape"""
        for architecture in ARCHITECTURES:
            model = build_model(architecture, widths=scaled_widths(architecture, 8), num_classes=2)
            table = shape_table(model, SMALL_EXTENT, SMALL_EXTENT)
            seen = {}

            def hook(layer, event, tensor):
                seen[(layer, event)] = tensor.shape

            x = Tensor(Stream(0, 'shape-test').random((1, 1, SMALL_EXTENT, SMALL_EXTENT)), dtype=np.float32)
            with no_grad():
                result = model.forward(x, hook=hook)
            for key, shape in seen.items():
                if key in table:
                    self.assertEqual(shape, table[key], '%s %s' % (architecture, key))
            self.assertEqual(result.p_raw.shape, table[('head', 'output')])

    def test_propagation_shapes(self):
        """Stored maps have the width of their depth"""
        model = build_model('numsnet', widths=scaled_widths('numsnet', 8))
        shapes = propagation_shapes(model, SMALL_EXTENT, SMALL_EXTENT)
        self.assertEqual(list(shapes), list(NESTED_LAYERS))
        self.assertEqual(shapes[LayerId(3, 2)], (1, model.widths[2], 8, 8))

    @settings(max_examples=20, deadline=None)
    @given(st.sampled_from(ARCHITECTURES), st.integers(min_value=1, max_value=4),
           st.integers(min_value=1, max_value=7))
    def test_shape_algebra(self, architecture, scale, classes):
        """Every layer at depth i is the input extent over 2^(i-1)"""
        extent = 16 * scale
        model = build_model(architecture, widths=[1, 2, 3, 4, 5], num_classes=classes)
        for (layer, event), shape in shape_table(model, extent, 2 * extent).items():
            if layer == 'head':
                self.assertEqual(shape, (1, classes, extent, 2 * extent))
                continue
            factor = 2 ** (layer.row - 1) * (2 if event == 'pool' else 1)
            self.assertEqual(shape[2:], (extent // factor, 2 * extent // factor))


class DeepSupervisionTest(TestCase):

    def test_heads_at_full_resolution(self):
        """Each depth head is up-sampled to the input extent"""
        model = build_model('unetpp', widths=scaled_widths('unetpp', 8), num_classes=2, deep_supervision=True)
        with no_grad():
            result = model.forward(Tensor(np.zeros((1, 1, SMALL_EXTENT, SMALL_EXTENT), dtype=np.float32)))
        self.assertEqual(list(result.heads), [1, 2, 3, 4])
        for head in result.heads.values():
            self.assertEqual(head.shape, (1, 2, SMALL_EXTENT, SMALL_EXTENT))
        self.assertIs(result.heads[1], result.p_raw)


if __name__ == '__main__':
    unittest.main()
