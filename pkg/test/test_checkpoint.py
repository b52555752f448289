import os
import shutil
import tempfile
import unittest
from unittest import TestCase

import numpy as np

from model_zoo.checkpoint import (ArchitectureMismatchError, Checkpoint, ChecksumError, FormatError,
                                  RecordShapeError, VersionError, decode_checkpoint, encode_checkpoint,
                                  load_checkpoint, read_checkpoint, save_checkpoint, transfer_adapt)
from model_zoo.zoo import build_model, count_params, head_param_count, scaled_widths
from tensor_engine.optim import Adam
from tensor_engine.rng import Stream
from tensor_engine.tensor import Tensor, backward, no_grad

EXTENT = 32


def small_model(architecture='numsnet', num_classes=3, seed=3, **options):
    return build_model(architecture, widths=scaled_widths(architecture, 8), num_classes=num_classes,
                       seed=seed, **options)


def sample_input():
    return Tensor(Stream(5, 'checkpoint-test').random((1, 1, EXTENT, EXTENT)), dtype=np.float32)


def predict(model):
    with no_grad():
        return model.forward(sample_input()).p_raw.data


class CheckpointTest(TestCase):

    def setUp(self):
        self.tmp_dir = tempfile.mkdtemp()
        self.path = os.path.join(self.tmp_dir, 'model.ckpt')

    def tearDown(self):
        shutil.rmtree(self.tmp_dir)

    def test_save_load_bitwise(self):
        """A reloaded model has identical parameters and outputs"""
        model = small_model()
        size = save_checkpoint(model, self.path)
        self.assertEqual(size, os.path.getsize(self.path))

        loaded = load_checkpoint(self.path)
        self.assertEqual(list(loaded.parameters), list(model.parameters))
        for name, param in model.parameters.items():
            np.testing.assert_array_equal(loaded.parameters[name].data, param.data)
            self.assertEqual(loaded.parameters[name].trainable, param.trainable)
        np.testing.assert_array_equal(predict(loaded), predict(model))

    def test_optimizer_state_round_trip(self):
        """Adam moments and step count survive a save"""
        model = small_model('unet')
        optimizer = Adam(model.parameters.trainable(), lr=0.01)
        with_grad = model.forward(sample_input(), training=True)
        backward(with_grad.p_raw.mean())
        optimizer.step()

        save_checkpoint(model, self.path, optimizer)
        state = read_checkpoint(self.path).optimizer
        self.assertEqual(state.t, 1)
        self.assertEqual(state.hyperparameters(), optimizer.state.hyperparameters())
        for name, moment in optimizer.state.m.items():
            np.testing.assert_array_equal(state.m[name], moment)
            np.testing.assert_array_equal(state.v[name], optimizer.state.v[name])

    def test_truncated_file(self):
        """Any truncation is a ChecksumError"""
        payload = encode_checkpoint(Checkpoint.from_model(small_model('unet')))
        for cut in (4, 20, len(payload) // 2, len(payload) - 1):
            self.assertRaises(ChecksumError, decode_checkpoint, payload[:cut])

    def test_flipped_byte(self):
        """A corrupted body fails the checksum"""
        payload = bytearray(encode_checkpoint(Checkpoint.from_model(small_model('unet'))))
        payload[len(payload) // 2] ^= 0xFF
        self.assertRaises(ChecksumError, decode_checkpoint, bytes(payload))

    def test_bad_magic(self):
        """Something that is not a checkpoint is a FormatError"""
        self.assertRaises(FormatError, decode_checkpoint, b'PNG\x00' * 10)

    def test_future_version(self):
        """A newer format version is refused"""
        checkpoint = Checkpoint.from_model(small_model('unet'))
        checkpoint.version = 99
        self.assertRaises(VersionError, decode_checkpoint, encode_checkpoint(checkpoint))

    def test_architecture_mismatch(self):
        """Asking for another architecture than the one stored fails"""
        save_checkpoint(small_model('unet'), self.path)
        self.assertRaises(ArchitectureMismatchError, load_checkpoint, self.path, 'numsnet')

    def test_record_shape_mismatch(self):
        """A record whose shape does not fit the architecture is refused"""
        checkpoint = Checkpoint.from_model(small_model('unet'))
        checkpoint.widths = [w + 1 for w in checkpoint.widths]
        self.assertRaises(RecordShapeError, checkpoint.to_model)

    def test_float64_model_stays_float64(self):
        """The stored dtype is the rebuilt model's dtype"""
        model = small_model('unet', dtype=np.float64)
        save_checkpoint(model, self.path)
        self.assertEqual(load_checkpoint(self.path).dtype, np.dtype(np.float64))


class TransferTest(TestCase):

    def test_non_head_parameters_copied(self):
        """Going from 3 to 7 classes keeps every non-head parameter bit-exact"""
        source = small_model(num_classes=3)
        adapted = transfer_adapt(source, 7)
        heads = set(adapted.head_parameter_names())

        self.assertEqual(adapted.num_classes, 7)
        for name, param in adapted.parameters.items():
            if name in heads:
                self.assertNotEqual(param.shape, source.parameters[name].shape)
            else:
                np.testing.assert_array_equal(param.data, source.parameters[name].data)
                self.assertEqual(param.trainable, source.parameters[name].trainable)

        delta = count_params(adapted).total - count_params(source).total
        self.assertEqual(delta, head_param_count(adapted) - head_param_count(source))
        self.assertEqual(count_params(adapted).non_trainable, count_params(source).non_trainable)

    def test_from_checkpoint_path(self):
        """transfer_adapt also reads a checkpoint file"""
        tmp_dir = tempfile.mkdtemp()
        try:
            path = os.path.join(tmp_dir, 'source.ckpt')
            save_checkpoint(small_model('unetpp'), path)
            adapted = transfer_adapt(path, 7, architecture='unetpp')
            self.assertEqual(adapted.architecture, 'unetpp')
            self.assertEqual(predict(adapted).shape, (1, 7, EXTENT, EXTENT))
        finally:
            shutil.rmtree(tmp_dir)

    def test_wrong_architecture(self):
        """Adapting into a different architecture is refused"""
        self.assertRaises(ArchitectureMismatchError, transfer_adapt, small_model('unet'), 7, 'numsnet')


if __name__ == '__main__':
    unittest.main()
