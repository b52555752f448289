import os
import unittest
from unittest import TestCase

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
PACKAGES = ('tensor_engine', 'model_zoo', 'stack_data', 'metrics_losses', 'train_eval')
HEADER = '# Copyright 2023 NUMSnet Contributors\n'


class LicenseHeaderTest(TestCase):

    def test_every_module_has_header(self):
        """Each non-empty package module opens with the Apache header"""
        missing = []
        for package in PACKAGES:
            directory = os.path.join(ROOT, package)
            for name in sorted(os.listdir(directory)):
                if not name.endswith('.py') or name == '__init__.py':
                    continue
                with open(os.path.join(directory, name)) as f:
                    first = f.readline()
                if first != HEADER:
                    missing.append('%s/%s' % (package, name))
        self.assertEqual(missing, [])


if __name__ == '__main__':
    unittest.main()
