# -*- coding: utf-8 -*-
"""Setup for numsnet."""
from setuptools import setup, find_packages

requires = [
        'mrjob',
        'testify',
        'simplejson',
        'numpy',
        'scipy',
        'Pillow',
        'PyYAML',
        'hypothesis',
        ]

setup(
        name='numsnet',
        description='Cross-scan segmentation of ordered medical image stacks with NUMSnet and Unet baselines.',
        author='NUMSnet Contributors',
        packages=find_packages(exclude=['test']),
        py_modules=['numsnet_cli'],
        install_requires=requires,
        tests_require=requires,
        )
