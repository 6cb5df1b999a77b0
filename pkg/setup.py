#!/usr/bin/env python3

"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    2026-Oct-18  Created this.
"""

from setuptools import setup

NAME = 'gridclip'
VERSION = '0.0.1'

with open('requirements.txt') as f:
    REQUIREMENTS = [
        line.strip() for line in f
        if line.strip() and not line.startswith(('-', '#'))
    ]

setup(
    name=NAME,
    version=VERSION,
    description='A desk-scale one-stage open-vocabulary detector with grid- and image-level CLIP-style alignment',
    packages=['gridclip', 'gridclip.cli'],
    scripts=['bin/gridclip'],
    install_requires=REQUIREMENTS,
    python_requires='>=3.8',
)
