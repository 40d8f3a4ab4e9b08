#!/usr/bin/env python
from setuptools import setup

import nmainfluence

setup(
    name='nma-influence',
    version=nmainfluence.__version__,
    description='Design-level influence diagnostics and inconsistency tests for network meta-analysis',
    long_description=open('README.md', encoding='utf-8').read(),
    long_description_content_type='text/markdown',
    author='nma-influence contributors',
    url=nmainfluence.__URL__,
    download_url='https://pypi.python.org/pypi/nma-influence',
    packages=[
        'nmainfluence',
        'nmainfluence.actions',
        'nmainfluence.management',
        'nmainfluence.management.commands',
    ],
    package_data={'nmainfluence': [
        'data/*.csv',
        'data/*.yaml',
    ]},
    install_requires=[
        'structlog',
        'progressbar2',
        'numpy>=1.17',
        'scipy>=1.4',
        'pandas>=1.0',
        'statsmodels>=0.12',
        'matplotlib>=3.3',
        'networkx>=2.4',
        'PyYAML>=5.1',
        'Django>=3.2',
    ],
    entry_points={
        'console_scripts': [
            'nma-influence = nmainfluence.management:main',
        ],
    },
    license=nmainfluence.__licence__,
    python_requires='>=3.8',
    classifiers=[
        'Development Status :: 4 - Beta',
        'Environment :: Console',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Operating System :: OS Independent',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Topic :: Scientific/Engineering :: Medical Science Apps.',
    ],
)
