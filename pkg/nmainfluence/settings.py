"""
Django settings for the nma-influence commands.

The ``NMA_*`` values are the analysis defaults. Each one can be overridden by an environment
variable of the same name (``NMA_SEED=7``, ``NMA_WORKERS=8``...); command flags win over both.
"""
import os
from typing import TypeVar

T = TypeVar('T', int, float)


def env(name: str, default: T) -> T:
    """
    The value of environment variable ``name`` converted to the type of ``default``; ``default``
    when it is unset or empty.
    """
    raw = os.environ.get(name, '')
    if raw == '':
        return default
    return type(default)(raw)


SECRET_KEY = 'not_so_secret'

INSTALLED_APPS = [
    'nmainfluence.apps.NmaInfluenceConfig',
]

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': ':memory:',
    },
}

USE_TZ = True

# Profile search range for tau^2, in log-OR^2 units.
NMA_TAU2_MAX = env('NMA_TAU2_MAX', 25.0)
NMA_REML_XTOL = env('NMA_REML_XTOL', 1e-8)

# Within-study data handling.
NMA_CONTINUITY_CORRECTION = env('NMA_CONTINUITY_CORRECTION', 0.5)
NMA_PSEUDO_EVENTS = env('NMA_PSEUDO_EVENTS', 0.001)
NMA_PSEUDO_TOTAL = env('NMA_PSEUDO_TOTAL', 0.01)

# kappa_jk, fixed under the equal-variance assumption.
NMA_BETWEEN_STUDY_CORRELATION = env('NMA_BETWEEN_STUDY_CORRELATION', 0.5)

# Bootstrap.
NMA_DEFAULT_B = env('NMA_DEFAULT_B', 5000)
NMA_SIM_DEFAULT_B = env('NMA_SIM_DEFAULT_B', 1000)
NMA_FAILURE_FLAG_FRACTION = env('NMA_FAILURE_FLAG_FRACTION', 0.05)
NMA_SEED = env('NMA_SEED', 20240601)
NMA_WORKERS = env('NMA_WORKERS', 1)

# Reporting.
NMA_SIGNIFICANCE = env('NMA_SIGNIFICANCE', 0.05)
NMA_TOP_K = env('NMA_TOP_K', 3)
