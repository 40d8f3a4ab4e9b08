"""
``Contrasts`` **instances**:

    A pooled (or study-level) estimate in the contrast-based model is a vector of log odds ratios
    of several treatments against one reference, together with its covariance matrix. A
    `Contrasts`_ instance keeps the two together with the treatment ids they refer to, so that
    they can be re-expressed against another reference, restricted to some treatments, or
    compared with another estimate without losing track of which component is which.

    Re-expressing uses a `BasisTransform`, an integer matrix ``C`` with
    ``new_mean = C @ mean`` and ``new_cov = C @ cov @ C.T``.
"""
from typing import Iterable, Sequence, Tuple

import numpy as np

from .models import BasisTransform


def basis_transform(treatments: Iterable[int], from_reference: int, to_reference: int) -> BasisTransform:
    """
    Builds the map from contrasts against ``from_reference`` to contrasts against ``to_reference``.

    :param treatments: every treatment of the contrast set, references included.
    :param from_reference: the current reference.
    :param to_reference: the wanted reference.
    :return: a BasisTransform.
    """
    treatments = tuple(sorted(set(treatments)))
    for ref in (from_reference, to_reference):
        if ref not in treatments:
            raise ValueError('Reference {} is not in the treatment set {}'.format(ref, treatments))
    source = [t for t in treatments if t != from_reference]
    target = [t for t in treatments if t != to_reference]
    matrix = np.zeros((len(target), len(source)), dtype=int)
    for row, t in enumerate(target):
        if t != from_reference:
            matrix[row, source.index(t)] += 1
        if to_reference != from_reference:
            matrix[row, source.index(to_reference)] -= 1
    matrix.setflags(write=False)
    return BasisTransform(from_reference=from_reference, to_reference=to_reference,
                          treatments=treatments, matrix=matrix)


def rebase(mean: np.ndarray, cov: np.ndarray, t: BasisTransform) -> Tuple[np.ndarray, np.ndarray]:
    """
    Re-expresses a mean vector and its covariance against ``t.to_reference``:
    ``new_j = mu_j - mu_r`` with ``mu_{from_reference} = 0``.
    """
    c = t.matrix.astype(float)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if mean.shape != (c.shape[1],) or cov.shape != (c.shape[1], c.shape[1]):
        raise ValueError('Expected {} contrasts, got mean {} and cov {}'.format(c.shape[1], mean.shape, cov.shape))
    new_cov = c @ cov @ c.T
    return c @ mean, (new_cov + new_cov.T) / 2.0


class Contrasts(object):
    """
    Log odds ratios of ``treatments`` against ``reference`` with their covariance.

    Examples:

        Example use::

            c = Contrasts(reference=0, treatments=(1, 2), mean=[0.2, 0.5], cov=np.eye(2))
            c.rebase(1)           # contrasts of 0 and 2 against 1
            c[2]                  # (0.5, 1.0)
            (c - other).quadratic_form()
    """

    def __init__(self, reference: int, treatments: Sequence[int], mean, cov):
        self.reference = int(reference)
        self.treatments = tuple(int(t) for t in treatments)
        if self.reference in self.treatments:
            raise ValueError('The reference cannot also be a contrast component.')
        if len(set(self.treatments)) != len(self.treatments):
            raise ValueError('Duplicate treatment provided. Each contrast must be unique.')
        self.mean = np.asarray(mean, dtype=float).reshape(len(self.treatments))
        self.cov = np.asarray(cov, dtype=float).reshape(len(self.treatments), len(self.treatments))

    def __repr__(self):
        parts = ', '.join('{}: {:.4f}'.format(t, m) for t, m in zip(self.treatments, self.mean))
        return 'Contrasts vs {}: {}'.format(self.reference, parts or 'No values')

    def __len__(self):
        return len(self.treatments)

    def __getitem__(self, treatment: int) -> Tuple[float, float]:
        """(estimate, variance) of one treatment against the reference; (0, 0) for the reference itself."""
        if treatment == self.reference:
            return 0.0, 0.0
        i = self.treatments.index(treatment)
        return float(self.mean[i]), float(self.cov[i, i])

    @property
    def all_treatments(self) -> Tuple[int, ...]:
        return tuple(sorted(self.treatments + (self.reference,)))

    def _sorted(self) -> 'Contrasts':
        order = np.argsort(self.treatments)
        return Contrasts(self.reference, [self.treatments[i] for i in order],
                         self.mean[order], self.cov[np.ix_(order, order)])

    def rebase(self, to_reference: int) -> 'Contrasts':
        if to_reference == self.reference:
            return self
        if to_reference not in self.treatments:
            raise ValueError('Treatment {} is not part of these contrasts.'.format(to_reference))
        s = self._sorted()
        t = basis_transform(s.all_treatments, s.reference, to_reference)
        mean, cov = rebase(s.mean, s.cov, t)
        return Contrasts(to_reference, t.target_order, mean, cov)

    def restrict(self, treatments: Iterable[int]) -> 'Contrasts':
        """Keeps the given components, in the given order. The reference may be listed and is ignored."""
        wanted = [t for t in treatments if t != self.reference]
        missing = [t for t in wanted if t not in self.treatments]
        if missing:
            raise ValueError('Treatments {} are not part of these contrasts.'.format(missing))
        idx = [self.treatments.index(t) for t in wanted]
        return Contrasts(self.reference, wanted, self.mean[idx], self.cov[np.ix_(idx, idx)])

    def __sub__(self, other: 'Contrasts') -> 'Contrasts':
        """
        Difference of two independent estimates of the same contrasts: means subtract, covariances add.
        """
        if not isinstance(other, Contrasts):
            raise TypeError('Can only subtract Contrasts instances, not Contrasts and {}.'.format(type(other)))
        if other.reference != self.reference:
            other = other.rebase(self.reference)
        other = other.restrict(self.treatments)
        return Contrasts(self.reference, self.treatments, self.mean - other.mean, self.cov + other.cov)

    def quadratic_form(self, kernel: np.ndarray = None) -> float:
        """``mean' K^-1 mean`` with ``K`` the own covariance unless another kernel is given."""
        k = self.cov if kernel is None else np.asarray(kernel, dtype=float)
        if len(self) == 0:
            return 0.0
        return float(self.mean @ np.linalg.solve(k, self.mean))

    def odds_ratios(self, z: float = 1.959963984540054) -> Tuple[Tuple[int, float, float, float], ...]:
        """(treatment, OR, lower, upper) for each component, Wald interval at the given normal quantile."""
        se = np.sqrt(np.diag(self.cov))
        return tuple((t, float(np.exp(m)), float(np.exp(m - z * s)), float(np.exp(m + z * s)))
                     for t, m, s in zip(self.treatments, self.mean, se))

    def allclose(self, other: 'Contrasts', atol: float = 1e-8) -> bool:
        if set(other.treatments) | {other.reference} != set(self.treatments) | {self.reference}:
            return False
        other = other.rebase(self.reference).restrict(self.treatments)
        return bool(np.allclose(self.mean, other.mean, atol=atol) and np.allclose(self.cov, other.cov, atol=atol))
