"""
REML fitting of the contrast-based multivariate random-effects model.

Between-study covariance follows the equal-variance structure ``Sigma = tau^2 * P`` where ``P``
has a unit diagonal and ``kappa = 0.5`` off the diagonal. Each study enters through its own
contrasts ``y_i`` with a design matrix ``X_i`` mapping the model parameters to them, so studies
missing some treatments (or the reference) need no special handling.
"""
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from scipy.optimize import minimize_scalar
from structlog import get_logger
from django.conf import settings

from ..contrasts import Contrasts
from ..models import ContrastStudy, FitResult, NetworkDataset
from .network import DisconnectedNetworkError, strip_pseudo_arm, treatment_graph

logger = get_logger()

# Coarse profile grid used to bracket the maximum before refining.
_GRID_POINTS = 32


class UnderIdentifiedError(Exception):
    pass


class DimensionMismatchError(Exception):
    pass


def correlation_matrix(m: int, kappa: Optional[float] = None) -> np.ndarray:
    kappa = settings.NMA_BETWEEN_STUDY_CORRELATION if kappa is None else kappa
    return np.full((m, m), kappa) + (1.0 - kappa) * np.eye(m)


class LinearModel(object):
    """
    ``y_i ~ MVN(X_i beta, S_i + tau^2 P)`` over a set of studies, grouped by contrast dimension
    so that every likelihood evaluation is a handful of batched array operations.
    """

    def __init__(self, rows: Sequence[Tuple[np.ndarray, np.ndarray, np.ndarray]], n_params: int):
        if not rows:
            raise UnderIdentifiedError('under-identified network: no studies')
        self.n_params = n_params
        self.n_studies = len(rows)
        self.n_observations = sum(len(y) for y, _, _ in rows)
        by_dim: Dict[int, List[Tuple[np.ndarray, np.ndarray, np.ndarray]]] = {}
        for y, s, x in rows:
            by_dim.setdefault(len(y), []).append((y, s, x))
        self._groups = []
        for m in sorted(by_dim):
            block = by_dim[m]
            self._groups.append((
                np.stack([b[0] for b in block]),
                np.stack([b[1] for b in block]),
                np.stack([b[2] for b in block]),
                correlation_matrix(m),
            ))

    @property
    def residual_df(self) -> int:
        return self.n_observations - self.n_params

    def _evaluate(self, tau2: float):
        q = self.n_params
        weight = np.zeros((q, q))
        score = np.zeros(q)
        logdet = 0.0
        inverses = []
        for y, s, x, corr in self._groups:
            v = s + tau2 * corr
            sign, ld = np.linalg.slogdet(v)
            if np.any(sign <= 0):
                raise np.linalg.LinAlgError('marginal covariance is not positive definite')
            logdet += float(ld.sum())
            vinv = np.linalg.inv(v)
            inverses.append(vinv)
            xtv = np.einsum('kmq,kmn->kqn', x, vinv)
            weight += np.einsum('kqm,kmr->qr', xtv, x)
            score += np.einsum('kqm,km->q', xtv, y)
        weight = (weight + weight.T) / 2.0
        try:
            chol = np.linalg.cholesky(weight)
        except np.linalg.LinAlgError:
            raise UnderIdentifiedError('under-identified network: singular total weight matrix')
        beta = np.linalg.solve(weight, score)
        quad = 0.0
        for (y, s, x, corr), vinv in zip(self._groups, inverses):
            r = y - np.einsum('kmq,q->km', x, beta)
            quad += float(np.einsum('km,kmn,kn->', r, vinv, r))
        logdet_weight = 2.0 * float(np.log(np.diag(chol)).sum())
        return beta, weight, logdet, quad, logdet_weight

    def gls(self, tau2: float) -> Tuple[np.ndarray, np.ndarray]:
        """Generalised least squares estimate of the parameters and its covariance at fixed tau^2."""
        beta, weight, _, _, _ = self._evaluate(tau2)
        cov = np.linalg.inv(weight)
        return beta, (cov + cov.T) / 2.0

    def loglik(self, tau2: float) -> float:
        """Profiled restricted log-likelihood, additive constants dropped."""
        _, _, logdet, quad, logdet_weight = self._evaluate(tau2)
        return -0.5 * (logdet + quad + logdet_weight)

    def maximize(self) -> Tuple[float, float, bool, bool]:
        """
        Profile search for tau^2 on [0, TAU2_MAX].

        :return: (tau2, loglik, converged, degenerate)
        """
        tau2_max = settings.NMA_TAU2_MAX
        if self.residual_df <= 0:
            return 0.0, self.loglik(0.0), True, True

        grid = np.concatenate([[0.0], np.geomspace(1e-6, tau2_max, _GRID_POINTS)])
        values = np.array([self.loglik(t) for t in grid])
        best = int(np.argmax(values))
        lo = grid[max(best - 1, 0)]
        hi = grid[min(best + 1, len(grid) - 1)]

        res = minimize_scalar(lambda t: -self.loglik(t), bounds=(lo, hi), method='bounded',
                              options={'xatol': settings.NMA_REML_XTOL})
        candidates = [(float(res.x), -float(res.fun)), (float(grid[best]), float(values[best]))]
        tau2, ll = max(candidates, key=lambda c: (c[1], -c[0]))
        converged = bool(res.success) and tau2 < tau2_max * (1.0 - 1e-6)
        if not converged:
            logger.warning('reml-not-converged', tau2=tau2, tau2_max=tau2_max, message=str(res.message))
        return tau2, ll, converged, False


########################################################################################################
# Consistency model

def parameter_treatments(net: NetworkDataset, reference: Optional[int] = None) -> Tuple[int, Tuple[int, ...]]:
    """
    The reference and the ordered parameter treatments of a consistency fit on ``net``.
    All present treatments must be connected to the reference.
    """
    reference = net.global_reference if reference is None else reference
    present = sorted({a for s in net.studies for a in s.real_arms})
    if reference not in present:
        raise DisconnectedNetworkError('reference disconnected: {} is in no study'.format(net.label(reference)))
    graph = treatment_graph(net.studies)
    reachable = nx.node_connected_component(graph, reference)
    unreachable = [t for t in present if t not in reachable]
    if unreachable:
        raise DisconnectedNetworkError('Treatments {} are not connected to {}'.format(
            [net.label(t) for t in unreachable], net.label(reference)))
    return reference, tuple(t for t in present if t != reference)


def study_rows(study: ContrastStudy, reference: int, order: Sequence[int]) -> Tuple[ContrastStudy, np.ndarray]:
    """
    The study (pseudo arm removed if it is outside the parameter set) and its design matrix
    against the parameters ``order`` (contrasts of each treatment against ``reference``).
    """
    if study.augmented and study.reference not in order and study.reference != reference:
        study = strip_pseudo_arm(study)
    index = {t: i for i, t in enumerate(order)}
    x = np.zeros((len(study.contrast_arms), len(order)))
    for row, arm in enumerate(study.contrast_arms):
        if arm != reference:
            x[row, index[arm]] += 1.0
        if study.reference != reference:
            x[row, index[study.reference]] -= 1.0
    return study, x


def consistency_model(net: NetworkDataset,
                      reference: Optional[int] = None) -> Tuple[LinearModel, int, Tuple[int, ...]]:
    reference, order = parameter_treatments(net, reference)
    rows = []
    for study in net.studies:
        study, x = study_rows(study, reference, order)
        rows.append((np.asarray(study.y), np.asarray(study.s), x))
    return LinearModel(rows, len(order)), reference, order


def gls_mean(net: NetworkDataset, tau2: float, reference: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pooled log odds ratios against ``reference`` (the global reference by default) at a given tau^2.

    :return: (mu, cov_mu)
    """
    if tau2 < 0:
        raise ValueError('tau2 must be non-negative, got {}'.format(tau2))
    model, _, _ = consistency_model(net, reference)
    return model.gls(tau2)


def profile_loglik(net: NetworkDataset, tau2: float, reference: Optional[int] = None) -> float:
    model, _, _ = consistency_model(net, reference)
    return model.loglik(tau2)


def _i2_from_covariances(cov_random: np.ndarray, cov_fixed: np.ndarray) -> Tuple[float, float]:
    if cov_random.shape != cov_fixed.shape:
        raise DimensionMismatchError('Random ({}) and fixed ({}) covariances differ in dimension'.format(
            cov_random.shape, cov_fixed.shape))
    p = cov_random.shape[0]
    _, ld_r = np.linalg.slogdet(cov_random)
    _, ld_f = np.linalg.slogdet(cov_fixed)
    r_stat = float(np.exp((ld_r - ld_f) / (2.0 * p)))
    r2 = r_stat ** 2
    return max(0.0, (r2 - 1.0) / r2), r_stat


def reml_fit(net: NetworkDataset, reference: Optional[int] = None) -> FitResult:
    """
    Fits the consistency model by REML.

    :param net: a connected network.
    :param reference: the reference of the returned estimates, the global reference by default.
    :return: a FitResult; ``converged`` is False when tau^2 ends on the upper search bound.
    """
    model, reference, order = consistency_model(net, reference)
    tau2, ll, converged, degenerate = model.maximize()
    mu, cov = model.gls(tau2)
    if tau2 > 0:
        _, cov_fixed = model.gls(0.0)
        i2, r_stat = _i2_from_covariances(cov, cov_fixed)
    else:
        i2, r_stat = 0.0, 1.0
    logger.debug('reml-fit', n_studies=net.n_studies, tau2=tau2, i2=i2, converged=converged, degenerate=degenerate)
    return FitResult(mu_hat=mu, tau2_hat=tau2, cov_mu=cov, loglik_restricted=ll, i2=i2, r_stat=r_stat,
                     converged=converged, n_used=net.n_studies, reference=reference, treatments=order,
                     degenerate=degenerate)


def fixed_fit(net: NetworkDataset, reference: Optional[int] = None) -> FitResult:
    """The tau^2 = 0 (fixed-effect) fit."""
    model, reference, order = consistency_model(net, reference)
    mu, cov = model.gls(0.0)
    return FitResult(mu_hat=mu, tau2_hat=0.0, cov_mu=cov, loglik_restricted=model.loglik(0.0), i2=0.0, r_stat=1.0,
                     converged=True, n_used=net.n_studies, reference=reference, treatments=order,
                     degenerate=model.residual_df <= 0)


def i_squared(net: NetworkDataset, fit_random: FitResult) -> Tuple[float, float]:
    """
    Multivariate I^2 from the determinant ratio of random- and fixed-effect covariances.

    :return: (i2, R)
    """
    model, _, order = consistency_model(net, fit_random.reference)
    if tuple(order) != tuple(fit_random.treatments):
        raise DimensionMismatchError('Fit is on treatments {}, network gives {}'.format(
            fit_random.treatments, order))
    _, cov_fixed = model.gls(0.0)
    return _i2_from_covariances(np.asarray(fit_random.cov_mu), cov_fixed)


def fit_contrasts(fit: FitResult) -> Contrasts:
    return Contrasts(fit.reference, fit.treatments, fit.mu_hat, fit.cov_mu)


def pooled_odds_ratios(fit: FitResult) -> Tuple[Tuple[int, float, float, float], ...]:
    """(treatment, OR, lower, upper) against the fit reference."""
    return fit_contrasts(fit).odds_ratios()


def rank_treatments(fit: FitResult) -> Tuple[int, ...]:
    """Treatments from lowest to highest log odds ratio, the reference included at 0."""
    values = dict(zip(fit.treatments, fit.mu_hat))
    values[fit.reference] = 0.0
    return tuple(sorted(values, key=lambda t: (values[t], t)))
