"""
Tests for inconsistency between designs.

* ``wald_lodo``: pooled estimates from a design's own studies against those from every other
  study, on the design's contrasts.
* ``global_interaction_test``: design-by-treatment interaction model against consistency.
* ``bucher_loop_test``: direct against indirect evidence around a loop of three treatments.
"""
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import chi2, norm
from statsmodels.stats.meta_analysis import combine_effects
from structlog import get_logger
from django.conf import settings

from .. import measures
from ..models import (
    BootstrapResult, DesignKey, FitResult, GlobalTestResult, LodoFit, LoopTestResult, NetworkDataset, PooledEdge,
    WaldResult
)
from ..workers import parallel_map
from .influence import NotEvaluableError, lodo_fit
from .network import build_network, rebase_study, strip_pseudo_arm
from .reml import LinearModel, fit_contrasts, parameter_treatments, reml_fit

logger = get_logger()


class TestNotApplicableError(Exception):
    __test__ = False


class MissingEdgeError(Exception):
    pass


# Comparator loops used alongside each simulated inconsistent design.
COMPARATOR_LOOPS = {
    ('ARB', 'CT'): (('ACE', 'ARB', 'CT'), ('ARB', 'CCB', 'CT')),
    ('CCB', 'CT'): (('ACE', 'CCB', 'CT'), ('ARB', 'CCB', 'CT')),
    ('ACE', 'CCB', 'CT'): (('ACE', 'CCB', 'CT'), ('ARB', 'CCB', 'CT')),
}


########################################################################################################
# Leave-one-design-out Wald test

def subset_fit(net: NetworkDataset, design: DesignKey) -> FitResult:
    """REML fit on the studies of ``design`` alone, against the design's first arm."""
    studies = net.studies_of(design)
    sub = build_network(studies, net.treatments, design.arms[0])
    return reml_fit(sub, reference=design.arms[0])


def _wald(net: NetworkDataset, design: DesignKey, subset: FitResult, lodo: LodoFit) -> WaldResult:
    anchor = design.arms[0]
    arms = design.arms[1:]
    own = fit_contrasts(subset).rebase(anchor).restrict(arms)
    rest = fit_contrasts(lodo.fit).rebase(anchor).restrict(arms)
    diff = own - rest
    w = max(0.0, diff.quadratic_form())
    df = design.n_comparisons
    return WaldResult(design=design, label=net.design_label(design), number=net.design_number(design),
                      w=w, df=df, p_chi2=float(chi2.sf(w, df)), reference=anchor, treatments=arms,
                      mu_subset=tuple(float(m) for m in own.mean), mu_rest=tuple(float(m) for m in rest.mean))


def wald_lodo(net: NetworkDataset, design: DesignKey,
              subset: Optional[FitResult] = None, lodo: Optional[LodoFit] = None) -> WaldResult:
    """
    Wald statistic for ``H0: mu(T_d) - mu(-T_d) = 0`` on the contrasts of ``design``.

    The covariance of the difference is the sum of both estimators' covariances; the design's
    studies and the remaining studies are disjoint.

    :raise NotEvaluableError: when leaving the design out disconnects one of its arms.
    """
    lodo = lodo or lodo_fit(net, design)
    subset = subset or subset_fit(net, design)
    return _wald(net, design, subset, lodo)


class WaldMeasure(measures.Measure):
    name = 'w'
    tail = measures.UPPER
    descending = True

    def compute(self, ctx: measures.DesignContext) -> Optional[float]:
        return _wald(ctx.net, ctx.design, ctx.subset, ctx.lodo).w


measures.register(WaldMeasure())


def _wald_row(args) -> Tuple[DesignKey, Optional[WaldResult], str]:
    net, design = args
    try:
        return design, wald_lodo(net, design), ''
    except NotEvaluableError as e:
        return design, None, str(e)


def wald_table(net: NetworkDataset,
               boot: Optional[BootstrapResult] = None,
               workers: Optional[int] = None,
               progress: bool = False) -> Tuple[List[WaldResult], List[Tuple[DesignKey, str]]]:
    """
    :param boot: a bootstrap result holding ``w`` replicates; fills ``p_boot`` when given.
    :return: (results sorted by P, ascending; [(design, reason)] for designs that are not evaluable)
    """
    workers = settings.NMA_WORKERS if workers is None else workers
    results = parallel_map(_wald_row, [(net, d) for d in net.designs], workers=workers, progress=progress)
    rows = []
    for design, row, _ in results:
        if row is None:
            continue
        if boot is not None and (design, 'w') in boot.entries:
            row = replace(row, p_boot=boot.entry(design, 'w').o_value)
        rows.append(row)
    not_evaluable = [(d, reason) for d, row, reason in results if row is None]
    rows.sort(key=lambda r: (r.p_boot if r.p_boot is not None else r.p_chi2, r.p_chi2, r.number))
    logger.info('wald-table', evaluable=len(rows), not_evaluable=len(not_evaluable))
    return rows, not_evaluable


########################################################################################################
# Global design-by-treatment interaction test

def interaction_model(net: NetworkDataset) -> Tuple[LinearModel, List[Tuple[DesignKey, int]]]:
    """
    One free mean vector per design, each against the design's first arm.

    :return: (model, parameter labels as (design, treatment))
    """
    params: List[Tuple[DesignKey, int]] = []
    offsets: Dict[DesignKey, int] = {}
    for design in net.designs:
        offsets[design] = len(params)
        params.extend((design, t) for t in design.arms[1:])
    rows = []
    for design in net.designs:
        for study in net.studies_of(design):
            study = rebase_study(strip_pseudo_arm(study), design.arms[0])
            x = np.zeros((len(study.contrast_arms), len(params)))
            for i, arm in enumerate(study.contrast_arms):
                x[i, offsets[design] + design.arms[1:].index(arm)] = 1.0
            rows.append((np.asarray(study.y), np.asarray(study.s), x))
    return LinearModel(rows, len(params)), params


def consistency_constraints(net: NetworkDataset, params: Sequence[Tuple[DesignKey, int]]) -> np.ndarray:
    """Maps basic parameters (treatments against the global reference) to every design contrast."""
    reference, order = parameter_treatments(net)
    index = {t: i for i, t in enumerate(order)}
    x = np.zeros((len(params), len(order)))
    for row, (design, arm) in enumerate(params):
        anchor = design.arms[0]
        if arm != reference:
            x[row, index[arm]] += 1.0
        if anchor != reference:
            x[row, index[anchor]] -= 1.0
    return x


def global_interaction_test(net: NetworkDataset) -> GlobalTestResult:
    """
    Wald test that the design-specific mean vectors obey consistency, i.e. lie in the column
    space of the consistency map.

    :raise TestNotApplicableError: when no interaction contrast is identifiable.
    """
    model, params = interaction_model(net)
    x = consistency_constraints(net, params)
    df = len(params) - int(np.linalg.matrix_rank(x))
    if df <= 0:
        raise TestNotApplicableError('test not applicable: no identifiable interaction contrasts')

    tau2, _, converged, _ = model.maximize()
    delta, cov = model.gls(tau2)
    vinv = np.linalg.inv(cov)
    xtv = x.T @ vinv
    projection = vinv - xtv.T @ np.linalg.pinv(xtv @ x) @ xtv
    statistic = max(0.0, float(delta @ projection @ delta))
    p = float(chi2.sf(statistic, df))
    logger.info('global-interaction-test', statistic=statistic, df=df, p=p, tau2=tau2, converged=converged)
    return GlobalTestResult(statistic=statistic, df=df, p=p, tau2_inconsistency=tau2)


########################################################################################################
# Loop test

def loops_for_target(target_design: Sequence[str]) -> Tuple[Tuple[str, str, str], ...]:
    key = tuple(sorted(target_design))
    if key not in COMPARATOR_LOOPS:
        raise KeyError('No comparator loops known for design {}'.format(' vs '.join(key)))
    return COMPARATOR_LOOPS[key]


def _edge_assignment(net: NetworkDataset, edges: Sequence[Tuple[int, int]]) -> Dict[Tuple[int, int], List[int]]:
    """
    Each study goes to one loop edge only: the edge with the fewest other studies, ties going to
    the earlier edge.
    """
    holders = {e: [i for i, s in enumerate(net.studies) if e[0] in s.real_arms and e[1] in s.real_arms]
               for e in edges}
    assigned: Dict[Tuple[int, int], List[int]] = {e: [] for e in edges}
    for i in range(net.n_studies):
        candidates = [e for e in edges if i in holders[e]]
        if not candidates:
            continue
        best = min(candidates, key=lambda e: (len(holders[e]) - 1, edges.index(e)))
        assigned[best].append(i)
    return assigned


def pool_edge(net: NetworkDataset, edge: Tuple[int, int], study_indexes: Sequence[int]) -> PooledEdge:
    """
    Random-effects (DerSimonian-Laird) pooled effect of ``edge[1]`` against ``edge[0]``. Falls back to
    the fixed-effect estimate when the moment estimate of tau^2 is not positive.
    """
    a, b = edge
    if not study_indexes:
        raise MissingEdgeError('No direct evidence on edge {} - {}'.format(net.label(a), net.label(b)))
    effects, variances = [], []
    for i in study_indexes:
        study = rebase_study(strip_pseudo_arm(net.studies[i]), a)
        j = study.contrast_arms.index(b)
        effects.append(float(study.y[j]))
        variances.append(float(study.s[j, j]))
    if len(effects) == 1:
        estimate, variance = effects[0], variances[0]
    else:
        res = combine_effects(np.array(effects), np.array(variances), method_re='dl')
        # statsmodels does not truncate tau^2 at zero.
        if res.tau2 > 0:
            estimate, variance = float(res.mean_effect_re), float(res.var_eff_w_re)
        else:
            estimate, variance = float(res.mean_effect_fe), float(res.var_eff_w_fe)
    return PooledEdge(treatments=edge, estimate=estimate, variance=variance,
                      study_ids=tuple(net.studies[i].study_id for i in study_indexes))


def bucher_loop_test(net: NetworkDataset, loop: Tuple[int, int, int]) -> LoopTestResult:
    """
    Inconsistency ``d_AB - d_AC + d_BC`` around the loop ``(A, B, C)``, with ``d_XY`` the pooled
    direct effect of Y against X.

    :raise MissingEdgeError: naming the first edge without direct evidence.
    """
    a, b, c = loop
    if len({a, b, c}) != 3:
        raise ValueError('A loop needs three distinct treatments, got {}'.format(loop))
    edges = [(a, b), (a, c), (b, c)]
    assigned = _edge_assignment(net, edges)
    pooled = [pool_edge(net, e, assigned[e]) for e in edges]
    ab, ac, bc = pooled
    inconsistency = ab.estimate - ac.estimate + bc.estimate
    variance = ab.variance + ac.variance + bc.variance
    z = inconsistency / np.sqrt(variance)
    p = float(2.0 * norm.sf(abs(z)))
    logger.debug('bucher-loop-test', loop=[net.label(t) for t in loop], z=z, p=p)
    return LoopTestResult(loop=(a, b, c), z=float(z), p=p, inconsistency=float(inconsistency),
                          variance=float(variance), edges=tuple(pooled))


def loop_by_labels(net: NetworkDataset, labels: Sequence[str]) -> Tuple[int, int, int]:
    ids = tuple(net.treatment_id(lbl) for lbl in labels)
    if len(ids) != 3:
        raise ValueError('A loop needs three treatments, got {}'.format(list(labels)))
    return ids  # type: ignore
