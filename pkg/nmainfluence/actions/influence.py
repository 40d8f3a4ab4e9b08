"""
Leave-one-design-out (LODO) diagnostics.

For every design the consistency model is refitted without that design's studies and compared
with the full fit four ways:

* ``psi``: mean standardized residual of the design's own studies under the LODO fit;
* ``mdffits``: shift of the pooled estimates, scaled by the LODO covariance;
* ``phi``: ratio of the LODO to the full between-study variance;
* ``xi``: ratio of the LODO to the full I^2.
"""
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from structlog import get_logger
from django.conf import settings

from .. import measures
from ..models import ContrastStudy, DesignKey, FitResult, InfluenceRow, LodoFit, NetworkDataset
from ..workers import parallel_map
from .network import DisconnectedNetworkError, build_network, connected_component, strip_pseudo_arm
from .reml import correlation_matrix, fit_contrasts, reml_fit

logger = get_logger()

INFLUENCE_MEASURES = ('psi', 'mdffits', 'phi', 'xi')


class NotEvaluableError(Exception):
    pass


def lodo_fit(net: NetworkDataset, design: DesignKey) -> LodoFit:
    """
    Refits the network without the studies of ``design``.

    Designs left with a treatment no longer connected to the global reference are dropped too.

    :raise NotEvaluableError: when a treatment of ``design`` itself becomes disconnected.
    """
    if design not in net.designs:
        raise KeyError('Design {} is not part of the network'.format(design))
    try:
        kept, dropped = connected_component(net, exclude=design)
    except DisconnectedNetworkError as e:
        raise NotEvaluableError(str(e))
    lost = [a for a in design.arms if a not in kept]
    if lost:
        raise NotEvaluableError('not evaluable: {} disconnected without {}'.format(
            [net.label(a) for a in lost], net.design_label(design)))
    if dropped:
        logger.warning('lodo-dropped-designs', design=net.design_label(design),
                       dropped=[net.design_label(d) for d in dropped])

    removed = set(dropped) | {design}
    remaining = [s for s in net.studies if s.design not in removed]
    reduced = build_network(remaining, net.treatments, net.global_reference)
    fit = reml_fit(reduced, reference=net.global_reference)
    present = {a for s in remaining for a in s.real_arms}
    dropped_treatments = tuple(t for t in net.treatment_ids if t not in present)
    return LodoFit(design=design, fit=fit, dropped_designs=tuple(dropped), dropped_treatments=dropped_treatments)


def studentized_residual(study: ContrastStudy, lodo: LodoFit) -> float:
    """
    Quadratic form of the study's deviation from the LODO prediction, per contrast:
    ``e' (S_i + tau^2 P + Cov(mu)) ^-1 e / p_i`` with every term on the study's own reference.
    """
    study = strip_pseudo_arm(study)
    pooled = fit_contrasts(lodo.fit)
    missing = [a for a in study.arms if a not in pooled.all_treatments]
    if missing:
        raise NotEvaluableError('Study {}: treatments {} are not estimable without its design'.format(
            study.study_id, missing))
    predicted = pooled.rebase(study.reference).restrict(study.contrast_arms)
    p = len(study.contrast_arms)
    v = np.asarray(study.s) + lodo.fit.tau2_hat * correlation_matrix(p) + predicted.cov
    e = np.asarray(study.y) - predicted.mean
    return float(e @ np.linalg.solve(v, e)) / p


def psi(net: NetworkDataset, design: DesignKey, lodo: Optional[LodoFit] = None) -> float:
    """Mean studentized residual over the studies of ``design``."""
    lodo = lodo or lodo_fit(net, design)
    return float(np.mean([studentized_residual(s, lodo) for s in net.studies_of(design)]))


def mdffits(net: NetworkDataset, design: DesignKey, full: FitResult, lodo: Optional[LodoFit] = None) -> float:
    """
    ``(mu - mu_(-d))' Cov(mu_(-d))^-1 (mu - mu_(-d)) / p_d`` on the treatments both fits estimate,
    taken against the design's first arm.
    """
    lodo = lodo or lodo_fit(net, design)
    anchor = design.arms[0]
    reduced = fit_contrasts(lodo.fit).rebase(anchor)
    complete = fit_contrasts(full).rebase(anchor)
    shared = [t for t in reduced.treatments if t in complete.treatments]
    if not shared:
        raise NotEvaluableError('No treatment shared between the full and reduced fits')
    reduced = reduced.restrict(shared)
    shift = complete.restrict(shared).mean - reduced.mean
    return float(shift @ np.linalg.solve(reduced.cov, shift)) / design.n_comparisons


def _ratio(numerator: float, denominator: float, replicate: bool) -> Optional[float]:
    if denominator > 0:
        return numerator / denominator
    if not replicate:
        return None
    return 1.0 if numerator <= 0 else float('inf')


def heterogeneity_ratios(net: NetworkDataset, design: DesignKey, full: FitResult,
                         lodo: Optional[LodoFit] = None,
                         replicate: bool = False) -> Tuple[Optional[float], Optional[float]]:
    """
    :return: (phi, xi). A zero full-fit denominator gives None, or inside bootstrap replicates
             1 for 0/0 and infinity otherwise.
    """
    lodo = lodo or lodo_fit(net, design)
    return (_ratio(lodo.fit.tau2_hat, full.tau2_hat, replicate),
            _ratio(lodo.fit.i2, full.i2, replicate))


########################################################################################################
# Registered measures

class PsiMeasure(measures.Measure):
    name = 'psi'
    tail = measures.UPPER
    descending = True

    def compute(self, ctx: measures.DesignContext) -> Optional[float]:
        return psi(ctx.net, ctx.design, ctx.lodo)


class MdffitsMeasure(measures.Measure):
    name = 'mdffits'
    tail = measures.UPPER
    descending = True

    def compute(self, ctx: measures.DesignContext) -> Optional[float]:
        return mdffits(ctx.net, ctx.design, ctx.full, ctx.lodo)


class PhiMeasure(measures.Measure):
    name = 'phi'
    tail = measures.LOWER
    descending = False

    def compute(self, ctx: measures.DesignContext) -> Optional[float]:
        return _ratio(ctx.lodo.fit.tau2_hat, ctx.full.tau2_hat, ctx.replicate)


class XiMeasure(measures.Measure):
    name = 'xi'
    tail = measures.LOWER
    descending = False

    def compute(self, ctx: measures.DesignContext) -> Optional[float]:
        return _ratio(ctx.lodo.fit.i2, ctx.full.i2, ctx.replicate)


for _m in (PsiMeasure(), MdffitsMeasure(), PhiMeasure(), XiMeasure()):
    measures.register(_m)


########################################################################################################
# Tables

def _design_values(args) -> Tuple[DesignKey, Optional[Dict[str, Optional[float]]], str]:
    net, full, design, statistics = args
    ctx = measures.DesignContext(net, design, full)
    try:
        return design, {m.name: m.compute(ctx) for m in statistics}, ''
    except NotEvaluableError as e:
        return design, None, str(e)


def rank_values(values: Dict[DesignKey, Optional[float]], order: Sequence[DesignKey],
                descending: bool) -> Dict[DesignKey, Optional[int]]:
    """
    1-based ranks; None values are not ranked. Ties keep the design order.
    """
    position = {d: i for i, d in enumerate(order)}
    ranked = [d for d in order if values.get(d) is not None]
    sign = -1.0 if descending else 1.0
    ranked.sort(key=lambda d: (sign * values[d], position[d]))
    ranks: Dict[DesignKey, Optional[int]] = {d: None for d in order}
    for i, d in enumerate(ranked):
        ranks[d] = i + 1
    return ranks


def influence_table(net: NetworkDataset,
                    full: Optional[FitResult] = None,
                    statistics: Sequence[str] = INFLUENCE_MEASURES,
                    workers: Optional[int] = None,
                    progress: bool = False) -> Tuple[List[InfluenceRow], List[Tuple[DesignKey, str]]]:
    """
    Computes the LODO diagnostics for every design.

    :param net: the network.
    :param full: the full-data fit against the global reference, computed when not given.
    :param statistics: which measures to compute.
    :param workers: worker processes for the refits.
    :param progress: show a progress bar.
    :return: (rows in design order, [(design, reason)] for designs that are not evaluable)
    """
    logger.info('influence-table-start', designs=net.n_designs, statistics=list(statistics))
    full = full or reml_fit(net)
    workers = settings.NMA_WORKERS if workers is None else workers
    resolved = tuple(measures.measure_for_name(name) for name in statistics)
    results = parallel_map(_design_values, [(net, full, d, resolved) for d in net.designs],
                           workers=workers, progress=progress)

    evaluable = [(d, values) for d, values, _ in results if values is not None]
    not_evaluable = [(d, reason) for d, values, reason in results if values is None]
    for d, reason in not_evaluable:
        logger.info('design-not-evaluable', design=net.design_label(d), reason=reason)

    order = [d for d, _ in evaluable]
    ranks = {m.name: rank_values({d: v[m.name] for d, v in evaluable}, order, m.descending) for m in resolved}
    rows = []
    for d, values in evaluable:
        rows.append(InfluenceRow(design=d, label=net.design_label(d), number=net.design_number(d),
                                 n_studies=len(net.designs[d]), ranks={n: ranks[n][d] for n in statistics},
                                 **values))
    logger.info('influence-table-done', evaluable=len(rows), not_evaluable=len(not_evaluable))
    return rows, not_evaluable


def with_o_values(rows: Sequence[InfluenceRow],
                  o_values: Dict[str, Dict[DesignKey, Optional[float]]]) -> List[InfluenceRow]:
    """
    Attaches bootstrap O-values and their ascending ranks to the rows.
    """
    order = [r.design for r in rows]
    o_ranks = {name: rank_values(values, order, descending=False) for name, values in o_values.items()}
    updated = []
    for r in rows:
        fields = {'o_' + name: values.get(r.design) for name, values in o_values.items() if name in INFLUENCE_MEASURES}
        updated.append(InfluenceRow(
            design=r.design, label=r.label, number=r.number, n_studies=r.n_studies,
            psi=r.psi, mdffits=r.mdffits, phi=r.phi, xi=r.xi,
            o_psi=fields.get('o_psi', r.o_psi), o_mdffits=fields.get('o_mdffits', r.o_mdffits),
            o_phi=fields.get('o_phi', r.o_phi), o_xi=fields.get('o_xi', r.o_xi),
            ranks=r.ranks, o_ranks={n: o_ranks[n][r.design] for n in o_ranks},
        ))
    return updated
