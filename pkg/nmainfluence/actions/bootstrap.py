"""
Parametric bootstrap under the fitted consistency model.

Every replicate draws new study contrasts from the full-data fit, refits the network (tau^2
included) and recomputes the requested statistics for every design. Each replicate owns a
counter-based random stream keyed by the seed and its index, so results do not depend on the
number of workers.
"""
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from structlog import get_logger
from django.conf import settings

from .. import measures
from ..models import (
    BootstrapEntry, BootstrapPlan, BootstrapResult, ContrastStudy, DesignKey, FitResult, NetworkDataset,
)
from ..workers import parallel_map
from . import inconsistency  # noqa: F401
from .influence import NotEvaluableError
from .network import build_network
from .reml import UnderIdentifiedError, correlation_matrix, fit_contrasts, reml_fit

logger = get_logger()


class ReplicateNotConvergedError(Exception):
    pass


# Errors that make a single replicate unusable without stopping the run.
REPLICATE_ERRORS = (np.linalg.LinAlgError, UnderIdentifiedError, NotEvaluableError, ReplicateNotConvergedError,
                    ValueError, FloatingPointError)


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def resample_network(fit: FitResult, net: NetworkDataset, rng: np.random.Generator) -> NetworkDataset:
    """
    Draws ``theta_i ~ MVN(X_i mu, tau^2 P)`` then ``Y_i ~ MVN(theta_i, S_i)`` for every study.
    Arms, references and within-study covariances are kept.
    """
    pooled = fit_contrasts(fit)
    studies = []
    for study in net.studies:
        mean = pooled.rebase(study.reference).restrict(study.contrast_arms).mean
        p = len(mean)
        if fit.tau2_hat > 0:
            theta = rng.multivariate_normal(mean, fit.tau2_hat * correlation_matrix(p), method='cholesky')
        else:
            theta = mean
        y = rng.multivariate_normal(theta, np.asarray(study.s), method='cholesky')
        studies.append(ContrastStudy(study_id=study.study_id, arms=study.arms, reference=study.reference,
                                     y=y, s=study.s, augmented=study.augmented))
    return build_network(studies, net.treatments, net.global_reference)


def o_value(realized: float, replicates: Sequence[float], tail: str = measures.UPPER) -> float:
    """
    Share of replicates at least as extreme as ``realized``: ``>=`` for the upper tail, ``<=`` for
    the lower one. Missing (nan) replicates are ignored.
    """
    values = np.asarray(replicates, dtype=float)
    values = values[~np.isnan(values)]
    if len(values) == 0:
        raise ValueError('o_value needs at least one replicate')
    if tail == measures.UPPER:
        return float(np.mean(values >= realized))
    if tail == measures.LOWER:
        return float(np.mean(values <= realized))
    raise ValueError('Unknown tail {}'.format(tail))


def bootstrap_pvalue(realized: float, replicates: Sequence[float]) -> float:
    return o_value(realized, replicates, measures.UPPER)


def _statistics(net: NetworkDataset, full: FitResult, designs: Sequence[DesignKey],
                statistics: Sequence[measures.Measure],
                replicate: bool) -> Dict[Tuple[DesignKey, str], Optional[float]]:
    values: Dict[Tuple[DesignKey, str], Optional[float]] = {}
    for design in designs:
        ctx = measures.DesignContext(net, design, full, replicate=replicate)
        try:
            if replicate and not ctx.lodo.fit.converged:
                raise ReplicateNotConvergedError('REML did not converge without the design')
            for measure in statistics:
                values[(design, measure.name)] = measure.compute(ctx)
        except REPLICATE_ERRORS as e:
            if not replicate:
                raise
            logger.debug('replicate-design-failed', design=net.design_label(design), error=str(e))
            for measure in statistics:
                values[(design, measure.name)] = None
    return values


def _replicate(args) -> Tuple[int, Optional[Dict[Tuple[DesignKey, str], Optional[float]]]]:
    net, full, designs, statistics, seed, index = args
    rng = replicate_rng(seed, index)
    try:
        sample = resample_network(full, net, rng)
        sample_fit = reml_fit(sample)
        if not sample_fit.converged:
            raise ReplicateNotConvergedError('REML did not converge, tau^2 = {}'.format(sample_fit.tau2_hat))
    except REPLICATE_ERRORS as e:
        logger.debug('replicate-failed', index=index, error=str(e))
        return index, None
    return index, _statistics(sample, sample_fit, designs, statistics, replicate=True)


def evaluable_designs(net: NetworkDataset, full: FitResult,
                      designs: Optional[Sequence[DesignKey]] = None) -> List[DesignKey]:
    designs = list(designs) if designs is not None else list(net.designs)
    kept = []
    for d in designs:
        try:
            measures.DesignContext(net, d, full).lodo
            kept.append(d)
        except NotEvaluableError:
            logger.info('design-not-evaluable', design=net.design_label(d))
    return kept


def run_bootstrap(net: NetworkDataset,
                  plan: BootstrapPlan,
                  full: Optional[FitResult] = None,
                  workers: Optional[int] = None,
                  progress: bool = False) -> BootstrapResult:
    """
    :param net: the observed network.
    :param plan: replicate count, seed, statistics and designs.
    :param full: the observed full-data fit, computed when not given.
    :param workers: worker processes; results do not depend on it.
    :param progress: show a progress bar.
    :return: a BootstrapResult with one entry per evaluable design and statistic.
    """
    workers = settings.NMA_WORKERS if workers is None else workers
    full = full or reml_fit(net)
    designs = evaluable_designs(net, full, plan.designs)
    stats: Dict[str, int] = defaultdict(int)
    logger.info('bootstrap-start', B=plan.B, seed=plan.seed, designs=len(designs), statistics=list(plan.statistics),
                workers=workers)

    # Workers get the measure instances, not their registry names.
    statistics = tuple(measures.measure_for_name(name) for name in plan.statistics)
    tails = {m.name: m.tail for m in statistics}
    realized = _statistics(net, full, designs, statistics, replicate=False)
    tasks = [(net, full, tuple(designs), statistics, plan.seed, b) for b in range(plan.B)]
    outcomes = parallel_map(_replicate, tasks, workers=workers, progress=progress)

    collected: Dict[Tuple[DesignKey, str], List[float]] = {key: [] for key in realized}
    failures: Dict[Tuple[DesignKey, str], int] = defaultdict(int)
    for index, values in sorted(outcomes, key=lambda o: o[0]):
        if values is None:
            stats['failed_replicates'] += 1
        for key in collected:
            value = None if values is None else values.get(key)
            if value is None:
                failures[key] += 1
                collected[key].append(float('nan'))
            else:
                collected[key].append(float(value))

    limit = settings.NMA_FAILURE_FLAG_FRACTION * plan.B
    entries = {}
    for (design, name), reps in collected.items():
        value = realized[(design, name)]
        n_ok = plan.B - failures[(design, name)]
        o = None
        if value is not None and n_ok > 0:
            o = o_value(value, reps, tails[name])
        flagged = failures[(design, name)] >= limit and failures[(design, name)] > 0
        if flagged:
            stats['flagged'] += 1
            logger.warning('bootstrap-failures', design=net.design_label(design), statistic=name,
                           failures=failures[(design, name)], B=plan.B)
        entries[(design, name)] = BootstrapEntry(design=design, statistic=name, realized=value,
                                                 replicates=tuple(reps), o_value=o,
                                                 failures=failures[(design, name)], flagged=flagged)

    logger.info('bootstrap-done', stats=dict(stats))
    return BootstrapResult(plan=plan, entries=entries, failed_replicates=stats['failed_replicates'])


def dump_replicates(result: BootstrapResult, net: NetworkDataset, out_dir: Union[str, Path]) -> List[Path]:
    """
    Writes ``replicates_<statistic>.csv`` files with columns replicate_index, design, value.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in result.plan.statistics:
        records = []
        for (design, statistic), entry in result.entries.items():
            if statistic != name:
                continue
            label = net.design_label(design)
            records.extend({'replicate_index': i, 'design': label, 'value': v} for i, v in enumerate(entry.replicates))
        path = out_dir / 'replicates_{}.csv'.format(name)
        pd.DataFrame(records, columns=['replicate_index', 'design', 'value']).to_csv(path, index=False)
        paths.append(path)
    logger.info('dumped-replicates', out_dir=str(out_dir), files=len(paths))
    return paths
