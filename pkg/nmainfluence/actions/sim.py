"""
Simulation of antihypertensive-like networks with one inconsistent design.

Every replicate keeps the design structure of the shipped 26-study network (each slot doubled
for 52 studies), draws fresh arm-level data from the random-effects model, shifts the target
arm of the target design by ``omega`` and runs every detection method on the result.
"""
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from structlog import get_logger
from django.conf import settings

from ..models import STATISTICS, ArmRecord, BootstrapPlan, DesignKey, ScenarioConfig, ScenarioMetrics
from ..workers import parallel_map
from .bootstrap import replicate_rng, run_bootstrap
from .inconsistency import bucher_loop_test, loop_by_labels, loops_for_target
from .influence import INFLUENCE_MEASURES, NotEvaluableError, influence_table
from .ingest import FIXTURE_PATH, arms_to_network, group_by_study, read_arms_csv
from .reml import correlation_matrix, reml_fit

logger = get_logger()

SIM_REFERENCE = 'Placebo'
SIM_TREATMENTS = ('AB', 'ACE', 'ARB', 'BB', 'CCB', 'CT', 'DD')
# True log odds ratios against placebo, in SIM_TREATMENTS order.
MU0 = (0.264, -0.294, -0.210, -0.072, -0.129, -0.276, -0.441)
BASELINE_RISK = (0.006, 0.167)
ARM_SIZE = (204, 15268)

SCENARIOS_PATH = Path(__file__).resolve().parent.parent / 'data' / 'scenarios.yaml'
SCENARIO_KEYS = {'id', 'target_design', 'target_arm', 'n_studies', 'tau', 'omega', 'replications', 'bootstrap',
                 'seed'}


class ScenarioFileError(Exception):
    pass


def design_slots(n_studies: int = 26) -> List[Tuple[str, ...]]:
    """
    The arm labels of every simulated study: the shipped network's studies, each twice for 52.
    """
    if n_studies not in (26, 52):
        raise ValueError('n_studies must be 26 or 52, got {}'.format(n_studies))
    grouped = group_by_study(read_arms_csv(FIXTURE_PATH))
    slots = [tuple(sorted(a.treatment for a in arms)) for arms in grouped.values()]
    return slots * (n_studies // len(slots))


def study_effects(cfg: ScenarioConfig, rng: np.random.Generator, arms: Tuple[str, ...]) -> Dict[str, float]:
    """
    True log odds ratios against placebo of one study: ``MVN(mu0, tau^2 P)``, plus ``omega`` on the
    target arm when the study has the target design.
    """
    mu0 = np.array(MU0)
    if cfg.tau > 0:
        theta = rng.multivariate_normal(mu0, cfg.tau ** 2 * correlation_matrix(len(mu0)), method='cholesky')
    else:
        theta = mu0.copy()
    effects = {label: float(value) for label, value in zip(SIM_TREATMENTS, theta)}
    effects[SIM_REFERENCE] = 0.0
    if arms == tuple(sorted(cfg.target_design)):
        effects[cfg.target_arm] += cfg.omega
    return effects


def arm_risk(p0: float, effect: float) -> float:
    """
    Event risk of an arm whose log odds ratio against a baseline risk ``p0`` is ``effect``.
    """
    odds = p0 * np.exp(effect)
    return float(odds / (odds + 1.0 - p0))


def generate_replicate(cfg: ScenarioConfig, rng: np.random.Generator,
                       slots: Optional[Sequence[Tuple[str, ...]]] = None) -> List[ArmRecord]:
    """
    Arm-level data for one simulated network.

    Per study: a baseline risk ``p0 ~ U(0.006, 0.167)``, the true effects of ``study_effects``, one
    arm size drawn from 204..15268 and binomial event counts.
    """
    slots = design_slots(cfg.n_studies) if slots is None else slots
    records = []
    for k, arms in enumerate(slots):
        p0 = rng.uniform(*BASELINE_RISK)
        effects = study_effects(cfg, rng, arms)
        n = int(rng.integers(ARM_SIZE[0], ARM_SIZE[1] + 1))
        for label in arms:
            events = int(rng.binomial(n, arm_risk(p0, effects[label])))
            records.append(ArmRecord(study_id='S{:02d}'.format(k + 1), treatment=label, events=events, total=n))
    return records


def _scenario_replicate(args) -> Optional[Dict[str, bool]]:
    cfg, index, slots = args
    rng = replicate_rng(cfg.seed, index)
    try:
        records = generate_replicate(cfg, rng, slots)
        net = arms_to_network(records, reference=SIM_REFERENCE)
        target = DesignKey.of(net.treatment_id(lbl) for lbl in cfg.target_design)
        full = reml_fit(net)
        rows, _ = influence_table(net, full=full, workers=1)
        row = next((r for r in rows if r.design == target), None)
        if row is None:
            raise NotEvaluableError('Target design {} is not evaluable'.format(net.design_label(target)))
        plan = BootstrapPlan(B=cfg.bootstrap, seed=int(rng.integers(2 ** 63)), statistics=STATISTICS,
                             designs=tuple(r.design for r in rows))
        boot = run_bootstrap(net, plan, full=full, workers=1)
        loops = [bucher_loop_test(net, loop_by_labels(net, labels)) for labels in loops_for_target(cfg.target_design)]
    except Exception as e:
        logger.error('scenario-replicate-failed', scenario=cfg.id, index=index, error=str(e), exc_info=e)
        return None

    alpha = settings.NMA_SIGNIFICANCE
    outcome: Dict[str, bool] = {}
    for name in STATISTICS:
        o = boot.entry(target, name).o_value
        outcome['o_' + name] = o is not None and o < alpha
    for name in INFLUENCE_MEASURES:
        rank = row.ranks.get(name)
        outcome['top_' + name] = rank is not None and rank <= settings.NMA_TOP_K
    for i, loop in enumerate(loops):
        outcome['loop_{}'.format(i + 1)] = loop.p < alpha
    return outcome


def run_scenario(cfg: ScenarioConfig, workers: Optional[int] = None, progress: bool = False) -> ScenarioMetrics:
    """
    Runs ``cfg.replications`` simulated networks and aggregates detection rates on the target design.

    :return: ScenarioMetrics; failed replicates are excluded from the rates and counted.
    """
    workers = settings.NMA_WORKERS if workers is None else workers
    slots = design_slots(cfg.n_studies)
    logger.info('run-scenario-start', scenario=cfg.id, replications=cfg.replications, bootstrap=cfg.bootstrap)
    outcomes = parallel_map(_scenario_replicate, [(cfg, r, slots) for r in range(cfg.replications)],
                            workers=workers, progress=progress)
    used = [o for o in outcomes if o is not None]
    failures = len(outcomes) - len(used)
    counts: Dict[str, int] = defaultdict(int)
    for o in used:
        for key, hit in o.items():
            counts[key] += int(hit)

    def rate(key: str) -> float:
        return counts[key] / len(used) if used else float('nan')

    n_loops = len(loops_for_target(cfg.target_design))
    metrics = ScenarioMetrics(
        scenario=cfg,
        replications_used=len(used),
        failures=failures,
        threshold_rates={name: rate('o_' + name) for name in STATISTICS},
        top_rates={name: rate('top_' + name) for name in INFLUENCE_MEASURES},
        loop_rates=tuple(rate('loop_{}'.format(i + 1)) for i in range(n_loops)),
    )
    logger.info('run-scenario-done', scenario=cfg.id, used=len(used), failures=failures,
                threshold_rates=dict(metrics.threshold_rates))
    return metrics


def load_scenarios(path: Union[str, Path, None] = None) -> List[ScenarioConfig]:
    """
    Reads a YAML scenario file::

        defaults:            # optional, applied to every scenario
          replications: 200
        scenarios:
          - id: 1
            target_design: [ARB, CT]
            target_arm: ARB
            n_studies: 26
            tau: 0.05
            omega: 0.0
    """
    path = SCENARIOS_PATH if path is None else Path(path)
    try:
        with open(path, encoding='utf-8') as f:
            doc = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ScenarioFileError('Cannot parse {}: {}'.format(path, e))
    if not isinstance(doc, dict) or not isinstance(doc.get('scenarios'), list):
        raise ScenarioFileError('{} must hold a "scenarios" list'.format(path))
    defaults = doc.get('defaults') or {}
    configs = []
    for entry in doc['scenarios']:
        merged = {'bootstrap': settings.NMA_SIM_DEFAULT_B, **defaults, **entry}
        unknown = set(merged) - SCENARIO_KEYS
        if unknown:
            raise ScenarioFileError('Scenario {}: unknown keys {}'.format(merged.get('id'), sorted(unknown)))
        try:
            merged['target_design'] = tuple(merged['target_design'])
            configs.append(ScenarioConfig(**merged))
        except (KeyError, TypeError, ValueError) as e:
            raise ScenarioFileError('Scenario {}: {}'.format(merged.get('id'), e))
    ids = [c.id for c in configs]
    if len(set(ids)) != len(ids):
        raise ScenarioFileError('Duplicate scenario ids in {}'.format(path))
    return configs
