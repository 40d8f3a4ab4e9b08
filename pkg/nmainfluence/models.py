from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np


def _frozen_array(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


########################################################################################################
# Treatments and designs

@dataclass(frozen=True)
class Treatment:
    id: int
    label: str


@dataclass(frozen=True, order=True)
class DesignKey:
    """
    The set of treatments compared by a study. Order-insensitive:
    ``DesignKey.of([4, 0, 5]) == DesignKey.of([5, 4, 0])``.
    """
    arms: Tuple[int, ...]

    def __post_init__(self):
        arms = tuple(sorted(set(int(a) for a in self.arms)))
        if len(arms) < 2:
            raise ValueError('A design compares at least 2 treatments, got {}'.format(self.arms))
        object.__setattr__(self, 'arms', arms)

    @classmethod
    def of(cls, arms: Iterable[int]) -> 'DesignKey':
        return cls(tuple(arms))

    @property
    def n_comparisons(self) -> int:
        return len(self.arms) - 1

    def __contains__(self, treatment: int) -> bool:
        return treatment in self.arms


@dataclass(frozen=True)
class BasisTransform:
    """
    Integer map taking contrasts against ``from_reference`` to contrasts against ``to_reference``.
    Rows follow ``sorted(treatments) - {to_reference}``, columns ``sorted(treatments) - {from_reference}``.
    """
    from_reference: int
    to_reference: int
    treatments: Tuple[int, ...]
    matrix: np.ndarray = field(compare=False)

    @property
    def source_order(self) -> Tuple[int, ...]:
        return tuple(t for t in self.treatments if t != self.from_reference)

    @property
    def target_order(self) -> Tuple[int, ...]:
        return tuple(t for t in self.treatments if t != self.to_reference)


########################################################################################################
# Data

@dataclass(frozen=True)
class ArmRecord:
    study_id: str
    treatment: str
    events: float
    total: float

    def __post_init__(self):
        if self.events < 0:
            raise ValueError('Negative event count in study {}'.format(self.study_id))
        if self.total <= 0:
            raise ValueError('Non-positive arm size in study {}'.format(self.study_id))
        if self.events > self.total:
            raise ValueError('More events than patients in study {} arm {}'.format(self.study_id, self.treatment))


@dataclass(frozen=True, eq=False)
class ContrastStudy:
    """
    One study of the contrast-based model: ``y`` holds log odds ratios of every non-reference
    arm (in ascending treatment id order) against ``reference``, ``s`` their within-study covariance.
    """
    study_id: str
    arms: Tuple[int, ...]
    reference: int
    y: np.ndarray
    s: np.ndarray
    augmented: bool = False

    def __post_init__(self):
        arms = tuple(sorted(set(self.arms)))
        object.__setattr__(self, 'arms', arms)
        object.__setattr__(self, 'y', _frozen_array(np.atleast_1d(self.y)))
        object.__setattr__(self, 's', _frozen_array(np.atleast_2d(self.s)))
        if len(arms) < 2:
            raise ValueError('Study {} has fewer than 2 arms'.format(self.study_id))
        if self.reference not in arms:
            raise ValueError('Reference of study {} is not one of its arms'.format(self.study_id))
        p = len(arms) - 1
        if self.y.shape != (p,) or self.s.shape != (p, p):
            raise ValueError('Study {}: y/s dimensions do not match {} contrasts'.format(self.study_id, p))

    @property
    def contrast_arms(self) -> Tuple[int, ...]:
        return tuple(a for a in self.arms if a != self.reference)

    @property
    def real_arms(self) -> Tuple[int, ...]:
        if self.augmented:
            return self.contrast_arms
        return self.arms

    @property
    def design(self) -> DesignKey:
        return DesignKey.of(self.real_arms)

    @property
    def n_comparisons(self) -> int:
        return len(self.real_arms) - 1


@dataclass(frozen=True, eq=False)
class NetworkDataset:
    treatments: Tuple[Treatment, ...]
    studies: Tuple[ContrastStudy, ...]
    designs: Mapping[DesignKey, Tuple[int, ...]]
    global_reference: int

    @property
    def n_studies(self) -> int:
        return len(self.studies)

    @property
    def n_designs(self) -> int:
        return len(self.designs)

    @property
    def treatment_ids(self) -> Tuple[int, ...]:
        return tuple(t.id for t in self.treatments)

    def label(self, treatment_id: int) -> str:
        return self.treatments[treatment_id].label

    def treatment_id(self, label: str) -> int:
        for t in self.treatments:
            if t.label == label:
                return t.id
        raise KeyError(label)

    def design_label(self, key: DesignKey) -> str:
        return ' vs '.join(sorted(self.label(a) for a in key.arms))

    def design_by_label(self, label: str) -> DesignKey:
        for key in self.designs:
            if self.design_label(key) == label:
                return key
        raise KeyError(label)

    def design_number(self, key: DesignKey) -> int:
        """1-based position of the design in label order, as used in reports."""
        return list(self.designs).index(key) + 1

    def studies_of(self, key: DesignKey) -> List[ContrastStudy]:
        return [self.studies[i] for i in self.designs[key]]


########################################################################################################
# Fits

@dataclass(frozen=True, eq=False)
class FitResult:
    """
    A fit of the consistency model. ``mu_hat`` holds log odds ratios of ``treatments`` against
    ``reference``; ``cov_mu`` is their estimated covariance.
    """
    mu_hat: np.ndarray
    tau2_hat: float
    cov_mu: np.ndarray
    loglik_restricted: float
    i2: float
    r_stat: float
    converged: bool
    n_used: int
    reference: int
    treatments: Tuple[int, ...]
    degenerate: bool = False

    @property
    def tau_hat(self) -> float:
        return float(np.sqrt(self.tau2_hat))

    @property
    def p(self) -> int:
        return len(self.treatments)


@dataclass(frozen=True, eq=False)
class LodoFit:
    design: DesignKey
    fit: FitResult
    dropped_designs: Tuple[DesignKey, ...] = ()
    dropped_treatments: Tuple[int, ...] = ()


@dataclass(frozen=True)
class InfluenceRow:
    design: DesignKey
    label: str
    number: int
    n_studies: int
    psi: Optional[float] = None
    mdffits: Optional[float] = None
    phi: Optional[float] = None
    xi: Optional[float] = None
    o_psi: Optional[float] = None
    o_mdffits: Optional[float] = None
    o_phi: Optional[float] = None
    o_xi: Optional[float] = None
    ranks: Mapping[str, Optional[int]] = field(default_factory=dict)
    o_ranks: Mapping[str, Optional[int]] = field(default_factory=dict)

    def value(self, measure: str) -> Optional[float]:
        return getattr(self, measure)

    def o_value(self, measure: str) -> Optional[float]:
        return getattr(self, 'o_' + measure)


@dataclass(frozen=True)
class WaldResult:
    design: DesignKey
    label: str
    number: int
    w: float
    df: int
    p_chi2: float
    reference: int
    treatments: Tuple[int, ...]
    mu_subset: Tuple[float, ...]
    mu_rest: Tuple[float, ...]
    p_boot: Optional[float] = None


@dataclass(frozen=True)
class GlobalTestResult:
    statistic: float
    df: int
    p: float
    tau2_inconsistency: float


@dataclass(frozen=True)
class PooledEdge:
    treatments: Tuple[int, int]
    estimate: float
    variance: float
    study_ids: Tuple[str, ...]


@dataclass(frozen=True)
class LoopTestResult:
    loop: Tuple[int, int, int]
    z: float
    p: float
    inconsistency: float
    variance: float
    edges: Tuple[PooledEdge, ...]


########################################################################################################
# Bootstrap

STATISTICS = ('psi', 'mdffits', 'phi', 'xi', 'w')


@dataclass(frozen=True)
class BootstrapPlan:
    B: int
    seed: int
    statistics: Tuple[str, ...] = STATISTICS
    designs: Optional[Tuple[DesignKey, ...]] = None

    def __post_init__(self):
        if self.B < 1:
            raise ValueError('A bootstrap plan needs B >= 1, got {}'.format(self.B))
        if not self.statistics or len(set(self.statistics)) != len(self.statistics):
            raise ValueError('A bootstrap plan needs distinct statistics, got {}'.format(list(self.statistics)))


@dataclass(frozen=True)
class BootstrapEntry:
    design: DesignKey
    statistic: str
    realized: Optional[float]
    replicates: Tuple[float, ...]
    o_value: Optional[float]
    failures: int
    flagged: bool


@dataclass(frozen=True)
class BootstrapResult:
    plan: BootstrapPlan
    entries: Mapping[Tuple[DesignKey, str], BootstrapEntry]
    failed_replicates: int = 0

    def entry(self, design: DesignKey, statistic: str) -> BootstrapEntry:
        return self.entries[(design, statistic)]

    def o_values(self, statistic: str) -> Dict[DesignKey, Optional[float]]:
        return {d: e.o_value for (d, s), e in self.entries.items() if s == statistic}


########################################################################################################
# Simulation

@dataclass(frozen=True)
class ScenarioConfig:
    id: int
    target_design: Tuple[str, ...]
    target_arm: str
    n_studies: int = 26
    tau: float = 0.05
    omega: float = 0.0
    replications: int = 200
    bootstrap: int = 200
    seed: int = 1

    def __post_init__(self):
        if self.n_studies not in (26, 52):
            raise ValueError('n_studies must be 26 or 52, got {}'.format(self.n_studies))
        if self.target_arm not in self.target_design:
            raise ValueError('Target arm {} is not part of design {}'.format(self.target_arm, self.target_design))
        if self.replications < 1 or self.bootstrap < 1:
            raise ValueError('replications and bootstrap must be positive')


@dataclass(frozen=True)
class ScenarioMetrics:
    scenario: ScenarioConfig
    replications_used: int
    failures: int
    # method name -> rate of P/O < 0.05 on the target design
    threshold_rates: Mapping[str, float]
    # influence measure -> rate of the target design ranking in the top k
    top_rates: Mapping[str, float]
    loop_rates: Sequence[float]

    def standard_error(self, rate: float) -> float:
        if self.replications_used == 0:
            return float('nan')
        return float(np.sqrt(rate * (1.0 - rate) / self.replications_used))
