"""
Network bookkeeping: building the design partition, connectivity after exclusions,
and switching the reference of contrast estimates.
"""
from collections import Counter
from itertools import combinations
from typing import Collection, Dict, Iterable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from structlog import get_logger

from ..contrasts import basis_transform, rebase  # noqa: F401
from ..models import ContrastStudy, DesignKey, NetworkDataset, Treatment

logger = get_logger()


class NetworkError(Exception):
    pass


class EmptyNetworkError(NetworkError):
    pass


class DuplicateStudyError(NetworkError):
    pass


class DisconnectedNetworkError(NetworkError):
    pass


class UnknownTreatmentError(NetworkError):
    pass


def build_network(studies: Sequence[ContrastStudy],
                  treatments: Sequence[Treatment],
                  reference: Optional[int] = None) -> NetworkDataset:
    """
    Groups the studies by design.

    :param studies: the contrast-level studies.
    :param treatments: the treatment dictionary; ids must be 0..T-1 and labels unique.
    :param reference: the global reference. Defaults to the treatment present in the most studies.
    :return: a NetworkDataset whose designs are ordered by label.
    """
    if not studies:
        raise EmptyNetworkError('Cannot build a network without studies.')

    treatments = tuple(sorted(treatments, key=lambda t: t.id))
    if [t.id for t in treatments] != list(range(len(treatments))):
        raise NetworkError('Treatment ids must be dense 0..T-1, got {}'.format([t.id for t in treatments]))
    if len({t.label for t in treatments}) != len(treatments):
        raise NetworkError('Treatment labels must be unique.')

    seen = set()
    for study in studies:
        if study.study_id in seen:
            raise DuplicateStudyError('Duplicate study id {}'.format(study.study_id))
        seen.add(study.study_id)
        unknown = [a for a in study.arms if a >= len(treatments) or a < 0]
        if unknown:
            raise UnknownTreatmentError('Study {} uses unknown treatments {}'.format(study.study_id, unknown))

    by_design: Dict[DesignKey, List[int]] = {}
    for i, study in enumerate(studies):
        by_design.setdefault(study.design, []).append(i)

    def label_of(key: DesignKey) -> str:
        return ' vs '.join(sorted(treatments[a].label for a in key.arms))

    designs = {key: tuple(by_design[key]) for key in sorted(by_design, key=label_of)}

    if reference is None:
        reference = most_frequent_treatment(studies)
    elif reference < 0 or reference >= len(treatments):
        raise UnknownTreatmentError('Unknown reference treatment {}'.format(reference))

    net = NetworkDataset(treatments=treatments, studies=tuple(studies), designs=designs,
                         global_reference=reference)
    logger.debug('built-network', n_studies=net.n_studies, n_designs=net.n_designs,
                 reference=treatments[reference].label)
    return net


def most_frequent_treatment(studies: Iterable[ContrastStudy]) -> int:
    counts = Counter(a for s in studies for a in s.real_arms)
    # Ties go to the lowest id.
    return min(counts, key=lambda t: (-counts[t], t))


def exclude(net: NetworkDataset,
            designs: Collection[DesignKey] = (),
            studies: Collection[str] = ()) -> NetworkDataset:
    """
    A copy of the network without the studies of the given designs, nor the given study ids.
    """
    unknown = set(studies) - {s.study_id for s in net.studies}
    if unknown:
        raise NetworkError('Unknown study ids {}'.format(sorted(unknown)))
    kept = [s for s in net.studies if s.design not in designs and s.study_id not in studies]
    if not kept:
        raise EmptyNetworkError('No study left after exclusions.')
    return build_network(kept, net.treatments, net.global_reference)


def treatment_graph(studies: Iterable[ContrastStudy]) -> nx.MultiGraph:
    """Treatments as nodes, one edge per pair of arms compared within a study."""
    graph = nx.MultiGraph()
    for study in studies:
        graph.add_nodes_from(study.real_arms)
        for a, b in combinations(study.real_arms, 2):
            graph.add_edge(a, b, study_id=study.study_id)
    return graph


def connected_component(net: NetworkDataset,
                        exclude: Optional[DesignKey] = None) -> Tuple[Tuple[int, ...], Tuple[DesignKey, ...]]:
    """
    Treatments reachable from the global reference once the studies of ``exclude`` are removed.

    :param net: the network.
    :param exclude: a design to leave out.
    :return: (reachable treatment ids, designs containing an unreachable treatment).
    """
    remaining = [s for s in net.studies if s.design != exclude]
    graph = treatment_graph(remaining)
    if net.global_reference not in graph:
        raise DisconnectedNetworkError('reference disconnected: {} is not in any remaining study'.format(
            net.label(net.global_reference)))
    kept = tuple(sorted(nx.node_connected_component(graph, net.global_reference)))
    dropped = tuple(d for d in net.designs if d != exclude and not set(d.arms) <= set(kept))
    return kept, dropped


def is_connected(net: NetworkDataset) -> bool:
    kept, _ = connected_component(net)
    present = {a for s in net.studies for a in s.real_arms}
    return set(kept) == present


def rebase_study(study: ContrastStudy, to_reference: int) -> ContrastStudy:
    """
    Re-expresses a study's own contrasts against another of its arms.
    """
    if to_reference == study.reference:
        return study
    if to_reference not in study.arms:
        raise UnknownTreatmentError('Treatment {} is not an arm of study {}'.format(to_reference, study.study_id))
    t = basis_transform(study.arms, study.reference, to_reference)
    y, s = rebase(study.y, study.s, t)
    pseudo = study.reference if study.augmented else None
    if pseudo is not None:
        # The pseudo arm becomes a contrast component; drop it right away.
        keep = [i for i, a in enumerate(t.target_order) if a != pseudo]
        arms = tuple(a for a in study.arms if a != pseudo)
        return ContrastStudy(study_id=study.study_id, arms=arms, reference=to_reference,
                             y=y[keep], s=s[np.ix_(keep, keep)], augmented=False)
    return ContrastStudy(study_id=study.study_id, arms=study.arms, reference=to_reference, y=y, s=s,
                         augmented=False)


def strip_pseudo_arm(study: ContrastStudy) -> ContrastStudy:
    """
    Removes the augmentation pseudo arm, expressing the study against its first real arm.
    """
    if not study.augmented:
        return study
    return rebase_study(study, study.real_arms[0])
