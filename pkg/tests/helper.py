from functools import lru_cache
from typing import Dict, Sequence, Tuple

import numpy as np

from nmainfluence.actions.ingest import FIXTURE_PATH, arms_to_network, read_arms_csv
from nmainfluence.actions.network import build_network
from nmainfluence.models import ArmRecord, ContrastStudy, NetworkDataset, Treatment


def assert_attrs(entity, expected_attrs):
    """
    Assert that an entity has the given attributes.
    Floats are compared with a relative tolerance of 1e-9.
    """
    for k, expected in expected_attrs.items():
        attr = getattr(entity, k)
        if isinstance(expected, float):
            assert np.isclose(attr, expected, rtol=1e-9, atol=0), '{} was {}, expected {}'.format(k, attr, expected)
        else:
            assert attr == expected, '{} was {}, expected {}'.format(k, attr, expected)


@lru_cache(maxsize=None)
def fixture_records() -> Tuple[ArmRecord, ...]:
    return tuple(read_arms_csv(FIXTURE_PATH))


@lru_cache(maxsize=None)
def fixture_network(reference: str = 'Placebo', augment: bool = False,
                    exclude_studies: Tuple[str, ...] = ()) -> NetworkDataset:
    records = [r for r in fixture_records() if r.study_id not in exclude_studies]
    return arms_to_network(records, reference=reference, augment=augment)


def arms(study_id: str, *cells) -> list:
    """arms('S1', 'A', 10, 100, 'B', 20, 100)"""
    return [ArmRecord(study_id=study_id, treatment=cells[i], events=cells[i + 1], total=cells[i + 2])
            for i in range(0, len(cells), 3)]


def contrast_network(studies: Sequence[Tuple[str, Sequence[int], int, Sequence[float], Sequence[Sequence[float]]]],
                     labels: Sequence[str], reference: int = 0) -> NetworkDataset:
    """
    Builds a network straight from contrast data: (study_id, arms, study reference, y, S) tuples.
    """
    treatments = [Treatment(id=i, label=lbl) for i, lbl in enumerate(labels)]
    built = [ContrastStudy(study_id=sid, arms=tuple(a), reference=ref, y=np.array(y, dtype=float),
                           s=np.array(s, dtype=float)) for sid, a, ref, y, s in studies]
    return build_network(built, treatments, reference)


def design_labels(net: NetworkDataset, designs) -> Dict[str, object]:
    return {net.design_label(d): d for d in designs}
