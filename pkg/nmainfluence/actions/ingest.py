"""
Arm-level binary outcomes to contrast-based summaries.

A study's log odds ratios are taken against one of its arms; their within-study covariance
has the reciprocal cell counts of both arms on the diagonal and those of the shared reference
arm off the diagonal.
"""
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from structlog import get_logger
from django.conf import settings

from ..models import ArmRecord, ContrastStudy, NetworkDataset, Treatment
from .network import build_network

logger = get_logger()

CSV_COLUMNS = ['study_id', 'treatment', 'events', 'total']

# The 26-study antihypertensive network shipped with the package.
FIXTURE_PATH = Path(__file__).resolve().parent.parent / 'data' / 'antihypertensive.csv'


class IngestError(Exception):
    pass


def arms_to_contrasts(arms: Sequence[ArmRecord],
                      reference: str,
                      augment: bool,
                      treatment_ids: Mapping[str, int]) -> ContrastStudy:
    """
    Converts the arms of one study into log odds ratios against ``reference``.

    :param arms: the arms of a single study.
    :param reference: label of the arm to compare against.
    :param augment: add a pseudo reference arm when the study lacks ``reference``.
    :param treatment_ids: label -> treatment id.
    :return: a ContrastStudy.
    """
    if len(arms) < 2:
        raise IngestError('Study {} has fewer than 2 arms'.format(arms[0].study_id if arms else '?'))
    study_ids = {a.study_id for a in arms}
    if len(study_ids) != 1:
        raise IngestError('Arms from several studies given together: {}'.format(sorted(study_ids)))
    study_id = arms[0].study_id
    labels = [a.treatment for a in arms]
    if len(set(labels)) != len(labels):
        raise IngestError('Study {} has duplicate arms'.format(study_id))
    unknown = [lbl for lbl in labels + [reference] if lbl not in treatment_ids]
    if unknown:
        raise IngestError('Study {}: unknown treatments {}'.format(study_id, unknown))

    events = np.array([a.events for a in arms], dtype=float)
    totals = np.array([a.total for a in arms], dtype=float)
    non_events = totals - events

    #
    # All-or-nothing continuity correction on the real cells
    #
    if np.any(events == 0) or np.any(non_events == 0):
        cc = settings.NMA_CONTINUITY_CORRECTION
        logger.debug('continuity-correction', study_id=study_id, correction=cc)
        events = events + cc
        non_events = non_events + cc

    ids = [treatment_ids[lbl] for lbl in labels]
    augmented = False
    if reference not in labels:
        if not augment:
            raise IngestError('Study {} lacks the reference arm {}'.format(study_id, reference))
        augmented = True
        pseudo_events = settings.NMA_PSEUDO_EVENTS
        ids.append(treatment_ids[reference])
        events = np.append(events, pseudo_events)
        non_events = np.append(non_events, settings.NMA_PSEUDO_TOTAL - pseudo_events)

    log_odds = np.log(events) - np.log(non_events)
    variances = 1.0 / events + 1.0 / non_events

    ref_id = treatment_ids[reference]
    ref_pos = ids.index(ref_id)
    others = sorted((i for i in range(len(ids)) if i != ref_pos), key=lambda i: ids[i])
    y = log_odds[others] - log_odds[ref_pos]
    s = np.diag(variances[others]) + variances[ref_pos]

    try:
        np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        raise IngestError('Study {}: within-study covariance is not positive definite'.format(study_id))

    return ContrastStudy(study_id=study_id, arms=tuple(ids), reference=ref_id, y=y, s=s, augmented=augmented)


def read_arms_csv(path: Union[str, Path]) -> List[ArmRecord]:
    """
    Reads ``study_id,treatment,events,total`` rows, one per arm.
    """
    try:
        df = pd.read_csv(path, dtype={'study_id': str, 'treatment': str}, encoding='utf-8',
                         skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise IngestError('{} is empty'.format(path))
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise IngestError('Cannot parse {}: {}'.format(path, e))

    if list(df.columns) != CSV_COLUMNS:
        raise IngestError('Expected header {}, got {}'.format(','.join(CSV_COLUMNS), ','.join(map(str, df.columns))))
    if df.empty:
        raise IngestError('{} holds no arms'.format(path))
    if df[CSV_COLUMNS].isnull().any().any():
        raise IngestError('{} has missing values'.format(path))

    records = []
    for row in df.itertuples(index=False):
        try:
            events, total = float(row.events), float(row.total)
            if not (events.is_integer() and total.is_integer()):
                raise ValueError('counts must be integers')
            records.append(ArmRecord(study_id=str(row.study_id).strip(), treatment=str(row.treatment).strip(),
                                     events=events, total=total))
        except ValueError as e:
            raise IngestError('{}: bad row for study {}: {}'.format(path, row.study_id, e))
    logger.info('read-arms', path=str(path), arms=len(records))
    return records


def group_by_study(records: Sequence[ArmRecord]) -> 'OrderedDict[str, List[ArmRecord]]':
    grouped: 'OrderedDict[str, List[ArmRecord]]' = OrderedDict()
    for r in records:
        grouped.setdefault(r.study_id, []).append(r)
    return grouped


def arms_to_network(records: Sequence[ArmRecord],
                    reference: Optional[str] = None,
                    augment: bool = False) -> NetworkDataset:
    """
    Builds a network from arm-level rows.

    Each study is expressed against the global reference when it has that arm. Otherwise it is
    augmented with a pseudo reference arm when ``augment`` is set, or expressed against its
    alphabetically first arm.

    :param records: the arm rows.
    :param reference: label of the global reference; the most frequent arm by default.
    :param augment: use pseudo reference arms for studies lacking the reference.
    :return: a NetworkDataset.
    """
    if not records:
        raise IngestError('No arms given.')
    labels = sorted({r.treatment for r in records})
    treatments = tuple(Treatment(id=i, label=lbl) for i, lbl in enumerate(labels))
    treatment_ids: Dict[str, int] = {t.label: t.id for t in treatments}
    grouped = group_by_study(records)

    if reference is None:
        counts = {lbl: sum(1 for arms in grouped.values() if lbl in {a.treatment for a in arms}) for lbl in labels}
        reference = min(labels, key=lambda lbl: (-counts[lbl], lbl))
    elif reference not in treatment_ids:
        raise IngestError('Unknown reference treatment {}'.format(reference))

    studies = []
    for study_id, arms in grouped.items():
        present = sorted(a.treatment for a in arms)
        if reference in present or augment:
            study_reference = reference
        else:
            study_reference = present[0]
        studies.append(arms_to_contrasts(arms, study_reference, augment, treatment_ids))

    net = build_network(studies, treatments, treatment_ids[reference])
    logger.info('ingested-network', studies=net.n_studies, designs=net.n_designs, treatments=len(treatments),
                reference=reference, augmented=sum(1 for s in studies if s.augmented))
    return net


def load_network(path: Union[str, Path],
                 reference: Optional[str] = None,
                 augment: bool = False,
                 exclude_studies: Sequence[str] = ()) -> NetworkDataset:
    records = read_arms_csv(path)
    if exclude_studies:
        unknown = set(exclude_studies) - {r.study_id for r in records}
        if unknown:
            raise IngestError('Unknown study ids {}'.format(sorted(unknown)))
        records = [r for r in records if r.study_id not in exclude_studies]
    return arms_to_network(records, reference=reference, augment=augment)


def odds_ratio_ci(study: ContrastStudy, treatment: int, z: float = 1.959963984540054) -> Tuple[float, float, float]:
    """
    Odds ratio of ``treatment`` against the study's reference, with its Wald confidence interval.
    """
    if treatment not in study.contrast_arms:
        raise IngestError('Treatment {} is not a contrast arm of study {}'.format(treatment, study.study_id))
    i = study.contrast_arms.index(treatment)
    est, se = study.y[i], np.sqrt(study.s[i, i])
    return float(np.exp(est)), float(np.exp(est - z * se)), float(np.exp(est + z * se))
