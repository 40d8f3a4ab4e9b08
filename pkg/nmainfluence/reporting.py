"""
Result files, CSV tables and SVG charts.

A result file is a JSON document holding everything a report needs, so tables and charts can
be regenerated from it alone. Run metadata (time, host) goes to a ``.meta.json`` sidecar and
never into the result file, which stays byte-identical across reruns.
"""
import hashlib
import json
import math
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from itertools import combinations
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import matplotlib
matplotlib.use('Agg')
matplotlib.rcParams['svg.hashsalt'] = 'nma-influence'
import matplotlib.pyplot as plt  # noqa: E402
import networkx as nx  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from django.conf import settings  # noqa: E402
from structlog import get_logger  # noqa: E402

from . import __version__  # noqa: E402
from .actions.reml import pooled_odds_ratios, rank_treatments  # noqa: E402
from .models import (  # noqa: E402
    BootstrapResult, DesignKey, FitResult, GlobalTestResult, InfluenceRow, LoopTestResult, NetworkDataset,
    ScenarioMetrics, WaldResult
)

logger = get_logger()

SCHEMA_VERSION = 1
MEASURE_TITLES = {'psi': 'Averaged studentized residual', 'mdffits': 'MDFFITS', 'phi': 'Phi (tau^2 ratio)',
                  'xi': 'Xi (I^2 ratio)'}


class ArtifactError(Exception):
    pass


@dataclass
class AnalysisArtifact:
    command: str
    input_digest: str = ''
    config: Dict[str, Any] = field(default_factory=dict)
    network: Dict[str, Any] = field(default_factory=dict)
    fit: Optional[Dict[str, Any]] = None
    global_test: Optional[Dict[str, Any]] = None
    influence: List[Dict[str, Any]] = field(default_factory=list)
    wald: List[Dict[str, Any]] = field(default_factory=list)
    not_evaluable: List[Dict[str, str]] = field(default_factory=list)
    loops: List[Dict[str, Any]] = field(default_factory=list)
    bootstrap: Dict[str, Any] = field(default_factory=dict)
    scenarios: List[Dict[str, Any]] = field(default_factory=list)
    version: str = __version__
    schema_version: int = SCHEMA_VERSION


########################################################################################################
# Building the artifact

def file_digest(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(65536), b''):
            h.update(chunk)
    return 'sha256:' + h.hexdigest()


def _float(x: Optional[float]) -> Optional[float]:
    return None if x is None else float(x)


def network_summary(net: NetworkDataset) -> Dict[str, Any]:
    edges: Dict[Tuple[str, str], int] = {}
    for study in net.studies:
        for a, b in combinations(study.real_arms, 2):
            key = tuple(sorted((net.label(a), net.label(b))))
            edges[key] = edges.get(key, 0) + 1  # type: ignore
    return {
        'reference': net.label(net.global_reference),
        'treatments': [t.label for t in net.treatments],
        'studies': net.n_studies,
        'designs': [{'number': net.design_number(d), 'label': net.design_label(d), 'studies': len(idx)}
                    for d, idx in net.designs.items()],
        'edges': [{'a': a, 'b': b, 'studies': n} for (a, b), n in sorted(edges.items())],
    }


def fit_summary(net: NetworkDataset, fit: FitResult) -> Dict[str, Any]:
    return {
        'reference': net.label(fit.reference),
        'tau2': fit.tau2_hat,
        'tau': fit.tau_hat,
        'i2': fit.i2,
        'r_stat': fit.r_stat,
        'loglik_restricted': fit.loglik_restricted,
        'converged': fit.converged,
        'degenerate': fit.degenerate,
        'n_used': fit.n_used,
        'odds_ratios': [{'treatment': net.label(t), 'or': o, 'lower': lo, 'upper': hi}
                        for t, o, lo, hi in pooled_odds_ratios(fit)],
        'ranking': [net.label(t) for t in rank_treatments(fit)],
    }


def global_test_summary(result: GlobalTestResult) -> Dict[str, Any]:
    return asdict(result)


def influence_summary(rows: Sequence[InfluenceRow]) -> List[Dict[str, Any]]:
    out = []
    for r in rows:
        out.append({
            'number': r.number, 'design': r.label, 'studies': r.n_studies,
            'psi': _float(r.psi), 'mdffits': _float(r.mdffits), 'phi': _float(r.phi), 'xi': _float(r.xi),
            'o_psi': _float(r.o_psi), 'o_mdffits': _float(r.o_mdffits), 'o_phi': _float(r.o_phi),
            'o_xi': _float(r.o_xi),
            'ranks': dict(r.ranks), 'o_ranks': dict(r.o_ranks),
        })
    return out


def wald_summary(net: NetworkDataset, rows: Sequence[WaldResult]) -> List[Dict[str, Any]]:
    return [{
        'number': r.number, 'design': r.label, 'w': r.w, 'df': r.df, 'p_chi2': r.p_chi2, 'p_boot': r.p_boot,
        'reference': net.label(r.reference), 'treatments': [net.label(t) for t in r.treatments],
        'or_subset': [math.exp(m) for m in r.mu_subset], 'or_rest': [math.exp(m) for m in r.mu_rest],
    } for r in rows]


def not_evaluable_summary(net: NetworkDataset, items: Sequence[Tuple[DesignKey, str]]) -> List[Dict[str, str]]:
    return [{'number': str(net.design_number(d)), 'design': net.design_label(d), 'reason': reason}
            for d, reason in items]


def loop_summary(net: NetworkDataset, result: LoopTestResult) -> Dict[str, Any]:
    return {
        'loop': '-'.join(net.label(t) for t in result.loop), 'z': result.z, 'p': result.p,
        'inconsistency': result.inconsistency, 'variance': result.variance,
        'edges': [{'edge': '{} vs {}'.format(net.label(e.treatments[1]), net.label(e.treatments[0])),
                   'estimate': e.estimate, 'variance': e.variance, 'studies': list(e.study_ids)}
                  for e in result.edges],
    }


def bootstrap_summary(net: NetworkDataset, result: BootstrapResult) -> Dict[str, Any]:
    return {
        'B': result.plan.B,
        'seed': result.plan.seed,
        'statistics': list(result.plan.statistics),
        'failed_replicates': result.failed_replicates,
        'flagged': [{'design': net.design_label(e.design), 'statistic': e.statistic, 'failures': e.failures}
                    for e in result.entries.values() if e.flagged],
    }


def metrics_row(m: ScenarioMetrics) -> Dict[str, Any]:
    """One Table-3 style row: rates in percent with their Monte-Carlo standard errors."""
    cfg = m.scenario
    row: Dict[str, Any] = {
        'scenario': cfg.id, 'design': ' vs '.join(cfg.target_design), 'target_arm': cfg.target_arm,
        'n': cfg.n_studies, 'tau': cfg.tau, 'omega': cfg.omega,
    }
    for name in ('psi', 'mdffits', 'phi', 'xi'):
        for prefix, rate in (('o', m.threshold_rates[name]), ('top3', m.top_rates[name])):
            row['{}_{}'.format(name, prefix)] = 100.0 * rate
            row['{}_{}_se'.format(name, prefix)] = 100.0 * m.standard_error(rate)
    row['w_p'] = 100.0 * m.threshold_rates['w']
    row['w_p_se'] = 100.0 * m.standard_error(m.threshold_rates['w'])
    for i, rate in enumerate(m.loop_rates):
        row['loop{}'.format(i + 1)] = 100.0 * rate
        row['loop{}_se'.format(i + 1)] = 100.0 * m.standard_error(rate)
    row['replications'] = m.replications_used
    row['failures'] = m.failures
    return row


########################################################################################################
# Persistence

def to_json(artifact: AnalysisArtifact) -> str:
    return json.dumps(asdict(artifact), indent=2, sort_keys=True) + '\n'


def save_artifact(artifact: AnalysisArtifact, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_json(artifact), encoding='utf-8')
    meta = {'written_at': datetime.now(timezone.utc).isoformat(), 'host': platform.node(),
            'python': platform.python_version(), 'version': __version__}
    meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    logger.info('saved-artifact', path=str(path), command=artifact.command)
    return path


def meta_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + '.meta.json')


def load_artifact(path: Union[str, Path]) -> AnalysisArtifact:
    try:
        doc = json.loads(Path(path).read_text(encoding='utf-8'))
    except (OSError, ValueError) as e:
        raise ArtifactError('Cannot read result file {}: {}'.format(path, e))
    version = doc.get('schema_version') if isinstance(doc, dict) else None
    if version != SCHEMA_VERSION:
        raise ArtifactError('Unsupported result schema version {} in {}'.format(version, path))
    try:
        return AnalysisArtifact(**doc)
    except TypeError as e:
        raise ArtifactError('Malformed result file {}: {}'.format(path, e))


def check_digest(artifact: AnalysisArtifact, input_path: Union[str, Path]) -> bool:
    """True when ``input_path`` is the data the artifact was computed from."""
    return artifact.input_digest == file_digest(input_path)


########################################################################################################
# Tables

def odds_ratio_frame(artifact: AnalysisArtifact) -> pd.DataFrame:
    if not artifact.fit:
        return pd.DataFrame(columns=['treatment', 'or', 'lower', 'upper'])
    return pd.DataFrame(artifact.fit['odds_ratios'], columns=['treatment', 'or', 'lower', 'upper'])


def influence_frame(artifact: AnalysisArtifact) -> pd.DataFrame:
    columns = ['number', 'design', 'studies', 'psi', 'o_psi', 'mdffits', 'o_mdffits', 'phi', 'o_phi', 'xi', 'o_xi']
    rows = [{c: r.get(c) for c in columns} for r in artifact.influence]
    rows += [{'number': int(r['number']), 'design': r['design']} for r in artifact.not_evaluable]
    return pd.DataFrame(rows, columns=columns).sort_values('number').reset_index(drop=True)


def wald_frame(artifact: AnalysisArtifact) -> pd.DataFrame:
    """Evaluable designs by ascending P, then the designs that could not be tested."""
    def fmt(values: Sequence[float]) -> str:
        return ';'.join('{:.3f}'.format(v) for v in values)

    rows = [{'number': r['number'], 'design': r['design'], 'w': r['w'], 'df': r['df'], 'p_chi2': r['p_chi2'],
             'p_boot': r['p_boot'], 'reference': r['reference'], 'or_subset': fmt(r['or_subset']),
             'or_rest': fmt(r['or_rest'])} for r in artifact.wald]
    rows += [{'number': int(r['number']), 'design': r['design']} for r in artifact.not_evaluable]
    return pd.DataFrame(rows, columns=['number', 'design', 'w', 'df', 'p_chi2', 'p_boot', 'reference', 'or_subset',
                                       'or_rest'])


def metrics_frame(rows: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    return pd.DataFrame(list(rows)).sort_values('scenario').reset_index(drop=True) if rows else pd.DataFrame()


########################################################################################################
# Charts

def network_chart(artifact: AnalysisArtifact, path: Union[str, Path]) -> Path:
    """Treatments as nodes, edge width proportional to the number of studies comparing them."""
    graph = nx.Graph()
    graph.add_nodes_from(artifact.network['treatments'])
    for e in artifact.network['edges']:
        graph.add_edge(e['a'], e['b'], studies=e['studies'])
    fig, ax = plt.subplots(figsize=(6, 6))
    pos = nx.circular_layout(sorted(graph.nodes))
    widths = [graph.edges[e]['studies'] * 1.5 for e in graph.edges]
    nx.draw_networkx_edges(graph, pos, ax=ax, width=widths, edge_color='#555555')
    nx.draw_networkx_nodes(graph, pos, ax=ax, node_color='#dddddd', edgecolors='black', node_size=1200)
    nx.draw_networkx_labels(graph, pos, ax=ax, font_size=9)
    ax.set_axis_off()
    return _save(fig, path)


def forest_chart(artifact: AnalysisArtifact, path: Union[str, Path]) -> Path:
    """Pooled odds ratios against the reference with their 95% intervals, log scale."""
    frame = odds_ratio_frame(artifact)
    fig, ax = plt.subplots(figsize=(6, 0.5 * len(frame) + 1.5))
    y = np.arange(len(frame))[::-1]
    ax.errorbar(frame['or'], y, xerr=[frame['or'] - frame['lower'], frame['upper'] - frame['or']],
                fmt='s', color='black', ecolor='black', capsize=3)
    ax.axvline(1.0, color='grey', linestyle='--', linewidth=0.8)
    ax.set_xscale('log')
    ax.set_yticks(y)
    ax.set_yticklabels(frame['treatment'])
    ax.set_xlabel('Odds ratio vs {}'.format(artifact.fit['reference'] if artifact.fit else ''))
    return _save(fig, path)


def influence_chart(artifact: AnalysisArtifact, path: Union[str, Path]) -> Path:
    """
    Eight panels: each measure and its O-value per design. Designs with O < 0.05 are highlighted;
    the dotted line marks 1 for the ratios and 0.05 for O-values.
    """
    frame = pd.DataFrame(artifact.influence)
    measures = [m for m in ('psi', 'mdffits', 'phi', 'xi') if not frame.empty and frame[m].notnull().any()]
    fig, axes = plt.subplots(2, max(len(measures), 1), figsize=(4 * max(len(measures), 1), 8), squeeze=False)
    alpha = settings.NMA_SIGNIFICANCE
    for col, m in enumerate(measures):
        labels = [str(n) for n in frame['number']]
        o = frame['o_' + m].astype(float)
        flagged = o < alpha
        colors = ['#c0392b' if f else '#7f8c8d' for f in flagged]
        values = frame[m].astype(float).replace([np.inf], np.nan)
        axes[0, col].bar(labels, values, color=colors)
        axes[0, col].set_title(MEASURE_TITLES[m])
        if m in ('phi', 'xi'):
            axes[0, col].axhline(1.0, color='black', linestyle=':', linewidth=0.8)
        if o.notnull().any():
            axes[1, col].bar(labels, o, color=colors)
            axes[1, col].axhline(alpha, color='black', linestyle=':', linewidth=0.8)
        axes[1, col].set_title('O-value')
        axes[1, col].set_ylim(0, 1)
        for ax in axes[:, col]:
            ax.set_xlabel('Design')
            ax.tick_params(axis='x', labelsize=7)
    return _save(fig, path)


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # Fixed metadata keeps the SVG stable across reruns.
    fig.savefig(path, format='svg', bbox_inches='tight', metadata={'Date': None, 'Creator': None})
    plt.close(fig)
    return path


def write_report(artifact: AnalysisArtifact, out_dir: Union[str, Path]) -> List[Path]:
    """
    Writes every table and chart the artifact has content for.

    :return: the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if artifact.network:
        written.append(network_chart(artifact, out_dir / 'network.svg'))
    if artifact.fit:
        odds_ratio_frame(artifact).to_csv(out_dir / 'odds_ratios.csv', index=False)
        written.append(out_dir / 'odds_ratios.csv')
        written.append(forest_chart(artifact, out_dir / 'forest.svg'))
    if artifact.influence:
        influence_frame(artifact).to_csv(out_dir / 'influence.csv', index=False)
        written.append(out_dir / 'influence.csv')
        written.append(influence_chart(artifact, out_dir / 'influence.svg'))
    if artifact.wald:
        wald_frame(artifact).to_csv(out_dir / 'wald.csv', index=False)
        written.append(out_dir / 'wald.csv')
    if artifact.loops:
        pd.DataFrame([{k: r[k] for k in ('loop', 'inconsistency', 'variance', 'z', 'p')} for r in artifact.loops]) \
            .to_csv(out_dir / 'loops.csv', index=False)
        written.append(out_dir / 'loops.csv')
    if artifact.scenarios:
        metrics_frame(artifact.scenarios).to_csv(out_dir / 'simulation.csv', index=False)
        written.append(out_dir / 'simulation.csv')
    logger.info('wrote-report', out_dir=str(out_dir), files=len(written))
    return written
