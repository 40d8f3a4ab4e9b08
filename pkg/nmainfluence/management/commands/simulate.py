from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import progressbar
import structlog
from django.conf import settings
from django.core.management.base import CommandError

from ...actions.sim import SCENARIOS_PATH, load_scenarios, run_scenario
from ...reporting import AnalysisArtifact, file_digest, metrics_row, save_artifact, write_report
from ..base import EXIT_PARSE, AnalysisCommand, comma_list

logger = structlog.get_logger()


class Command(AnalysisCommand):
    help = """Runs simulation scenarios and writes detection rates per method (simulation.csv).
              Pass -v 2 to see per-replicate events.
              """

    def add_arguments(self, parser):
        parser.add_argument('scenario_file', nargs='?', default=str(SCENARIOS_PATH),
                            help='YAML scenario file. Defaults to the shipped 24 scenarios')
        parser.add_argument('--scenarios', type=comma_list, default=[],
                            help='Comma-separated scenario ids to run. Defaults to all')
        parser.add_argument('--replications', type=int, default=None, help='Overrides every scenario\'s R')
        parser.add_argument('--B', dest='B', type=int, default=None, help='Overrides every scenario\'s bootstrap')
        parser.add_argument('--workers', type=int, default=settings.NMA_WORKERS, help='Worker processes')
        parser.add_argument('--out-dir', default='.', help='Where simulation.json and simulation.csv are written')
        parser.add_argument('--dry-run', action='store_true', help='Lists the scenarios and exits')
        parser.add_argument('--progress', action='store_true', help='Displays a progress bar')

    def handle(self, *args, **options):
        scenarios = load_scenarios(options['scenario_file'])
        if options['scenarios']:
            try:
                wanted = {int(s) for s in options['scenarios']}
            except ValueError:
                raise CommandError('Scenario ids must be integers', returncode=EXIT_PARSE)
            scenarios = [s for s in scenarios if s.id in wanted]
        overrides = {}
        if options['replications'] is not None:
            overrides['replications'] = options['replications']
        if options['B'] is not None:
            overrides['bootstrap'] = options['B']
        scenarios = [replace(s, **overrides) for s in scenarios]

        dry_run = options['dry_run']
        logger.info('simulate-start', dry_run=dry_run, scenarios=len(scenarios))
        if dry_run:
            for s in scenarios:
                self.stdout.write('{:>3} {:<16} arm {:<4} N={} tau={} omega={} R={} B={}'.format(
                    s.id, ' vs '.join(s.target_design), s.target_arm, s.n_studies, s.tau, s.omega,
                    s.replications, s.bootstrap))
            return

        if options['progress']:
            bar = progressbar.ProgressBar()
            scenarios = bar(scenarios)

        rows = []
        try:
            stats = defaultdict(lambda: 0)
            for cfg in scenarios:
                metrics = run_scenario(cfg, workers=options['workers'])
                rows.append(metrics_row(metrics))
                stats['scenarios'] += 1
                stats['failed_replicates'] += metrics.failures
        finally:
            logger.info('simulate-done', **stats)

        artifact = AnalysisArtifact(
            command='simulate',
            input_digest=file_digest(options['scenario_file']),
            config={'scenario_file': Path(options['scenario_file']).name, 'overrides': overrides},
            scenarios=rows,
        )
        out_dir = Path(options['out_dir'])
        save_artifact(artifact, out_dir / 'simulation.json')
        write_report(artifact, out_dir)
        for row in rows:
            self.stdout.write('scenario {:>2}: MDFFITS O<0.05 {:.1f}%  top-3 {:.1f}%  W {:.1f}%'.format(
                row['scenario'], row['mdffits_o'], row['mdffits_top3'], row['w_p']))
