from pathlib import Path

import structlog
from django.core.management.base import CommandError

from ...actions.inconsistency import TestNotApplicableError, global_interaction_test
from ...actions.reml import reml_fit
from ...reporting import (
    AnalysisArtifact, file_digest, fit_summary, global_test_summary, network_summary, save_artifact, write_report
)
from ..base import EXIT_NOT_CONVERGED, NetworkCommand

logger = structlog.get_logger()


class Command(NetworkCommand):
    help = """Fits the consistency model by REML and runs the global inconsistency test.
              Writes fit.json, odds ratios, a forest chart and a network diagram.
              """

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--dry-run', action='store_true', help='Loads and describes the network, then exits')

    def handle(self, *args, **options):
        net = self.load(options)
        dry_run = options['dry_run']
        logger.info('fit-start', dry_run=dry_run, studies=net.n_studies, designs=net.n_designs,
                    reference=net.label(net.global_reference))
        if dry_run:
            return

        fit = reml_fit(net)
        try:
            global_test = global_test_summary(global_interaction_test(net))
        except TestNotApplicableError as ex:
            logger.info('global-test-skipped', reason=str(ex))
            global_test = None

        artifact = AnalysisArtifact(
            command='fit',
            input_digest=file_digest(options['input']),
            config={'reference': net.label(net.global_reference), 'augment': options['augment'],
                    'exclude_studies': options['exclude_studies'], 'exclude_designs': options['exclude_designs']},
            network=network_summary(net),
            fit=fit_summary(net, fit),
            global_test=global_test,
        )
        out_dir = Path(options['out_dir'])
        save_artifact(artifact, out_dir / 'fit.json')
        write_report(artifact, out_dir)

        summary = artifact.fit
        self.stdout.write('tau = {:.3f}  I^2 = {:.1f}%'.format(summary['tau'], 100 * summary['i2']))
        if global_test:
            self.stdout.write('Global inconsistency test: chi2 = {:.3f} on {} df, P = {:.3f}'.format(
                global_test['statistic'], global_test['df'], global_test['p']))
        for row in summary['odds_ratios']:
            self.stdout.write('{:<10} OR {:.3f} ({:.3f}, {:.3f})'.format(
                row['treatment'], row['or'], row['lower'], row['upper']))
        self.stdout.write('Ranking (lowest log OR first): {}'.format(', '.join(summary['ranking'])))
        logger.info('fit-done', tau2=fit.tau2_hat, i2=fit.i2, converged=fit.converged)

        if not fit.converged:
            raise CommandError('REML did not converge: tau^2 reached the upper search bound',
                               returncode=EXIT_NOT_CONVERGED)
