from pathlib import Path

import structlog
from django.conf import settings
from django.core.management.base import CommandError

from ...actions.bootstrap import run_bootstrap
from ...actions.inconsistency import (
    MissingEdgeError, TestNotApplicableError, bucher_loop_test, global_interaction_test, loop_by_labels, wald_table
)
from ...actions.reml import reml_fit
from ...models import BootstrapPlan
from ...reporting import (
    AnalysisArtifact, file_digest, global_test_summary, loop_summary, network_summary, not_evaluable_summary,
    save_artifact, wald_summary, write_report
)
from ..base import EXIT_PARSE, NetworkCommand, add_bootstrap_arguments, comma_list

logger = structlog.get_logger()


class Command(NetworkCommand):
    help = """Leave-one-design-out Wald tests, the global inconsistency test and optional loop tests.
              Writes test.json and wald.csv (designs by ascending P).
              """

    def add_arguments(self, parser):
        super().add_arguments(parser)
        add_bootstrap_arguments(parser, settings.NMA_DEFAULT_B)
        parser.add_argument('--loop', type=comma_list, action='append', default=[],
                            help='Three comma-separated treatments for a loop test, e.g. ACE,ARB,CT. Repeatable')

    def handle(self, *args, **options):
        net = self.load(options)
        logger.info('test-start', designs=net.n_designs, B=options['B'], seed=options['seed'])

        boot = None
        if options['B'] > 0:
            full = reml_fit(net)
            plan = BootstrapPlan(B=options['B'], seed=options['seed'], statistics=('w',))
            boot = run_bootstrap(net, plan, full=full, workers=options['workers'], progress=options['progress'])
        rows, not_evaluable = wald_table(net, boot=boot, workers=options['workers'], progress=options['progress'])

        try:
            global_test = global_test_summary(global_interaction_test(net))
        except TestNotApplicableError as ex:
            logger.info('global-test-skipped', reason=str(ex))
            global_test = None

        loops = []
        for labels in options['loop']:
            try:
                loop = loop_by_labels(net, labels)
            except (KeyError, ValueError) as ex:
                raise CommandError('Bad loop {}: {}'.format(labels, ex), returncode=EXIT_PARSE)
            try:
                loops.append(loop_summary(net, bucher_loop_test(net, loop)))
            except MissingEdgeError as ex:
                raise CommandError('Loop {}: {}'.format('-'.join(labels), ex))

        artifact = AnalysisArtifact(
            command='test',
            input_digest=file_digest(options['input']),
            config={'reference': net.label(net.global_reference), 'augment': options['augment'],
                    'exclude_studies': options['exclude_studies'], 'exclude_designs': options['exclude_designs'],
                    'B': options['B'], 'seed': options['seed']},
            network=network_summary(net),
            global_test=global_test,
            wald=wald_summary(net, rows),
            not_evaluable=not_evaluable_summary(net, not_evaluable),
            loops=loops,
        )
        out_dir = Path(options['out_dir'])
        save_artifact(artifact, out_dir / 'test.json')
        write_report(artifact, out_dir)

        for r in rows:
            p_boot = '' if r.p_boot is None else '  P(boot) = {:.3f}'.format(r.p_boot)
            self.stdout.write('{:<20} W = {:.3f}  P(chi2) = {:.3f}{}'.format(r.label, r.w, r.p_chi2, p_boot))
        for item in artifact.not_evaluable:
            self.stdout.write('{:<20} -'.format(item['design']))
        if global_test:
            self.stdout.write('Global inconsistency test: P = {:.3f}'.format(global_test['p']))
        for loop in loops:
            self.stdout.write('Loop {}: z = {:.3f}, P = {:.3f}'.format(loop['loop'], loop['z'], loop['p']))
        logger.info('test-done', evaluable=len(rows), not_evaluable=len(not_evaluable), loops=len(loops))
