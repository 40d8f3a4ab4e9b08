from pathlib import Path

import structlog
from django.conf import settings
from django.core.management.base import CommandError

from ...actions.bootstrap import dump_replicates, run_bootstrap
from ...actions.influence import INFLUENCE_MEASURES, influence_table, with_o_values
from ...actions.reml import reml_fit
from ...models import BootstrapPlan
from ...reporting import (
    AnalysisArtifact, bootstrap_summary, file_digest, fit_summary, influence_summary, network_summary,
    not_evaluable_summary, save_artifact, write_report
)
from ..base import EXIT_NOT_CONVERGED, EXIT_PARSE, NetworkCommand, add_bootstrap_arguments, comma_list

logger = structlog.get_logger()


class Command(NetworkCommand):
    help = """Leave-one-design-out influence diagnostics with bootstrap O-values.
              Writes influence.json, influence.csv and the eight-panel influence chart.
              """

    def add_arguments(self, parser):
        super().add_arguments(parser)
        add_bootstrap_arguments(parser, settings.NMA_DEFAULT_B)
        parser.add_argument('--measures', type=comma_list, default=list(INFLUENCE_MEASURES),
                            help='Comma-separated subset of {}'.format(','.join(INFLUENCE_MEASURES)))
        parser.add_argument('--dump-replicates', action='store_true',
                            help='Also writes the bootstrap distributions, one CSV per measure')

    def handle(self, *args, **options):
        statistics = tuple(options['measures'])
        unknown = set(statistics) - set(INFLUENCE_MEASURES)
        if unknown or not statistics:
            raise CommandError('Unknown measures {}'.format(sorted(unknown)), returncode=EXIT_PARSE)
        net = self.load(options)
        out_dir = Path(options['out_dir'])
        logger.info('influence-start', designs=net.n_designs, B=options['B'], seed=options['seed'],
                    measures=list(statistics))

        full = reml_fit(net)
        if not full.converged:
            raise CommandError('REML did not converge on the full data', returncode=EXIT_NOT_CONVERGED)
        rows, not_evaluable = influence_table(net, full=full, statistics=statistics, workers=options['workers'],
                                              progress=options['progress'])

        boot_summary = {}
        if options['B'] > 0:
            plan = BootstrapPlan(B=options['B'], seed=options['seed'], statistics=statistics,
                                 designs=tuple(r.design for r in rows))
            boot = run_bootstrap(net, plan, full=full, workers=options['workers'], progress=options['progress'])
            rows = with_o_values(rows, {name: boot.o_values(name) for name in statistics})
            boot_summary = bootstrap_summary(net, boot)
            if options['dump_replicates']:
                dump_replicates(boot, net, out_dir / 'replicates')

        artifact = AnalysisArtifact(
            command='influence',
            input_digest=file_digest(options['input']),
            config={'reference': net.label(net.global_reference), 'augment': options['augment'],
                    'exclude_studies': options['exclude_studies'], 'exclude_designs': options['exclude_designs'],
                    'B': options['B'], 'seed': options['seed'], 'measures': list(statistics)},
            network=network_summary(net),
            fit=fit_summary(net, full),
            influence=influence_summary(rows),
            not_evaluable=not_evaluable_summary(net, not_evaluable),
            bootstrap=boot_summary,
        )
        save_artifact(artifact, out_dir / 'influence.json')
        write_report(artifact, out_dir)

        for name in statistics:
            flagged = [r.label for r in rows
                       if r.o_value(name) is not None and r.o_value(name) < settings.NMA_SIGNIFICANCE]
            top = sorted((r for r in rows if r.ranks.get(name)), key=lambda r: r.ranks[name])[:settings.NMA_TOP_K]
            line = '{:<8} top {}: {}'.format(name, settings.NMA_TOP_K, '; '.join(r.label for r in top))
            if options['B'] > 0:
                line += '  |  O < {}: {}'.format(settings.NMA_SIGNIFICANCE, '; '.join(flagged) or 'none')
            self.stdout.write(line)
        for item in artifact.not_evaluable:
            self.stdout.write('Not evaluable: {} ({})'.format(item['design'], item['reason']))
        logger.info('influence-done', evaluable=len(rows), not_evaluable=len(not_evaluable))
