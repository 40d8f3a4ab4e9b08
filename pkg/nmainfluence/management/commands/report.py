from pathlib import Path

import structlog
from django.core.management.base import CommandError

from ...reporting import check_digest, load_artifact, write_report
from ..base import EXIT_PARSE, AnalysisCommand

logger = structlog.get_logger()


class Command(AnalysisCommand):
    help = """Regenerates the CSV tables and SVG charts of a result file without recomputing anything."""

    def add_arguments(self, parser):
        parser.add_argument('result', help='A result file written by fit, influence, test or simulate')
        parser.add_argument('--out-dir', default=None, help='Defaults to the result file\'s directory')
        parser.add_argument('--input', default=None,
                            help='The data the result was computed from; fails when it has changed since')

    def handle(self, *args, **options):
        artifact = load_artifact(options['result'])
        if options['input'] and not check_digest(artifact, options['input']):
            raise CommandError('{} does not match the data of {}; rerun the analysis'.format(
                options['input'], options['result']), returncode=EXIT_PARSE)
        out_dir = Path(options['out_dir']) if options['out_dir'] else Path(options['result']).parent
        written = write_report(artifact, out_dir)
        for path in written:
            self.stdout.write(str(path))
        logger.info('report-done', command=artifact.command, files=len(written))
