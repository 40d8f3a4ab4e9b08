"""
Shared pieces of the analysis commands: exit codes, common flags and the mapping of analysis
errors to ``CommandError``.
"""
import logging
from typing import List, Optional

import structlog
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from ..actions.ingest import IngestError, load_network
from ..actions.network import DisconnectedNetworkError, EmptyNetworkError, NetworkError, exclude
from ..actions.reml import UnderIdentifiedError
from ..actions.sim import ScenarioFileError
from ..models import NetworkDataset
from ..reporting import ArtifactError

logger = structlog.get_logger()

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARSE = 2
EXIT_DISCONNECTED = 3
EXIT_NOT_CONVERGED = 4


def set_debug(logger_name: Optional[str] = None):
    logger = logging.getLogger(logger_name)
    logger.setLevel(logging.DEBUG)
    logger.addHandler(logging.StreamHandler())


def exit_code_for(ex: Exception) -> int:
    if isinstance(ex, CommandError):
        return ex.returncode
    if isinstance(ex, (IngestError, ArtifactError, ScenarioFileError)):
        return EXIT_PARSE
    if isinstance(ex, (DisconnectedNetworkError, EmptyNetworkError, UnderIdentifiedError)):
        return EXIT_DISCONNECTED
    if isinstance(ex, NetworkError):
        return EXIT_PARSE
    return EXIT_ERROR


def comma_list(s: str) -> List[str]:
    return [item.strip() for item in s.split(',') if item.strip()]


class AnalysisCommand(BaseCommand):
    """
    Turns the analysis errors into a ``CommandError`` carrying the documented exit code.
    Pass -v 2 to see debug events.
    """
    requires_system_checks: List[str] = []

    def execute(self, *args, **options):
        if options.get('verbosity', 1) >= 2:
            set_debug()
        name = type(self).__module__.rsplit('.', 1)[-1]
        try:
            return super().execute(*args, **options)
        except CommandError as ex:
            logger.error('command-failed', command=name, error=str(ex), exit_code=ex.returncode)
            raise
        except Exception as ex:
            code = exit_code_for(ex)
            if code == EXIT_ERROR:
                raise
            logger.error('command-failed', command=name, error=str(ex), exit_code=code)
            raise CommandError(str(ex), returncode=code) from ex


class NetworkCommand(AnalysisCommand):
    """
    Base for the commands that analyse an arm-level CSV.
    """

    def add_arguments(self, parser):
        parser.add_argument('input', help='Arm-level CSV: study_id,treatment,events,total')
        parser.add_argument('--reference', default=None,
                            help='Reference treatment label. Defaults to the treatment in most studies')
        parser.add_argument('--augment', action='store_true',
                            help='Add a pseudo reference arm to studies lacking the reference')
        parser.add_argument('--exclude-studies', type=comma_list, default=[],
                            help='Comma-separated study ids to leave out')
        parser.add_argument('--exclude-designs', type=comma_list, default=[],
                            help='Comma-separated design labels to leave out, e.g. "ARB vs CT"')
        parser.add_argument('--workers', type=int, default=settings.NMA_WORKERS, help='Worker processes')
        parser.add_argument('--out-dir', default='.', help='Where result files and charts are written')
        parser.add_argument('--progress', action='store_true', help='Displays a progress bar')

    def load(self, options) -> NetworkDataset:
        net = load_network(options['input'], reference=options['reference'], augment=options['augment'],
                           exclude_studies=options['exclude_studies'])
        if options['exclude_designs']:
            try:
                designs = [net.design_by_label(lbl) for lbl in options['exclude_designs']]
            except KeyError as e:
                raise CommandError('Unknown design {}'.format(e), returncode=EXIT_PARSE)
            net = exclude(net, designs=designs)
        return net


def add_bootstrap_arguments(parser, default_b: int):
    parser.add_argument('--B', dest='B', type=int, default=default_b,
                        help='Bootstrap replicates; 0 skips the bootstrap. Defaults to {}'.format(default_b))
    parser.add_argument('--seed', type=int, default=settings.NMA_SEED,
                        help='Random seed. Defaults to NMA_SEED or {}'.format(settings.NMA_SEED))
