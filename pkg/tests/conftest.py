import logging
import os

import django
import structlog


def pytest_configure(config):
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'nmainfluence.settings')
    django.setup()
    structlog.configure(
        processors=[structlog.stdlib.add_log_level, structlog.processors.KeyValueRenderer()],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
    )
    logging.getLogger().setLevel(logging.WARNING)
