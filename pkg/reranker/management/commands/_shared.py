import logging
import os

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from reranker.config import EdgeRecConfig
from reranker.exceptions import EdgeRecError

logger = logging.getLogger('reranker.commands')


class EdgeRecCommand(BaseCommand):
    """
    Base for the EdgeRec subcommands: resolves the config and turns library
    and I/O failures into CommandError.
    """

    def add_arguments(self, parser):
        parser.add_argument('--config', default='', help='Flat KEY=VALUE config file')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        name = self.__class__.__module__.rsplit('.', 1)[-1]
        try:
            config = EdgeRecConfig.load(options['config'] or None)
            self.run(config, options)
        except (EdgeRecError, OSError) as e:
            logger.error(f"{name} failed: {e}")
            raise CommandError(str(e)) from e

    def run(self, config, options):
        raise NotImplementedError

    # ------------------------------------------------------------------

    @staticmethod
    def output_path(path, default_name):
        """``path`` or a file under EDGEREC_RUNS_DIR; parent directories are created."""
        if not path:
            path = os.path.join(getattr(settings, 'EDGEREC_RUNS_DIR', 'runs'), default_name)
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        return path

    def write_text(self, path, text):
        with open(path, 'w') as fh:
            fh.write(text)
        self.stdout.write(f"Wrote {path}")
