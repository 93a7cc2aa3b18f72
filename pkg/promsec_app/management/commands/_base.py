import logging
import os

from django.core.management.base import BaseCommand, CommandError
from django.db import DatabaseError

from promsec_app import ggan
from promsec_app.config import AppConfig
from promsec_app.fix_templates import TemplateBank
from promsec_app.models import AuditLog, OptimizationRun
from promsec_app.optimizer_loop import ERROR, LEDGER_FILE
from promsec_app.utils import PipelineError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_ERROR = 2

GRAPH_KINDS = ('ast', 'cfg', 'dfg')


class PromsecCommand(BaseCommand):
    """
    Shared surface of the pipeline commands.

    Subclasses implement ``add_command_arguments`` and ``run``. Every command
    accepts the global flags; pipeline errors leave with exit code 2 and
    commands that find insecure code or failed checks leave with 1.
    """

    def add_arguments(self, parser):
        parser.add_argument('--config', type=str, help='JSON configuration document')
        parser.add_argument('--seed', type=int, help='Seed for corpus generation and training')
        parser.add_argument('--mode', type=str, help='Optimization mode: promsec, bl1, bl2, a1-no-ggan, a2-no-llm')
        parser.add_argument('--graph-kind', type=str.lower, choices=GRAPH_KINDS, help='Graph kind')
        parser.add_argument('--max-iters', type=int, help='Iteration budget of a run')
        parser.add_argument('--epsilon', type=int, help='Accepted CWE count')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    @property
    def command_name(self):
        return self.__module__.rsplit('.', 1)[-1]

    def handle(self, *args, **options):
        try:
            self.config = AppConfig.load(
                options.get('config'),
                seed=options.get('seed'),
                mode=options.get('mode'),
                graph_kind=options.get('graph_kind'),
                max_iters=options.get('max_iters'),
                epsilon=options.get('epsilon'),
            )
            self.run(**options)
        except PipelineError as e:
            raise CommandError(str(e), returncode=EXIT_ERROR)
        except OSError as e:
            raise CommandError(f"{type(e).__name__}: {e}", returncode=EXIT_ERROR)

    def run(self, **options):
        raise NotImplementedError

    # ==================== Helpers ====================

    def audit(self, action, description, severity='info', run_id=None, **extra_data):
        """Record an audit row; a missing table only costs the row"""
        try:
            AuditLog.log(action, description=description, severity=severity,
                         command=self.command_name, run_id=run_id, **extra_data)
        except DatabaseError as e:
            logger.warning("Audit row %s not recorded: %s", action, e)

    def fail(self, message, returncode=EXIT_FINDINGS):
        raise CommandError(message, returncode=returncode)

    def default_checkpoint(self, kind=None):
        kind = (kind or self.config.loop.graph_kind).lower()
        return os.path.join(self.config.paths.checkpoint_dir, f"ggan-{kind}.ckpt")

    def load_model(self, path=None, required=True):
        """The checkpointed model, or None when it is optional and absent"""
        path = path or self.default_checkpoint()
        if not os.path.exists(path) and not required:
            logger.info("No checkpoint at %s; distances use an untrained encoder", path)
            return None
        bank = TemplateBank.load(self.config.paths.templates_path)
        return ggan.load(path, bank=bank)

    def success(self, message):
        self.stdout.write(self.style.SUCCESS(message))

    def warn(self, message):
        self.stdout.write(self.style.WARNING(message))

    def persist_run(self, ledger, runs_dir, source_name=''):
        """Write the run directory and index it; returns the run directory"""
        run_dir = ledger.save(runs_dir)
        try:
            OptimizationRun.record(ledger, os.path.join(run_dir, LEDGER_FILE), source_name)
        except DatabaseError as e:
            logger.warning("Run %s not indexed: %s", ledger.run_id, e)
        severity = 'error' if ledger.status == ERROR else 'info'
        self.audit('run_failed' if ledger.status == ERROR else 'run_finished',
                   f"{ledger.mode} run on {source_name or ledger.input_kind}: {ledger.status}",
                   severity=severity, run_id=ledger.run_id, status=ledger.status,
                   best_k=ledger.best_k(), iterations=len(ledger.traces), error=ledger.error)
        return run_dir
