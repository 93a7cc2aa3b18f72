import glob
import os

from promsec_app.evaluation import emit_report
from promsec_app.optimizer_loop import LEDGER_FILE, RunLedger
from promsec_app.utils import IoError

from ._base import PromsecCommand


class Command(PromsecCommand):
    help = 'Re-emit CSV reports and charts for existing run directories'

    def add_command_arguments(self, parser):
        parser.add_argument('runs', nargs='*', type=str,
                            help='Run directories or ledger files (default: every run under the runs dir)')
        parser.add_argument('--out', type=str, help='Directory for the corpus CSV and charts (default: runs dir)')

    def run(self, **options):
        runs_dir = self.config.paths.runs_dir
        paths = options.get('runs') or sorted(
            os.path.dirname(p) for p in glob.glob(os.path.join(runs_dir, '*', LEDGER_FILE)))
        if not paths:
            raise IoError(f"no run ledgers found under {runs_dir}")
        ledgers = [RunLedger.load(path) for path in paths]
        out_dir = options.get('out') or runs_dir
        parents = {os.path.dirname(os.path.abspath(p if os.path.isdir(p) else os.path.dirname(p))) for p in paths}
        # trace CSVs go next to their ledgers when all runs share one parent
        written = emit_report(ledgers, out_dir, runs_dir=parents.pop() if len(parents) == 1 else None)
        self.audit('report_generated', f"report for {len(ledgers)} run(s) in {out_dir}",
                   runs=[ledger.run_id for ledger in ledgers], files=len(written))
        self.success(f'✓ Wrote {len(written)} files for {len(ledgers)} run(s) to {out_dir}')
