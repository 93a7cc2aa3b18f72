import os

from promsec_app.code_parser import SourceUnit
from promsec_app.evaluation import cost_summary, emit_report
from promsec_app.llm_client import CLIENT_KINDS, PromptRecord
from promsec_app.optimizer_loop import A2, ERROR, PROMSEC, SECURED, run_mode
from promsec_app.utils import IoError, new_run_id, read_text

from ._base import EXIT_ERROR, EXIT_FINDINGS, PromsecCommand


def read_source(value, as_prompt=False):
    """A PromptRecord for prompt text, otherwise the SourceUnit of a file"""
    if as_prompt:
        return PromptRecord(value)
    if not os.path.isfile(value):
        raise IoError(f"input file {value} does not exist (use --prompt for prompt text)")
    return SourceUnit.from_text(read_text(value), origin='user-code', id=os.path.basename(value))


class Command(PromsecCommand):
    help = 'Optimize a prompt or a code file until its code is secure (exit 0 secured, 1 not secured, 2 error)'

    def add_command_arguments(self, parser):
        parser.add_argument('input', type=str, help='Code file, or prompt text with --prompt')
        parser.add_argument('--prompt', action='store_true', help='Treat the input as prompt text')
        parser.add_argument('--checkpoint', type=str, help='gGAN checkpoint (default: <checkpoint dir>/ggan-<kind>.ckpt)')
        parser.add_argument('--optimizer-client', type=str, choices=CLIENT_KINDS,
                            help='Separate LLM client for prompt inference')
        parser.add_argument('--run-id', type=str, help='Run identifier (default: generated)')

    def run(self, **options):
        cfg = self.config.loop
        source = read_source(options['input'], options.get('prompt'))
        model = self.load_model(options.get('checkpoint'), required=cfg.mode in (PROMSEC, A2))
        client = self.config.make_client()
        optimizer_client = None
        if options.get('optimizer_client'):
            optimizer_client = self.config.make_client(options['optimizer_client'])

        run_id = options.get('run_id') or new_run_id(cfg.mode)
        self.audit('run_started', f"{cfg.mode} run on {options['input'][:80]}",
                   run_id=run_id, config=self.config.to_dict())
        ledger = run_mode(source, cfg, client, self.config.make_analyzer(), model, optimizer_client, run_id)
        runs_dir = self.config.paths.runs_dir
        run_dir = self.persist_run(ledger, runs_dir, source_name=source.id if isinstance(source, SourceUnit) else 'prompt')
        emit_report([ledger], run_dir, runs_dir=runs_dir)

        costs = cost_summary(ledger)
        self.stdout.write(f'Run: {ledger.run_id} ({ledger.mode})')
        self.stdout.write(f'  Directory: {run_dir}')
        self.stdout.write(f'  Iterations: {len(ledger.traces)}, best k: {ledger.best_k()}')
        self.stdout.write(f'  LLM queries: {costs.llm_queries} ({costs.input_tokens} in / '
                          f'{costs.output_tokens} out tokens), analyses: {costs.analyses}, '
                          f'time: {costs.seconds:.2f}s')
        if ledger.status == SECURED:
            self.success(f'✓ {ledger.status}')
            return
        if ledger.status == ERROR:
            self.fail(f"{ledger.status}: {ledger.error}", EXIT_ERROR)
        self.fail(ledger.status, EXIT_FINDINGS)
