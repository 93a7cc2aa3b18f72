import logging
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import replace

from django.conf import settings
from django.core.management.base import CommandError

from promsec_app.corpus import load_corpus
from promsec_app.evaluation import (
    BENCH_COLUMNS, SUMMARY_COLUMNS, bar_chart, bench_row, emit_report, mode_summary, write_csv,
)
from promsec_app.llm_client import CLIENT_KINDS
from promsec_app.optimizer_loop import A2, MODES, PROMSEC, LoopError, run_mode
from promsec_app.utils import new_run_id

from ._base import EXIT_ERROR, PromsecCommand

logger = logging.getLogger(__name__)


def parse_modes(text):
    modes = [m.strip() for m in text.split(',') if m.strip()]
    unknown = [m for m in modes if m not in MODES]
    if not modes or unknown:
        raise LoopError(f"modes must be a comma list of {', '.join(MODES)}, got {text!r}")
    return modes


class Command(PromsecCommand):
    help = 'Run several optimization modes over every corpus program and compare them'

    def add_command_arguments(self, parser):
        parser.add_argument('corpus', nargs='?', type=str, help='Corpus directory (default: PROMSEC_CORPUS_DIR)')
        parser.add_argument('--modes', type=str, default='promsec,bl1', help='Comma list of modes')
        parser.add_argument('--limit', type=int, help='Only the first N programs')
        parser.add_argument('--workers', type=int, help='Parallel runs (default: PROMSEC_BENCH_WORKERS)')
        parser.add_argument('--checkpoint', type=str, help='gGAN checkpoint')
        parser.add_argument('--optimizer-client', type=str, choices=CLIENT_KINDS,
                            help='Separate LLM client for prompt inference (cross-LLM transfer)')
        parser.add_argument('--out', type=str, help='Output directory (default: <runs dir>/<bench id>)')

    def run(self, **options):
        modes = parse_modes(options['modes'])
        programs = load_corpus(options.get('corpus') or self.config.paths.corpus_dir)
        if options.get('limit') is not None:
            programs = programs[:options['limit']]
        workers = max(1, options.get('workers') or settings.PROMSEC_BENCH_WORKERS)
        model = self.load_model(options.get('checkpoint'), required=bool({PROMSEC, A2} & set(modes)))
        analyzer = self.config.make_analyzer()
        out_dir = options.get('out') or os.path.join(self.config.paths.runs_dir, new_run_id('bench'))

        def task(program, mode):
            # clients keep per-rule turn counters, so each run gets its own
            optimizer = options.get('optimizer_client')
            return run_mode(program.unit, replace(self.config.loop, mode=mode), self.config.make_client(),
                            analyzer, model, self.config.make_client(optimizer) if optimizer else None,
                            run_id=f"{mode}-{program.id}")

        self.stdout.write(f'Benchmarking {len(programs)} programs x {len(modes)} modes with {workers} worker(s)')
        ledgers, rows, interrupted = [], [], False
        executor = ThreadPoolExecutor(max_workers=workers)
        try:
            futures = {executor.submit(task, p, m): (p, m) for p in programs for m in modes}
            for future in as_completed(futures):
                program, mode = futures[future]
                ledger = future.result()
                self.persist_run(ledger, out_dir, source_name=program.id)
                ledgers.append(ledger)
                rows.append(bench_row(program.id, ledger))
                self.stdout.write(f'  {program.id} [{mode}]: {ledger.status}, best k={ledger.best_k()}')
        except KeyboardInterrupt:
            interrupted = True
            logger.warning("Benchmark interrupted after %d of %d runs", len(rows), len(programs) * len(modes))
        finally:
            executor.shutdown(wait=not interrupted, cancel_futures=True)
            if rows:
                self.flush(out_dir, modes, ledgers, rows)
        if interrupted:
            raise CommandError(f"interrupted; partial results in {out_dir}", returncode=EXIT_ERROR)

        self.audit('bench_finished', f"{len(programs)} programs x {', '.join(modes)}",
                   out_dir=out_dir, summary=mode_summary(rows))
        self.success(f'✓ Benchmark written to {out_dir}')

    def flush(self, out_dir, modes, ledgers, rows):
        order = {mode: i for i, mode in enumerate(modes)}
        rows = sorted(rows, key=lambda r: (r['program'], order[r['mode']]))
        ledgers = sorted(ledgers, key=lambda ledger: ledger.run_id)
        summary = mode_summary(sorted(rows, key=lambda r: order[r['mode']]))
        write_csv(os.path.join(out_dir, 'bench.csv'), BENCH_COLUMNS, rows)
        write_csv(os.path.join(out_dir, 'summary.csv'), SUMMARY_COLUMNS, summary)
        bar_chart({'secured fraction': {s['mode']: s['secured_fraction'] for s in summary}},
                  os.path.join(out_dir, 'charts', 'secured_fraction.svg'),
                  'Secured fraction per mode', 'mode', 'fraction')
        emit_report(ledgers, out_dir)
        for s in summary:
            similarity = 'n/a' if s['mean_similarity'] is None else f"{s['mean_similarity']:.3f}"
            self.stdout.write(f"  {s['mode']:<12} secured {s['secured_fraction']:.0%}  "
                              f"iterations {s['mean_iterations']:.1f}  similarity {similarity}  "
                              f"LLM queries {s['llm_queries']}")
