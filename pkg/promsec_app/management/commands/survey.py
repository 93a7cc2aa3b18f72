import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor

from django.conf import settings

from promsec_app.evaluation import bar_chart, cwe_histogram, k_histogram, write_csv
from promsec_app.llm_client import CostLog, LlmError, PromptRecord, generate_code
from promsec_app.utils import PipelineError, data_path, new_run_id, read_text, write_text

from ._base import PromsecCommand

logger = logging.getLogger(__name__)

SURVEY_COLUMNS = ('prompt', 'repeat', 'unit_id', 'k', 'cwes', 'error')


def load_prompts(path):
    try:
        prompts = json.loads(read_text(path))
    except ValueError as e:
        raise LlmError(f"cannot read survey prompts {path}: {e}")
    if not isinstance(prompts, list) or not all(isinstance(p, str) and p.strip() for p in prompts):
        raise LlmError(f"{path} must hold a JSON array of prompt strings")
    return prompts


class Command(PromsecCommand):
    help = 'Generate code for a set of prompts and histogram the CWEs found in it'

    def add_command_arguments(self, parser):
        parser.add_argument('prompts', nargs='?', type=str, help='JSON array of prompts (default: bundled survey)')
        parser.add_argument('--repeats', type=int, default=2, help='Generations per prompt')
        parser.add_argument('--workers', type=int, help='Parallel generations (default: PROMSEC_BENCH_WORKERS)')
        parser.add_argument('--out', type=str, help='Output directory (default: <runs dir>/<survey id>)')

    def run(self, **options):
        prompts = load_prompts(options.get('prompts') or data_path('survey_prompts.json'))
        repeats = max(0, options['repeats'])
        workers = max(1, options.get('workers') or settings.PROMSEC_BENCH_WORKERS)
        out_dir = options.get('out') or os.path.join(self.config.paths.runs_dir, new_run_id('survey'))
        analyzer = self.config.make_analyzer()

        def task(index, repeat):
            unit_id = f"prompt{index:02d}-r{repeat}"
            row = {'prompt': index, 'repeat': repeat, 'unit_id': unit_id, 'k': None, 'cwes': '', 'error': None}
            try:
                unit = generate_code(self.config.make_client(), PromptRecord(prompts[index]), CostLog(), unit_id)
                report = analyzer.analyze(unit)
            except PipelineError as e:
                logger.warning("Survey prompt %d repeat %d failed: %s", index, repeat, e)
                row['error'] = f"{type(e).__name__}: {e}"
                return row, None, None
            row['k'] = report.k
            row['cwes'] = ' '.join(str(c) for c in report.cwes())
            return row, unit, report

        jobs = [(i, r) for i in range(len(prompts)) for r in range(1, repeats + 1)]
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(lambda job: task(*job), jobs))

        rows = [row for row, _, _ in results]
        reports = [report for _, _, report in results if report is not None]
        for _, unit, _ in results:
            if unit is not None:
                write_text(os.path.join(out_dir, 'codes', f"{unit.id}.py"), unit.text)
        cwes, ks = cwe_histogram(reports), k_histogram(reports)
        write_csv(os.path.join(out_dir, 'survey.csv'), SURVEY_COLUMNS, rows)
        write_csv(os.path.join(out_dir, 'cwe_histogram.csv'), ('cwe', 'count'),
                  [{'cwe': c, 'count': n} for c, n in cwes.items()])
        write_csv(os.path.join(out_dir, 'k_histogram.csv'), ('k', 'count'),
                  [{'k': k, 'count': n} for k, n in ks.items()])
        bar_chart({'findings': cwes}, os.path.join(out_dir, 'charts', 'cwe_histogram.svg'),
                  'CWE findings in generated code', 'CWE')
        bar_chart({'codes': ks}, os.path.join(out_dir, 'charts', 'k_histogram.svg'),
                  'CWE count per generated code', 'k')

        failed = sum(row['error'] is not None for row in rows)
        self.audit('survey_finished', f"{len(reports)} codes analyzed from {len(prompts)} prompts",
                   severity='warning' if failed else 'info', out_dir=out_dir, failed=failed,
                   cwe_histogram={str(c): n for c, n in cwes.items()})
        self.success(f'✓ Analyzed {len(reports)} generated codes ({failed} failed) into {out_dir}')
        for cwe, count in cwes.items():
            self.stdout.write(f'  CWE-{cwe}: {count}')
