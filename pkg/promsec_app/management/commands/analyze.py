import json
import os

from promsec_app.code_parser import SourceUnit
from promsec_app.utils import PipelineError, read_text, write_text

from ._base import EXIT_FINDINGS, PromsecCommand


class Command(PromsecCommand):
    help = 'Analyze one source file and print its CWE findings (exit 0 clean, 1 findings, 2 error)'

    def add_command_arguments(self, parser):
        parser.add_argument('path', type=str, help='Source file to analyze')
        parser.add_argument('--external', action='store_true',
                            help='Run the configured external analyzer instead of the builtin rules')
        parser.add_argument('--json', type=str, dest='json_out', help='Also write the report JSON to this file')

    def run(self, **options):
        path = options['path']
        if options.get('external'):
            self.config = self.config.with_analyzer(mode='external')
        unit = SourceUnit.from_text(read_text(path), origin='file', id=os.path.basename(path))
        try:
            report = self.config.make_analyzer().analyze(unit)
        except PipelineError as e:
            self.audit('analysis_failed', f"{path}: {e}", severity='error', **e.to_dict())
            raise

        if report.findings:
            self.stdout.write(f"{'LINE':>5}  {'CWE':<8} {'RULE':<8} {'CONFIDENCE':<10} MESSAGE")
            for f in report.findings:
                self.stdout.write(f"{f.line:>5}  CWE-{f.cwe:<4} {f.rule:<8} {f.confidence:<10} {f.message}")
        payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
        if options.get('json_out'):
            write_text(options['json_out'], payload + '\n')
        else:
            self.stdout.write(payload)

        if report.k == 0:
            self.success(f'✓ {path}: k=0')
            return
        self.fail(f"{path}: k={report.k} ({', '.join(f'CWE-{c}' for c in report.cwes())})", EXIT_FINDINGS)
