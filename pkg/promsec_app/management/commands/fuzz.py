import json
import os
from dataclasses import replace

from promsec_app.code_parser import SourceUnit
from promsec_app.fuzz_harness import FuzzSpec, fuzz_compare
from promsec_app.utils import PipelineError, read_text, write_text

from ._base import EXIT_FINDINGS, PromsecCommand


class Command(PromsecCommand):
    help = 'Differentially fuzz two versions of a program (exit 0 equivalent, 1 different, 2 error)'

    def add_command_arguments(self, parser):
        parser.add_argument('orig', type=str, help='Original source file')
        parser.add_argument('new', type=str, help='Rewritten source file')
        parser.add_argument('spec', type=str, help='Fuzz spec JSON (entrypoint and parameter domains)')
        parser.add_argument('--trials', type=int, help='Override the number of trials')
        parser.add_argument('--threshold', type=float, help='Override the mean difference threshold')
        parser.add_argument('--out', type=str, help='Write the result JSON here instead of stdout')

    def run(self, **options):
        spec = FuzzSpec.load(options['spec'])
        overrides = {k: options[k] for k in ('trials', 'threshold') if options.get(k) is not None}
        if overrides:
            spec = replace(spec, **overrides)
        orig, new = (SourceUnit.from_text(read_text(p), origin='file', id=os.path.basename(p))
                     for p in (options['orig'], options['new']))
        try:
            result = fuzz_compare(orig, new, spec)
        except PipelineError as e:
            self.audit('fuzz_result', f"{orig.id} vs {new.id}: {e}", severity='error', **e.to_dict())
            raise

        payload = json.dumps(result.to_dict(), indent=2, sort_keys=True, default=repr)
        if options.get('out'):
            write_text(options['out'], payload + '\n')
        else:
            self.stdout.write(payload)
        self.audit('fuzz_result', f"{orig.id} vs {new.id}: mean diff {result.mean_abs_diff:.6f}",
                   severity='info' if result.passed else 'warning', passed=result.passed,
                   mean_abs_diff=result.mean_abs_diff, trials=result.trials)
        if result.passed:
            self.success(f'✓ equivalent over {result.trials} trials (mean diff {result.mean_abs_diff:.6f})')
            return
        self.fail(f"outputs differ: mean diff {result.mean_abs_diff:.6f} >= {spec.threshold}", EXIT_FINDINGS)
