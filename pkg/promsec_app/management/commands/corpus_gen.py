from promsec_app.corpus import CorpusError, CorpusSpec, generate_corpus, write_corpus

from ._base import PromsecCommand


def parse_mix(text):
    """'78:1,89:2' -> {78: 1.0, 89: 2.0}"""
    mix = {}
    for part in filter(None, (p.strip() for p in text.split(','))):
        cwe, _, weight = part.partition(':')
        try:
            mix[int(cwe.upper().replace('CWE-', ''))] = float(weight or 1)
        except ValueError:
            raise CorpusError(f"cannot read CWE mix entry {part!r}")
    return mix


class Command(PromsecCommand):
    help = 'Generate a seeded corpus of vulnerable programs with manifests and clean twins'

    def add_command_arguments(self, parser):
        parser.add_argument('--out', type=str, help='Corpus directory (default: PROMSEC_CORPUS_DIR)')
        parser.add_argument('--count', type=int, default=60, help='Number of programs')
        parser.add_argument('--mix', type=str, help='CWE weights, e.g. "78:1,89:1" (default: all supported, equal)')
        parser.add_argument('--statements', type=int, nargs=2, metavar=('MIN', 'MAX'), default=(4, 10),
                            help='Filler statements per program')
        parser.add_argument('--max-cwes', type=int, default=3, help='Most CWE classes seeded in one program')

    def run(self, **options):
        data = {
            'count': options['count'],
            'statements': tuple(options['statements']),
            'max_cwes': options['max_cwes'],
            'seed': self.config.seed,
        }
        if options.get('mix'):
            data['mix'] = parse_mix(options['mix'])
        spec = CorpusSpec.from_dict(data)
        out_dir = options.get('out') or self.config.paths.corpus_dir
        programs = generate_corpus(spec)
        index = write_corpus(programs, out_dir, spec)
        seeded = sum(len(p.seeded) for p in programs)
        self.audit('corpus_generated', f"{len(programs)} programs in {out_dir}",
                   programs=len(programs), seeded=seeded, spec=spec.to_dict())
        self.success(f'✓ Wrote {len(programs)} programs ({seeded} seeded weaknesses) to {out_dir}')
        self.stdout.write(f'  Index: {index}')
