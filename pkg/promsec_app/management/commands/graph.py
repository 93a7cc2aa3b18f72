import os

from promsec_app.code_graphs import default_vocab, graph_from_source, to_dot
from promsec_app.utils import read_text, write_text

from ._base import GRAPH_KINDS, PromsecCommand


class Command(PromsecCommand):
    help = 'Dump the AST, CFG or DFG of a source file as dot-style text'

    def add_command_arguments(self, parser):
        parser.add_argument('path', type=str, help='Source file')
        parser.add_argument('--kind', type=str.lower, choices=GRAPH_KINDS,
                            help='Graph kind (default: --graph-kind or the configured loop kind)')
        parser.add_argument('--out', type=str, help='Output file (default: stdout)')

    def run(self, **options):
        path = options['path']
        kind = options.get('kind') or self.config.loop.graph_kind
        g = graph_from_source(read_text(path), kind, default_vocab(), unit_id=os.path.basename(path))
        g.validate()
        text = to_dot(g)
        if options.get('out'):
            write_text(options['out'], text)
            self.success(f'✓ {g.kind} with {len(g.nodes)} nodes and {len(g.edges)} edges written to {options["out"]}')
        else:
            self.stdout.write(text, ending='')
