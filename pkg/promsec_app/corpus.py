"""
Seeded subject-language corpus.

Every generated program is a single ``handler`` function mixing harmless
filler statements with one or more vulnerable snippets. The manifest records
the CWE id and line of every seeded weakness; the clean twin swaps each
snippet for its secure counterpart and keeps the body layout line for line.
"""
import glob
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .code_parser import SourceUnit
from .utils import IoError, PipelineError, read_text, write_text

logger = logging.getLogger(__name__)

INDEX_FILE = 'corpus.json'
ENTRYPOINT = 'handler'


class CorpusError(PipelineError):
    pass


@dataclass(frozen=True)
class Snippet:
    cwe: int
    seeded: tuple
    clean: tuple
    flagged: int            # offset of the flagged line within the snippet
    imports: tuple = ()
    clean_imports: tuple = ()
    params: tuple = ()


SNIPPETS = {
    22: (
        Snippet(22, ('fname = input("file: ")', 'handle = open("/srv/data/" + fname)'),
                ('fname = os.path.basename(input("file: "))', 'handle = open("/srv/data/" + fname)'),
                1, clean_imports=('os',)),
    ),
    78: (
        Snippet(78, ('host = input("host: ")', 'os.system("ping -c 1 " + host)'),
                ('host = shlex.quote(input("host: "))', 'os.system("ping -c 1 " + host)'),
                1, imports=('os',), clean_imports=('os', 'shlex')),
        Snippet(78, ('cmd = "echo backup"', 'subprocess.call(cmd, shell=True)'),
                ('cmd = "echo backup"', 'subprocess.call(cmd)'),
                1, imports=('subprocess',), clean_imports=('subprocess',)),
    ),
    89: (
        Snippet(89, ('cursor = sqlite3.connect("app.db").cursor()',
                     'cursor.execute("SELECT * FROM users WHERE name = \'" + name + "\'")'),
                ('cursor = sqlite3.connect("app.db").cursor()',
                 'cursor.execute("SELECT * FROM users WHERE name = ?", params=[name])'),
                1, imports=('sqlite3',), clean_imports=('sqlite3',), params=('name',)),
    ),
    259: (
        Snippet(259, ('password = "hunter2"',), ('password = os.getenv("PASSWORD")',),
                0, clean_imports=('os',)),
    ),
    327: (
        Snippet(327, ('digest = hashlib.md5(data.encode()).hexdigest()',),
                ('digest = hashlib.sha256(data.encode()).hexdigest()',),
                0, imports=('hashlib',), clean_imports=('hashlib',), params=('data',)),
    ),
    330: (
        Snippet(330, ('token = random.randint(0, 999999)',), ('token = secrets.token_hex(16)',),
                0, imports=('random',), clean_imports=('secrets',)),
    ),
    502: (
        Snippet(502, ('obj = pickle.loads(blob)',), ('obj = json.loads(blob)',),
                0, imports=('pickle',), clean_imports=('json',), params=('blob',)),
        Snippet(502, ('settings = yaml.load(text)',), ('settings = yaml.safe_load(text)',),
                0, imports=('yaml',), clean_imports=('yaml',), params=('text',)),
    ),
    798: (
        Snippet(798, ('api_key = "sk-test-0000"',), ('api_key = os.getenv("API_KEY")',),
                0, clean_imports=('os',)),
    ),
}
SUPPORTED_CWES = tuple(sorted(SNIPPETS))

PRELUDE = ('total = 0', 'items = []', 'label = "start"')
FILLERS = (
    'total = total + {n}',
    'total = total * {n}',
    'label = "item-{n}"',
    'items.append(total)',
    'total = total - len(items)',
    'print(label)',
)


@dataclass(frozen=True)
class CorpusSpec:
    count: int = 60
    mix: dict = field(default_factory=lambda: {cwe: 1.0 for cwe in SUPPORTED_CWES})
    statements: tuple = (4, 10)
    max_cwes: int = 3
    seed: int = 7

    def __post_init__(self):
        if self.count < 0:
            raise CorpusError(f"program count must be >= 0, got {self.count}")
        unknown = sorted(set(self.mix) - set(SUPPORTED_CWES))
        if unknown:
            raise CorpusError(f"unsupported CWE ids in mix: {unknown}")
        if any(w < 0 for w in self.mix.values()) or not any(w > 0 for w in self.mix.values()):
            raise CorpusError("CWE mix weights must be non-negative and not all zero")
        low, high = self.statements
        if not 0 <= low <= high:
            raise CorpusError(f"invalid statements-per-program range {self.statements}")
        if self.max_cwes < 1:
            raise CorpusError(f"max_cwes must be >= 1, got {self.max_cwes}")

    @classmethod
    def from_dict(cls, data):
        mix = data.get('mix')
        return cls(
            count=int(data.get('count', 60)),
            mix={int(k): float(v) for k, v in mix.items()} if mix else {cwe: 1.0 for cwe in SUPPORTED_CWES},
            statements=tuple(data.get('statements', (4, 10))),
            max_cwes=int(data.get('max_cwes', 3)),
            seed=int(data.get('seed', 7)),
        )

    def to_dict(self):
        return {'count': self.count, 'mix': {str(k): v for k, v in sorted(self.mix.items())},
                'statements': list(self.statements), 'max_cwes': self.max_cwes, 'seed': self.seed}


@dataclass
class CorpusProgram:
    id: str
    unit: SourceUnit
    clean: SourceUnit = None
    seeded: list = field(default_factory=list)  # [{'cwe': id, 'line': n}]
    fuzz: dict = None

    @property
    def cwes(self):
        return sorted({s['cwe'] for s in self.seeded})

    def manifest(self):
        return {'id': self.id, 'seeded': self.seeded, 'clean': f"{self.id}.clean.py" if self.clean else None}


def _layout(rng, snippets, low, high):
    """Body lines (seeded and clean) plus the body offset of every flagged line"""
    fillers = int(rng.integers(low, high + 1))
    blocks = [('filler', FILLERS[int(rng.integers(len(FILLERS)))].format(n=int(rng.integers(1, 10))))
              for _ in range(fillers)]
    for snippet in snippets:
        blocks.insert(int(rng.integers(0, len(blocks) + 1)), ('snippet', snippet))
    seeded, clean, flagged = list(PRELUDE), list(PRELUDE), []
    for kind, block in blocks:
        if kind == 'filler':
            seeded.append(block)
            clean.append(block)
            continue
        flagged.append((block.cwe, len(seeded) + block.flagged))
        seeded.extend(block.seeded)
        clean.extend(block.clean)
    seeded.append('return total')
    clean.append('return total')
    return seeded, clean, flagged


def _render(imports, params, body):
    header = [f"import {name}" for name in sorted(set(imports))]
    lines = header + ([''] if header else [])
    lines.append(f"def {ENTRYPOINT}({', '.join(params)}):")
    body_start = len(lines) + 1
    lines.extend('    ' + line for line in body)
    return '\n'.join(lines) + '\n', body_start


def fuzz_spec_for(params, seed):
    """Fuzz document exercising the handler with short string arguments"""
    return {
        'entrypoint': ENTRYPOINT,
        'params': [{'name': p, 'type': 'str', 'min_len': 0, 'max_len': 12} for p in params],
        'seed': seed,
    }


def generate_program(spec, index):
    rng = np.random.default_rng([spec.seed, index])
    weighted = sorted(cwe for cwe, w in spec.mix.items() if w > 0)
    weights = np.array([spec.mix[cwe] for cwe in weighted], dtype=float)
    n = int(rng.integers(1, min(spec.max_cwes, len(weighted)) + 1))
    chosen = sorted(int(c) for c in rng.choice(weighted, size=n, replace=False, p=weights / weights.sum()))
    snippets = [SNIPPETS[cwe][int(rng.integers(len(SNIPPETS[cwe])))] for cwe in chosen]
    seeded_body, clean_body, flagged = _layout(rng, snippets, *spec.statements)
    params = sorted({p for s in snippets for p in s.params})
    program_id = f"program_{index:03d}"
    text, body_start = _render([i for s in snippets for i in s.imports], params, seeded_body)
    clean_text, _ = _render([i for s in snippets for i in s.clean_imports], params, clean_body)
    seeded = [{'cwe': cwe, 'line': body_start + offset} for cwe, offset in flagged]
    return CorpusProgram(
        id=program_id,
        unit=SourceUnit.from_text(text, id=program_id),
        clean=SourceUnit.from_text(clean_text, id=f"{program_id}.clean"),
        seeded=sorted(seeded, key=lambda s: (s['line'], s['cwe'])),
        fuzz=fuzz_spec_for(params, spec.seed),
    )


def generate_corpus(spec):
    """Programs 0..count-1; identical for identical specs"""
    return [generate_program(spec, i) for i in range(spec.count)]


def _dump(data):
    return json.dumps(data, indent=2, sort_keys=True) + '\n'


def write_corpus(programs, out_dir, spec=None):
    """
    Write <id>.py, <id>.clean.py, <id>.fuzz.json and the corpus.json index.

    Returns:
        path of the index file
    """
    for program in programs:
        write_text(os.path.join(out_dir, f"{program.id}.py"), program.unit.text)
        if program.clean is not None:
            write_text(os.path.join(out_dir, f"{program.id}.clean.py"), program.clean.text)
        if program.fuzz is not None:
            write_text(os.path.join(out_dir, f"{program.id}.fuzz.json"), _dump(program.fuzz))
    index = {
        'spec': spec.to_dict() if spec else None,
        'programs': [program.manifest() for program in programs],
    }
    path = os.path.join(out_dir, INDEX_FILE)
    write_text(path, _dump(index))
    logger.info("Wrote %d programs to %s", len(programs), out_dir)
    return path


def load_corpus(corpus_dir):
    """
    Programs of a corpus directory. Without an index every ``*.py`` file that
    is not a clean twin is a program with an empty manifest.
    """
    if not os.path.isdir(corpus_dir):
        raise IoError(f"corpus directory {corpus_dir} does not exist")
    index_path = os.path.join(corpus_dir, INDEX_FILE)
    if not os.path.exists(index_path):
        programs = []
        for path in sorted(glob.glob(os.path.join(corpus_dir, '*.py'))):
            if path.endswith('.clean.py'):
                continue
            program_id = os.path.splitext(os.path.basename(path))[0]
            programs.append(CorpusProgram(program_id, SourceUnit.from_text(read_text(path), id=program_id)))
        return programs
    try:
        index = json.loads(read_text(index_path))
    except ValueError as e:
        raise CorpusError(f"cannot read corpus index {index_path}: {e}")
    programs = []
    for entry in index['programs']:
        program_id = entry['id']
        unit = SourceUnit.from_text(read_text(os.path.join(corpus_dir, f"{program_id}.py")), id=program_id)
        clean = None
        if entry.get('clean'):
            clean = SourceUnit.from_text(read_text(os.path.join(corpus_dir, entry['clean'])),
                                         id=f"{program_id}.clean")
        fuzz_path = os.path.join(corpus_dir, f"{program_id}.fuzz.json")
        fuzz = json.loads(read_text(fuzz_path)) if os.path.exists(fuzz_path) else None
        programs.append(CorpusProgram(program_id, unit, clean, entry.get('seeded', []), fuzz))
    return programs
