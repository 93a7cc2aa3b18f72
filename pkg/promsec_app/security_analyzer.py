"""
Security analysis of subject-language units.

Two back-ends produce the same SecurityReport shape:

- builtin: a deterministic rule table evaluated over the AST with taint
  facts taken from the DFG. A finding's confidence is ``high`` when the
  flagged operand is reachable from an input source (``input()``, a function
  argument, ``request``/``argv``) and ``low`` otherwise.
- external: a Bandit-class tool run as a child process on a temp file; its
  JSON report (``results`` array) is parsed into findings.
"""
import json
import logging
import os
import re
import shlex
import subprocess
import tempfile
import time
from dataclasses import dataclass

from django.conf import settings
from django.core.cache import cache

from .code_graphs import DEF_USE, build_ast, build_dfg, categorize
from .code_parser import STATEMENT_KINDS, parse_text, string_value
from .fix_templates import call_names, call_terminal
from .utils import PipelineError, read_text, write_text

logger = logging.getLogger(__name__)

BUILTIN = 'builtin'
EXTERNAL = 'external'
CONFIDENCE_LEVELS = ('low', 'medium', 'high')
SUPPORTED_CWES = (22, 78, 89, 259, 327, 330, 502, 798)

RULES = {
    'R-078': (78, 'command built from non-literal data or run through a shell'),
    'R-089': (89, 'SQL query assembled from non-literal data'),
    'R-259': (259, 'hard-coded password'),
    'R-798': (798, 'hard-coded credential'),
    'R-327': (327, 'weak hash or cipher'),
    'R-330': (330, 'non-cryptographic random value used for a security value'),
    'R-502': (502, 'unsafe deserialization'),
    'R-022': (22, 'file path built from non-literal data'),
}

_EXEC_MODULES = frozenset({'os', 'subprocess', 'commands', 'pty'})
_SHELL_ALWAYS = frozenset({'system', 'popen', 'getoutput'})
_PASSWORD_NAME_RE = re.compile(r"(^|_)(password|passwd|pwd)s?($|_)", re.IGNORECASE)
_CREDENTIAL_NAME_RE = re.compile(r"(^|_)(api_?key|apikey|token|secret|key)s?($|_)", re.IGNORECASE)
_SECURITY_NAME_RE = re.compile(
    r"(^|_)(token|secret|key|password|passwd|pwd|otp|nonce|salt|session|pin)s?($|_)", re.IGNORECASE)
_RANDOM_FUNCS = frozenset({'random', 'randint', 'choice', 'randrange', 'uniform', 'getrandbits', 'sample'})
_WEAK_HASHES = frozenset({'md5', 'sha1'})
_DESERIALIZE_FUNCS = frozenset({'loads', 'load'})
_YAML_UNSAFE = frozenset({'load', 'unsafe_load', 'full_load'})
_SOURCE_CALLS = frozenset({'input', 'raw_input'})
_SOURCE_NAMES = frozenset({'argv', 'request'})

# taint levels
CLEAN, UNKNOWN, SOURCE = 0, 1, 2

# operand shapes: every leaf a literal / non-literal parts all sanitized / anything else
LITERAL, SANITIZED, OPEN = 0, 1, 2


class AnalyzerError(PipelineError):
    pass


class ToolNotFound(AnalyzerError):
    pass


class ToolTimeout(AnalyzerError):
    pass


class ReportParseError(AnalyzerError):
    pass


@dataclass(frozen=True)
class Finding:
    cwe: int
    rule: str
    line: int
    confidence: str = 'low'
    message: str = ''
    external: bool = False

    def to_dict(self):
        data = {'cwe': self.cwe, 'rule': self.rule, 'line': self.line,
                'confidence': self.confidence, 'message': self.message}
        if self.external:
            data['external'] = True
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(cwe=int(data['cwe']), rule=data['rule'], line=int(data['line']),
                   confidence=data.get('confidence', 'low'), message=data.get('message', ''),
                   external=bool(data.get('external', False)))


@dataclass
class SecurityReport:
    unit_id: str
    findings: tuple = ()
    tool: str = BUILTIN
    elapsed: float = 0.0

    def __post_init__(self):
        self.findings = tuple(sorted(self.findings, key=lambda f: (f.line, f.cwe, f.rule)))

    @property
    def k(self):
        return len(self.findings)

    def cwes(self):
        return sorted({f.cwe for f in self.findings})

    def lines(self):
        return sorted({f.line for f in self.findings})

    def to_dict(self):
        """Canonical form; elapsed time is left out so reports compare byte-for-byte"""
        return {'unit_id': self.unit_id, 'tool': self.tool, 'k': self.k,
                'findings': [f.to_dict() for f in self.findings]}

    @classmethod
    def from_dict(cls, data, elapsed=0.0):
        return cls(unit_id=data['unit_id'], tool=data.get('tool', BUILTIN),
                   findings=tuple(Finding.from_dict(f) for f in data.get('findings', ())),
                   elapsed=elapsed)


@dataclass
class AnalyzerConfig:
    mode: str = BUILTIN
    command: str = 'bandit -q -f json -o {report-file} {input-file}'
    timeout: float = 60.0
    cache_duration: int = 3600
    use_cache: bool = True

    def __post_init__(self):
        if self.mode not in (BUILTIN, EXTERNAL):
            raise AnalyzerError(f"unknown analyzer mode {self.mode!r}")
        if not self.timeout or self.timeout <= 0:
            raise AnalyzerError("analyzer timeout must be positive")

    @classmethod
    def from_settings(cls, **overrides):
        values = {
            'mode': settings.PROMSEC_ANALYZER_MODE,
            'command': settings.PROMSEC_ANALYZER_COMMAND,
            'timeout': settings.PROMSEC_ANALYZER_TIMEOUT,
            'cache_duration': settings.PROMSEC_ANALYZER_CACHE_DURATION,
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def argv(self, input_file, report_file):
        template = self.command if isinstance(self.command, (list, tuple)) else shlex.split(self.command)
        return [arg.replace('{input-file}', input_file).replace('{report-file}', report_file)
                for arg in template]

    def to_dict(self):
        return {'mode': self.mode, 'command': self.command, 'timeout': self.timeout,
                'cache_duration': self.cache_duration}


# ==================== Taint facts ====================

class _Taint:
    """Per-unit taint evaluation over the DFG's def-use edges"""

    def __init__(self, tree, dfg):
        self.tree = tree
        self.dfg = dfg
        self.stmt_node = {}
        self.entry_params = set()
        for node in dfg.nodes:
            if node.kind in STATEMENT_KINDS:
                self.stmt_node[node.syn_node] = node.id
            elif node.kind == 'Entry':
                self.entry_params.add(node.id)
        self.defs_of = {}
        for e in dfg.edges:
            if e.kind == DEF_USE:
                self.defs_of.setdefault((e.dst, e.var), []).append(e.src)
        self._memo = {}
        self._active = set()

    def expression(self, stmt, index):
        """Taint level of the expression at tree index, evaluated at statement stmt"""
        node = self.tree.nodes[index]
        kind = node.kind
        if kind in ('Str', 'Num', 'Bool', 'NoneLit'):
            return CLEAN
        if kind == 'Name':
            if node.payload in _SOURCE_NAMES:
                return SOURCE
            return self.variable(stmt, node.payload)
        if kind == 'Call':
            names = call_names(self.tree, index)
            if any(categorize(n) == 'sanitize' for n in names):
                return CLEAN
            if any(categorize(n) == 'getenv' for n in names):
                return CLEAN
            if call_terminal(self.tree, index) in _SOURCE_CALLS:
                return SOURCE
            func = self.tree.nodes[node.children[0]]
            parts = list(node.children[1:])
            if func.kind == 'Attribute':
                parts.append(func.children[0])
            return max((self.expression(stmt, c) for c in parts), default=CLEAN)
        if kind == 'Keyword':
            return self.expression(stmt, node.children[0])
        return max((self.expression(stmt, c) for c in node.children), default=CLEAN)

    def variable(self, stmt, var):
        node_id = self.stmt_node.get(stmt)
        if node_id is None:
            return UNKNOWN
        defs = self.defs_of.get((node_id, var))
        if not defs:
            return UNKNOWN
        return max(self.definition(d, var) for d in defs)

    def definition(self, node_id, var):
        key = (node_id, var)
        if key in self._memo:
            return self._memo[key]
        if key in self._active:
            return CLEAN
        self._active.add(key)
        node = self.dfg.nodes[node_id]
        if node_id in self.entry_params:
            level = SOURCE
        else:
            syn = self.tree.nodes[node.syn_node]
            if syn.kind == 'Assign':
                level = self.expression(node.syn_node, syn.children[1])
            elif syn.kind == 'For':
                level = self.expression(node.syn_node, syn.children[1])
            elif syn.kind == 'With':
                items = [c for c in syn.children[:-1] if self.tree.nodes[c].payload == var]
                level = max((self.expression(node.syn_node, self.tree.nodes[c].children[0]) for c in items),
                            default=CLEAN)
            else:
                level = CLEAN
        self._active.discard(key)
        self._memo[key] = level
        return level

    def _reaching(self, stmt, var):
        node_id = self.stmt_node.get(stmt)
        return self.defs_of.get((node_id, var), []) if node_id is not None else []

    def _assigned_value(self, node_id):
        """(statement, value index) of an Assign definition, or None"""
        if node_id in self.entry_params:
            return None
        syn = self.dfg.nodes[node_id].syn_node
        if self.tree.nodes[syn].kind != 'Assign':
            return None
        return syn, self.tree.nodes[syn].children[1]

    def shape(self, stmt, index):
        """
        LITERAL, SANITIZED or OPEN for the expression at tree index.

        A variable is never LITERAL: it is SANITIZED when every reaching
        assignment is built from literals and sanitizer calls with at least
        one sanitizer, and OPEN otherwise.
        """
        node = self.tree.nodes[index]
        kind = node.kind
        if kind in ('Str', 'Num', 'Bool', 'NoneLit'):
            return LITERAL
        if kind == 'Call':
            if any(categorize(n) == 'sanitize' for n in call_names(self.tree, index)):
                return SANITIZED
            return OPEN
        if kind == 'Name':
            if node.payload in _SOURCE_NAMES:
                return OPEN
            defs = self._reaching(stmt, node.payload)
            if not defs:
                return OPEN
            shapes = [self._definition_shape(d, node.payload) for d in defs]
            return SANITIZED if all(s == SANITIZED for s in shapes) else OPEN
        if kind == 'Keyword':
            return self.shape(stmt, node.children[0])
        if not node.children:
            return OPEN
        return max(self.shape(stmt, c) for c in node.children)

    def _definition_shape(self, node_id, var):
        key = ('shape', node_id, var)
        if key in self._memo:
            return self._memo[key]
        if key in self._active:
            return SANITIZED
        self._active.add(key)
        assigned = self._assigned_value(node_id)
        shape = OPEN if assigned is None else self.shape(*assigned)
        self._active.discard(key)
        self._memo[key] = shape
        return shape

    def concatenated(self, stmt, index):
        """True when the value is built by +, % or .format here or in a reaching assignment"""
        node = self.tree.nodes[index]
        if node.kind == 'BinOp' and node.payload in ('+', '%'):
            return True
        if node.kind == 'Call':
            func = self.tree.nodes[node.children[0]]
            return func.kind == 'Attribute' and func.payload == 'format'
        if node.kind == 'Name':
            return any(self._definition_concatenated(d, node.payload)
                       for d in self._reaching(stmt, node.payload))
        return False

    def _definition_concatenated(self, node_id, var):
        key = ('concat', node_id, var)
        if key in self._memo:
            return self._memo[key]
        if key in self._active:
            return False
        self._active.add(key)
        assigned = self._assigned_value(node_id)
        result = assigned is not None and self.concatenated(*assigned)
        self._active.discard(key)
        self._memo[key] = result
        return result


# ==================== Rule table ====================

def _own_calls(tree, stmt):
    """Calls in the statement's own expressions (nested suites excluded)"""
    node = tree.nodes[stmt]
    roots = [c for c in node.children if tree.nodes[c].kind != 'Suite']
    return [i for r in roots for i in tree.walk(r) if tree.nodes[i].kind == 'Call']


def _call_args(tree, call):
    node = tree.nodes[call]
    positional = [c for c in node.children[1:] if tree.nodes[c].kind != 'Keyword']
    keywords = {tree.nodes[c].payload: tree.nodes[c].children[0]
                for c in node.children[1:] if tree.nodes[c].kind == 'Keyword'}
    return positional, keywords


def _func_root(tree, call):
    """Leftmost name of a call's function path ('os.path.join' -> 'os')"""
    i = tree.nodes[call].children[0]
    while tree.nodes[i].kind == 'Attribute':
        i = tree.nodes[i].children[0]
    return tree.nodes[i].payload if tree.nodes[i].kind == 'Name' else ''


def _is_true(tree, index):
    return index is not None and tree.nodes[index].kind == 'Bool' and tree.nodes[index].payload == 'True'


def _is_false(tree, index):
    return index is not None and tree.nodes[index].kind == 'Bool' and tree.nodes[index].payload == 'False'


def _is_literal(tree, index):
    return tree.nodes[index].kind in ('Str', 'Num', 'Bool', 'NoneLit')


def _dynamic_query(tree, index):
    """True when a query argument is built by +, % or .format from a non-literal"""
    node = tree.nodes[index]
    if node.kind == 'BinOp' and node.payload in ('+', '%'):
        return any(not _is_literal(tree, i) and tree.nodes[i].kind not in ('BinOp',)
                   for i in tree.walk(index) if i != index)
    if node.kind == 'Call':
        func = tree.nodes[node.children[0]]
        if func.kind == 'Attribute' and func.payload == 'format':
            return any(not _is_literal(tree, c) for c in node.children[1:])
    return False


def _target_name(tree, assign):
    target = tree.nodes[tree.nodes[assign].children[0]]
    return target.payload if target.kind in ('Name', 'Attribute') else ''


class _RuleEngine:
    def __init__(self, tree, dfg):
        self.tree = tree
        self.taint = _Taint(tree, dfg)
        self.findings = {}

    def flag(self, rule, stmt, level=CLEAN, detail=''):
        cwe, message = RULES[rule]
        line = self.tree.nodes[stmt].span[0]
        key = (line, cwe, rule)
        confidence = 'high' if level == SOURCE else 'low'
        current = self.findings.get(key)
        if current is None or (confidence == 'high' and current.confidence != 'high'):
            text = f"{message}: {detail}" if detail else message
            self.findings[key] = Finding(cwe, rule, line, confidence, text)

    def run(self):
        for stmt in self.tree.statements():
            node = self.tree.nodes[stmt]
            if node.kind == 'Assign':
                self.check_assignment(stmt)
            for call in _own_calls(self.tree, stmt):
                self.check_call(stmt, call)
        return list(self.findings.values())

    def check_assignment(self, stmt):
        tree = self.tree
        name = _target_name(tree, stmt)
        value = tree.nodes[stmt].children[1]
        if not name:
            return
        if tree.nodes[value].kind == 'Str' and string_value(tree.nodes[value].payload):
            if _PASSWORD_NAME_RE.search(name):
                self.flag('R-259', stmt, detail=name)
            elif _CREDENTIAL_NAME_RE.search(name):
                self.flag('R-798', stmt, detail=name)
        if _SECURITY_NAME_RE.search(name):
            for i in tree.walk(value):
                if tree.nodes[i].kind != 'Call':
                    continue
                terminal = call_terminal(tree, i)
                root = _func_root(tree, i)
                if terminal in _RANDOM_FUNCS and root in ('random', terminal):
                    self.flag('R-330', stmt, detail=f"{name} from random.{terminal}")
                    break

    def check_call(self, stmt, call):
        tree = self.tree
        terminal = call_terminal(tree, call)
        root = _func_root(tree, call)
        positional, keywords = _call_args(tree, call)
        arg0 = positional[0] if positional else None
        level = max((self.taint.expression(stmt, a) for a in positional), default=CLEAN)

        if categorize(terminal) == 'exec' and (root in _EXEC_MODULES or root == terminal):
            shell = _is_true(tree, keywords.get('shell'))
            implicit_shell = terminal in _SHELL_ALWAYS
            if arg0 is not None and not _is_literal(tree, arg0):
                arg_level = self.taint.expression(stmt, arg0)
                through_shell = shell or implicit_shell
                if arg_level != CLEAN or (through_shell and self.taint.shape(stmt, arg0) == OPEN):
                    self.flag('R-078', stmt, arg_level, f"{terminal}()")
                    return
            if shell and not implicit_shell:
                self.flag('R-078', stmt, CLEAN, f"{terminal}(shell=True)")
            return

        if terminal in ('execute', 'executemany') and arg0 is not None and _dynamic_query(tree, arg0):
            self.flag('R-089', stmt, self.taint.expression(stmt, arg0), f"{terminal}()")
            return

        if terminal in _WEAK_HASHES and root in ('hashlib', terminal):
            if not _is_false(tree, keywords.get('usedforsecurity')):
                self.flag('R-327', stmt, level, f"hashlib.{terminal}")
            return
        if terminal == 'new' and root == 'hashlib' and arg0 is not None and tree.nodes[arg0].kind == 'Str':
            if string_value(tree.nodes[arg0].payload).lower() in _WEAK_HASHES:
                self.flag('R-327', stmt, level, 'hashlib.new')
            return
        if 'DES' in call_names(tree, call) or 'des' in call_names(tree, call):
            self.flag('R-327', stmt, level, 'DES')
            return

        if root in ('pickle', 'marshal', 'dill') and terminal in _DESERIALIZE_FUNCS:
            self.flag('R-502', stmt, level, f"{root}.{terminal}")
            return
        if root == 'yaml' and terminal in _YAML_UNSAFE:
            loader = keywords.get('Loader')
            safe = loader is not None and any(
                tree.nodes[i].payload in ('SafeLoader', 'CSafeLoader') for i in tree.walk(loader))
            if terminal != 'load' or not safe:
                self.flag('R-502', stmt, level, f"yaml.{terminal}")
            return

        if terminal == 'open' and root in ('open', 'os', 'io', 'codecs'):
            if arg0 is not None and not _is_literal(tree, arg0):
                arg_level = self.taint.expression(stmt, arg0)
                if self.taint.shape(stmt, arg0) == OPEN and (
                        arg_level != CLEAN or self.taint.concatenated(stmt, arg0)):
                    self.flag('R-022', stmt, arg_level, 'open()')


# ==================== Entry points ====================

def analyze_builtin(unit, ast=None, dfg=None):
    """
    Apply the builtin rule table to a unit.

    Args:
        unit: SourceUnit
        ast, dfg: graphs built from the unit (built here when omitted)

    Returns:
        SecurityReport with tool=builtin
    """
    start = time.monotonic()
    source_graph = ast if ast is not None else dfg
    tree = source_graph.tree if source_graph is not None and source_graph.tree is not None else parse_text(unit.text)
    if dfg is None:
        dfg = build_dfg(tree, unit_id=unit.id)
    findings = _RuleEngine(tree, dfg).run()
    return SecurityReport(unit.id, tuple(findings), BUILTIN, time.monotonic() - start)


def parse_external_report(text, unit):
    """Findings from a Bandit-style JSON report"""
    try:
        data = json.loads(text)
    except ValueError as e:
        raise ReportParseError(f"analyzer report is not JSON: {e}")
    if not isinstance(data, dict) or not isinstance(data.get('results'), list):
        raise ReportParseError("analyzer report has no results array")
    line_count = max(unit.line_count(), 1)
    findings = []
    for item in data['results']:
        try:
            cwe = int(item['issue_cwe']['id'])
            line = int(item['line_number'])
            rule = str(item['test_id'])
        except (KeyError, TypeError, ValueError) as e:
            raise ReportParseError(f"malformed analyzer result {item!r}: {e}")
        if not 1 <= line <= line_count:
            raise ReportParseError(f"analyzer result line {line} outside the unit", line=line)
        confidence = str(item.get('issue_confidence', 'low')).lower()
        if confidence not in CONFIDENCE_LEVELS:
            confidence = 'low'
        findings.append(Finding(cwe, rule, line, confidence, str(item.get('issue_text', '')),
                                external=cwe not in SUPPORTED_CWES))
    return findings


def analyze_external(unit, config):
    """
    Run the configured analyzer on a temp copy of the unit.

    Raises:
        ToolNotFound, ToolTimeout, ReportParseError
    """
    start = time.monotonic()
    with tempfile.TemporaryDirectory(prefix='promsec-analyze-') as tmp:
        input_file = os.path.join(tmp, 'unit.py')
        report_file = os.path.join(tmp, 'report.json')
        write_text(input_file, unit.text)
        argv = config.argv(input_file, report_file)
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=config.timeout, check=False)
        except FileNotFoundError:
            raise ToolNotFound(f"analyzer command not found: {argv[0]}", command=argv[0])
        except subprocess.TimeoutExpired:
            raise ToolTimeout(f"analyzer exceeded {config.timeout}s", timeout=config.timeout)
        report_text = read_text(report_file) if os.path.exists(report_file) else proc.stdout
    findings = parse_external_report(report_text, unit)
    return SecurityReport(unit.id, tuple(findings), EXTERNAL, time.monotonic() - start)


def cwe_count(report):
    return report.k


class Analyzer:
    """Dispatches on AnalyzerConfig.mode and memoizes builtin reports by unit digest"""

    CACHE_PREFIX = 'promsec_report'

    def __init__(self, config=None):
        self.config = config or AnalyzerConfig()

    @classmethod
    def from_settings(cls, **overrides):
        return cls(AnalyzerConfig.from_settings(**overrides))

    def analyze(self, unit, ast=None, dfg=None):
        if self.config.mode == EXTERNAL:
            return analyze_external(unit, self.config)
        cache_key = f"{self.CACHE_PREFIX}_{unit.digest}"
        if self.config.use_cache:
            cached = cache.get(cache_key)
            if cached:
                data = dict(cached, unit_id=unit.id)
                return SecurityReport.from_dict(data)
        report = analyze_builtin(unit, ast, dfg)
        if self.config.use_cache:
            cache.set(cache_key, report.to_dict(), self.config.cache_duration)
        logger.debug("Analyzed %s: k=%d", unit.id, report.k)
        return report

    def graphs(self, unit):
        """AST and DFG for a unit, as the builtin rules consume them"""
        tree = parse_text(unit.text)
        return build_ast(tree, unit_id=unit.id), build_dfg(tree, unit_id=unit.id)
