"""
Differential fuzzing of two versions of a program.

Both versions receive the same seeded random inputs. Each version runs in its
own child interpreter (isolated mode, sockets disabled, stdout discarded, a
wall-clock alarm per trial, a scratch working directory) and reports one JSON
result per trial. Outputs are flattened depth-first and compared
element-wise: numbers by absolute difference, everything else by equality
mapped to {0, 1}.
"""
import ast
import json
import logging
import math
import subprocess
import sys
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np
from django.conf import settings

from .utils import PipelineError, read_text

logger = logging.getLogger(__name__)

MAX_FAILURE_SAMPLES = 10
PARAM_TYPES = ('int', 'float', 'str', 'bool')

_RUNNER = r'''
import json
import os
import signal
import socket
import sys


class _Timeout(Exception):
    pass


def _alarm(signum, frame):
    raise _Timeout()


def _no_network(*args, **kwargs):
    raise OSError("network access is disabled")


socket.socket = _no_network
socket.create_connection = _no_network
job = json.load(sys.stdin)
out = os.fdopen(os.dup(1), "w")
os.dup2(os.open(os.devnull, os.O_WRONLY), 1)
sys.stdout = open(os.devnull, "w")
namespace = {"__name__": "fuzz_subject"}
try:
    exec(compile(job["source"], "<subject>", "exec"), namespace)
    func = namespace[job["entrypoint"]]
except BaseException as e:
    out.write(json.dumps({"load_error": type(e).__name__}))
    out.flush()
    sys.exit(0)
signal.signal(signal.SIGALRM, _alarm)
results = []
for args in job["inputs"]:
    signal.setitimer(signal.ITIMER_REAL, job["timeout"])
    try:
        value = func(*args)
        signal.setitimer(signal.ITIMER_REAL, 0)
        results.append({"value": value})
    except _Timeout:
        results.append({"timeout": True})
    except BaseException as e:
        signal.setitimer(signal.ITIMER_REAL, 0)
        results.append({"error": type(e).__name__})
out.write(json.dumps({"results": results}, default=repr))
out.flush()
'''


class FuzzError(PipelineError):
    pass


class ExecutionError(FuzzError):
    pass


class TrialTimeout(FuzzError):
    pass


class MissingEntrypoint(FuzzError):
    pass


@dataclass(frozen=True)
class ParamDomain:
    name: str
    type: str = 'int'
    min: float = -100
    max: float = 100
    alphabet: str = 'abcdefghijklmnopqrstuvwxyz0123456789 '
    min_len: int = 0
    max_len: int = 12

    def __post_init__(self):
        if self.type not in PARAM_TYPES:
            raise FuzzError(f"parameter {self.name}: unknown type {self.type!r}")
        if self.type in ('int', 'float') and self.min > self.max:
            raise FuzzError(f"parameter {self.name}: empty range [{self.min}, {self.max}]")
        if self.type == 'str' and (not self.alphabet or self.min_len > self.max_len):
            raise FuzzError(f"parameter {self.name}: empty string domain")

    def sample(self, rng):
        if self.type == 'int':
            return int(rng.integers(int(self.min), int(self.max) + 1))
        if self.type == 'float':
            return float(rng.uniform(self.min, self.max))
        if self.type == 'bool':
            return bool(rng.integers(0, 2))
        length = int(rng.integers(self.min_len, self.max_len + 1))
        return ''.join(self.alphabet[int(i)] for i in rng.integers(0, len(self.alphabet), size=length))


@dataclass(frozen=True)
class FuzzSpec:
    entrypoint: str
    params: tuple = ()
    trials: int = 1000
    threshold: float = 0.01
    timeout: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise FuzzError(f"trials must be >= 1, got {self.trials}")
        if not self.threshold > 0:
            raise FuzzError(f"threshold must be > 0, got {self.threshold}")
        if not self.timeout > 0:
            raise FuzzError(f"trial timeout must be > 0, got {self.timeout}")

    @classmethod
    def from_dict(cls, data):
        if 'entrypoint' not in data:
            raise FuzzError("fuzz spec needs an entrypoint")
        params = tuple(p if isinstance(p, ParamDomain) else ParamDomain(**p) for p in data.get('params', ()))
        return cls(
            entrypoint=data['entrypoint'],
            params=params,
            trials=int(data.get('trials', settings.PROMSEC_FUZZ_TRIALS)),
            threshold=float(data.get('threshold', settings.PROMSEC_FUZZ_THRESHOLD)),
            timeout=float(data.get('timeout', settings.PROMSEC_FUZZ_TRIAL_TIMEOUT)),
            seed=int(data.get('seed', 0)),
        )

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(read_text(path)))
        except (ValueError, TypeError) as e:
            raise FuzzError(f"cannot read fuzz spec {path}: {e}")

    def to_dict(self):
        data = asdict(self)
        data['params'] = [asdict(p) for p in self.params]
        return data

    def inputs(self):
        rng = np.random.default_rng(self.seed)
        return [[p.sample(rng) for p in self.params] for _ in range(self.trials)]


@dataclass
class FuzzResult:
    mean_abs_diff: float
    passed: bool
    trials: int
    errors: int = 0
    timeouts: int = 0
    failures: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def entrypoint_arity(unit, name):
    """Parameter count of a top-level function, or None when it is absent"""
    try:
        module = ast.parse(unit.text)
    except SyntaxError as e:
        raise ExecutionError(f"{unit.id} does not parse: {e.msg}", line=e.lineno, col=e.offset)
    for node in module.body:
        if isinstance(node, ast.FunctionDef) and node.name == name:
            return len(node.args.args)
    return None


def run_trials(unit, spec, inputs):
    """Per-trial result dicts from one child interpreter"""
    job = json.dumps({'source': unit.text, 'entrypoint': spec.entrypoint,
                      'inputs': inputs, 'timeout': spec.timeout})
    try:
        with tempfile.TemporaryDirectory(prefix='promsec-fuzz-') as workdir:
            proc = subprocess.run(
                [sys.executable, '-I', '-c', _RUNNER], input=job, capture_output=True, text=True,
                timeout=spec.timeout * len(inputs) + 10, cwd=workdir,
            )
    except subprocess.TimeoutExpired:
        logger.warning("Fuzz child for %s exceeded its overall time budget", unit.id)
        return [{'timeout': True}] * len(inputs)
    try:
        payload = json.loads(proc.stdout)
    except ValueError:
        raise ExecutionError(f"fuzz child for {unit.id} produced no result (exit {proc.returncode})",
                             stderr=proc.stderr[-500:])
    if 'load_error' in payload:
        logger.warning("%s failed to load: %s", unit.id, payload['load_error'])
        return [{'error': payload['load_error']}] * len(inputs)
    return payload['results']


def flatten(value):
    """Depth-first scalar sequence of a structured output"""
    if isinstance(value, (list, tuple)):
        return [leaf for item in value for leaf in flatten(item)]
    if isinstance(value, dict):
        return [leaf for key in sorted(value, key=str) for leaf in flatten(key) + flatten(value[key])]
    return [value]


def _is_number(value):
    return isinstance(value, (int, float))


def element_diff(a, b):
    if _is_number(a) and _is_number(b):
        a, b = float(a), float(b)
        if math.isnan(a) and math.isnan(b):
            return 0.0
        diff = abs(a - b)
        return diff if math.isfinite(diff) else 1.0
    return 0.0 if a == b else 1.0


def trial_diff(a, b):
    """Mean element difference of two trial results; an unmatched failure counts 1"""
    if 'value' in a and 'value' in b:
        fa, fb = flatten(a['value']), flatten(b['value'])
        if len(fa) != len(fb):
            return 1.0
        if not fa:
            return 0.0
        return sum(element_diff(x, y) for x, y in zip(fa, fb)) / len(fa)
    if a.get('error') is not None and a.get('error') == b.get('error'):
        return 0.0
    if a.get('timeout') and b.get('timeout'):
        return 0.0
    return 1.0


def fuzz_compare(orig, new, spec):
    """
    Feed both units the same inputs and compare their outputs.

    Raises:
        MissingEntrypoint: either unit lacks the entrypoint or arities differ
    """
    arities = [entrypoint_arity(unit, spec.entrypoint) for unit in (orig, new)]
    if None in arities:
        missing = orig if arities[0] is None else new
        raise MissingEntrypoint(f"{missing.id} has no function {spec.entrypoint}")
    if arities[0] != arities[1] or arities[0] != len(spec.params):
        raise MissingEntrypoint(f"entrypoint arities {arities} do not match {len(spec.params)} parameters")
    inputs = spec.inputs()
    left = run_trials(orig, spec, inputs)
    right = run_trials(new, spec, inputs)
    diffs, failures = [], []
    errors = timeouts = 0
    for args, a, b in zip(inputs, left, right):
        diff = trial_diff(a, b)
        diffs.append(diff)
        errors += ('error' in a) + ('error' in b)
        timeouts += bool(a.get('timeout')) + bool(b.get('timeout'))
        if diff >= spec.threshold and len(failures) < MAX_FAILURE_SAMPLES:
            failures.append({'input': args, 'orig': a, 'new': b, 'diff': diff})
    mean_diff = float(np.mean(diffs)) if diffs else 0.0
    result = FuzzResult(mean_diff, mean_diff < spec.threshold, len(diffs), errors, timeouts, failures)
    logger.info("Fuzzed %s vs %s over %d trials: mean diff %.6f (%s)", orig.id, new.id, len(diffs),
                mean_diff, 'pass' if result.passed else 'fail')
    return result
