"""
Prompt optimization loop, baselines and ablations.

Every run produces a RunLedger: one IterationTrace per analyzed code version,
with the CWE count, the distance to the first analyzed version and the LLM and
analyzer costs spent in that iteration. Costs incurred before the first
analysis (generating code from an input prompt, analyzing the BL anchor) are
kept in the ledger's ``setup`` record.
"""
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace

from django.conf import settings

from . import ggan
from .code_graphs import graph_from_source, parse_graph_kind
from .code_parser import SourceUnit
from .code_reconstruction import reconstruct
from .evaluation import CostSummary, ged_approx, similarity
from .llm_client import (
    CostLog, LlmError, PromptRecord, generate_code, infer_prompt, render_bl_template, rewrite_prompt,
)
from .security_analyzer import SUPPORTED_CWES, Finding, SecurityReport
from .utils import IoError, PipelineError, canonical_json, new_run_id, read_text, write_text

logger = logging.getLogger(__name__)

PROMSEC = 'promsec'
BL1 = 'bl1'
BL2 = 'bl2'
A1 = 'a1-no-ggan'
A2 = 'a2-no-llm'
MODES = (PROMSEC, BL1, BL2, A1, A2)

SECURED = 'secured'
BUDGET_EXHAUSTED = 'budget-exhausted'
ERROR = 'error'

MAX_CONSECUTIVE_FAILURES = 3
BL_TEMPLATE_COUNT = 7
LEDGER_FILE = 'ledger.jsonl'
ARTIFACTS_DIR = 'artifacts'


class LoopError(PipelineError):
    pass


class EmptyTrainingSet(LoopError):
    pass


@dataclass(frozen=True)
class LoopConfig:
    epsilon: int = 0
    max_iterations: int = 20
    mode: str = PROMSEC
    alpha: float = 1.0
    beta: float = 1.0
    graph_kind: str = 'CFG'

    def __post_init__(self):
        if self.epsilon < 0:
            raise LoopError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.max_iterations < 1:
            raise LoopError(f"max iterations must be >= 1, got {self.max_iterations}")
        if self.mode not in MODES:
            raise LoopError(f"unknown mode {self.mode!r}, expected one of {', '.join(MODES)}")
        try:
            object.__setattr__(self, 'graph_kind', parse_graph_kind(self.graph_kind))
        except ValueError as e:
            raise LoopError(str(e))

    @classmethod
    def from_settings(cls, **overrides):
        values = {
            'epsilon': settings.PROMSEC_LOOP_EPSILON,
            'max_iterations': settings.PROMSEC_LOOP_MAX_ITERATIONS,
            'alpha': settings.PROMSEC_TRAIN_ALPHA,
            'beta': settings.PROMSEC_TRAIN_BETA,
            'graph_kind': settings.PROMSEC_LOOP_GRAPH_KIND,
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self):
        return asdict(self)


@dataclass
class IterationTrace:
    iteration: int
    prompt: PromptRecord = None
    unit_hash: str = ''
    k: int = None
    findings: tuple = ()
    similarity: float = None
    ged: float = None
    best_k: int = None
    template: int = None
    cycle: int = None
    llm_queries: int = 0
    analyses: int = 0
    input_tokens: int = 0
    output_tokens: int = 0
    llm_seconds: float = 0.0
    analysis_seconds: float = 0.0
    seconds: float = 0.0
    error: str = None
    unit: SourceUnit = field(default=None, repr=False, compare=False)

    @property
    def cwes(self):
        return sorted({f.cwe for f in self.findings})

    def charge(self, exchanges):
        """Add the LLM exchanges made during this iteration"""
        self.llm_queries += len(exchanges)
        self.input_tokens += sum(e.input_tokens for e in exchanges)
        self.output_tokens += sum(e.output_tokens for e in exchanges)
        self.llm_seconds += sum(e.latency for e in exchanges)

    def to_dict(self):
        data = {f: getattr(self, f) for f in (
            'iteration', 'unit_hash', 'k', 'similarity', 'ged', 'best_k', 'template', 'cycle',
            'llm_queries', 'analyses', 'input_tokens', 'output_tokens', 'llm_seconds',
            'analysis_seconds', 'seconds', 'error')}
        data['prompt'] = self.prompt.to_dict() if self.prompt else None
        data['findings'] = [f.to_dict() for f in self.findings]
        return data

    @classmethod
    def from_dict(cls, data):
        values = {k: v for k, v in data.items() if k not in ('prompt', 'findings', 'type')}
        values['prompt'] = PromptRecord.from_dict(data['prompt']) if data.get('prompt') else None
        values['findings'] = tuple(Finding.from_dict(f) for f in data.get('findings', ()))
        return cls(**values)


def best_iteration(traces):
    """
    Index of the best trace: minimal k, then higher similarity, then earlier
    iteration. Traces without a CWE count never win.
    """
    candidates = [(i, t) for i, t in enumerate(traces) if t.k is not None]
    if not candidates:
        return None
    neg_inf = float('-inf')
    index, _ = min(candidates, key=lambda it: (
        it[1].k, -(it[1].similarity if it[1].similarity is not None else neg_inf), it[1].iteration))
    return index


@dataclass
class RunLedger:
    run_id: str
    mode: str
    config: dict
    input_kind: str = 'code'
    traces: list = field(default_factory=list)
    status: str = None
    setup: CostSummary = field(default_factory=CostSummary)
    error: str = None

    @property
    def best_index(self):
        return best_iteration(self.traces)

    def best_trace(self):
        index = self.best_index
        return None if index is None else self.traces[index]

    def best_unit(self):
        best = self.best_trace()
        return best.unit if best is not None else None

    def best_k(self):
        best = self.best_trace()
        return best.k if best is not None else None

    @property
    def secured(self):
        return self.status == SECURED

    def record(self, trace):
        """Append a trace and update its running best CWE count"""
        previous = self.traces[-1].best_k if self.traces else None
        values = [v for v in (previous, trace.k) if v is not None]
        trace.best_k = min(values) if values else None
        self.traces.append(trace)
        return trace

    def finish(self, epsilon, failed=False):
        best = self.best_k()
        if best is not None and best <= epsilon:
            self.status = SECURED
        elif failed:
            self.status = ERROR
        else:
            self.status = BUDGET_EXHAUSTED
        logger.info("Run %s (%s) finished %s after %d iteration(s), best k=%s",
                    self.run_id, self.mode, self.status, len(self.traces), best)
        return self

    def header(self):
        return {
            'type': 'header',
            'run_id': self.run_id,
            'mode': self.mode,
            'config': self.config,
            'input_kind': self.input_kind,
            'status': self.status,
            'best_iteration': self.best_index,
            'setup': self.setup.to_dict(),
            'error': self.error,
        }

    def to_jsonl(self):
        lines = [canonical_json(self.header())]
        lines.extend(canonical_json(dict(t.to_dict(), type='trace')) for t in self.traces)
        return '\n'.join(lines) + '\n'

    def save(self, runs_dir):
        """
        Write runs_dir/<run id>/ledger.jsonl and artifacts/<iteration>.src.

        Returns:
            the run directory
        """
        run_dir = os.path.join(runs_dir, self.run_id)
        for trace in self.traces:
            if trace.unit is not None:
                write_text(os.path.join(run_dir, ARTIFACTS_DIR, f"{trace.iteration}.src"), trace.unit.text)
        write_text(os.path.join(run_dir, LEDGER_FILE), self.to_jsonl())
        return run_dir

    @classmethod
    def load(cls, run_dir):
        path = os.path.join(run_dir, LEDGER_FILE) if os.path.isdir(run_dir) else run_dir
        try:
            rows = [json.loads(line) for line in read_text(path).splitlines() if line.strip()]
        except ValueError as e:
            raise IoError(f"cannot read ledger {path}: {e}")
        if not rows or rows[0].get('type') != 'header':
            raise IoError(f"{path} does not start with a ledger header")
        head = rows[0]
        ledger = cls(head['run_id'], head['mode'], head['config'], head.get('input_kind', 'code'),
                     status=head.get('status'), setup=CostSummary(**head.get('setup', {})), error=head.get('error'))
        artifacts = os.path.join(os.path.dirname(path), ARTIFACTS_DIR)
        for row in rows[1:]:
            trace = IterationTrace.from_dict(row)
            source = os.path.join(artifacts, f"{trace.iteration}.src")
            if os.path.exists(source):
                trace.unit = SourceUnit.from_text(read_text(source), id=f"{ledger.run_id}-{trace.iteration}")
            ledger.traces.append(trace)
        return ledger


# ==================== Shared steps ====================

class _Run:
    """Mutable state of one run: ledger, cost log, reference graph, encoder"""

    def __init__(self, cfg, source, model, run_id=None):
        self.cfg = cfg
        self.model = model
        self.costs = CostLog()
        self.reference = None
        kind = 'prompt' if isinstance(source, PromptRecord) else 'code'
        self.ledger = RunLedger(run_id or new_run_id(cfg.mode), cfg.mode, cfg.to_dict(), kind)

    def graph(self, unit):
        return graph_from_source(unit.text, self.model.graph_kind, self.model.vocab, unit_id=unit.id)

    def unit_id(self, iteration):
        return f"{self.ledger.run_id}-{iteration}"

    def analyze(self, analyzer, unit, trace):
        started = time.monotonic()
        try:
            report = analyzer.analyze(unit)
        finally:
            trace.analyses += 1
            trace.analysis_seconds += time.monotonic() - started
        trace.unit = unit
        trace.unit_hash = unit.digest
        trace.k = report.k
        trace.findings = report.findings
        return report

    def measure(self, trace, g):
        """Similarity and edit distance of g against the first analyzed version"""
        if self.reference is None:
            self.reference = g
        trace.similarity = similarity(self.reference, g, self.model)
        trace.ged = ged_approx(self.reference, g).distance

    def initial_unit(self, source, client):
        """The code a run starts from; a prompt is turned into code first"""
        if isinstance(source, SourceUnit):
            return source
        mark = len(self.costs)
        started = time.monotonic()
        try:
            for attempt in range(1, MAX_CONSECUTIVE_FAILURES + 1):
                try:
                    return generate_code(client, source, self.costs, unit_id=self.unit_id(0))
                except LlmError as e:
                    logger.warning("Initial generation attempt %d for %s failed: %s", attempt, self.ledger.run_id, e)
            return None
        finally:
            exchanges = self.costs.since(mark)
            self.ledger.setup = self.ledger.setup + CostSummary(
                seconds=time.monotonic() - started, llm_queries=len(exchanges),
                input_tokens=sum(e.input_tokens for e in exchanges),
                output_tokens=sum(e.output_tokens for e in exchanges),
                llm_seconds=sum(e.latency for e in exchanges))


def _encoder(model, cfg):
    """Trained model when given, otherwise a seeded untrained encoder for the distance columns"""
    if model is not None:
        return model
    return ggan.GganModel(graph_kind=cfg.graph_kind, seed=settings.PROMSEC_TRAIN_SEED,
                          hidden_dim=settings.PROMSEC_TRAIN_HIDDEN_DIM)


def _error_text(e):
    return f"{type(e).__name__}: {e}"


def _iterate(run, source, analyzer, client, step):
    """
    The analyze-then-rewrite loop shared by promsec, a1 and a2.

    ``step(unit, g, report, iteration)`` returns the next unit to analyze.
    """
    cfg, ledger = run.cfg, run.ledger
    unit = run.initial_unit(source, client)
    if unit is None:
        ledger.error = 'initial code generation failed'
        return ledger.finish(cfg.epsilon, failed=True)
    prompt = source if isinstance(source, PromptRecord) else None
    failures = 0
    for iteration in range(1, cfg.max_iterations + 1):
        trace = IterationTrace(iteration, prompt=prompt)
        mark = len(run.costs)
        started = time.monotonic()
        done = False
        try:
            report = run.analyze(analyzer, unit, trace)
            g = run.graph(unit)
            run.measure(trace, g)
            if report.k <= cfg.epsilon or iteration == cfg.max_iterations:
                done = True
            else:
                unit, prompt = step(unit, g, report, iteration)
            failures = 0
        except PipelineError as e:
            failures += 1
            trace.error = _error_text(e)
            logger.warning("Iteration %d of %s failed (%d in a row): %s", iteration, ledger.run_id, failures, e)
            unit = ledger.best_unit() or unit
        finally:
            trace.charge(run.costs.since(mark))
            trace.seconds = time.monotonic() - started
            ledger.record(trace)
        if done:
            break
        if failures >= MAX_CONSECUTIVE_FAILURES:
            ledger.error = trace.error
            return ledger.finish(cfg.epsilon, failed=True)
    return ledger.finish(cfg.epsilon)


# ==================== Modes ====================

def run_promsec(source, model, client, analyzer, cfg, optimizer_client=None, run_id=None):
    """
    Optimize a prompt (or code) until its code has at most epsilon CWEs.

    Each non-terminal iteration analyzes the current code once, lets the gGAN
    fix its graph, reconstructs the fixed code, asks ``optimizer_client``
    (default ``client``) for the prompt behind it and asks ``client`` for new
    code from that prompt.
    """
    if cfg.mode != PROMSEC:
        cfg = replace(cfg, mode=PROMSEC)
    if model is None:
        raise LoopError("promsec mode needs a trained model")
    if model.graph_kind != cfg.graph_kind:
        raise LoopError(f"model works on {model.graph_kind} graphs, loop is configured for {cfg.graph_kind}")
    run = _Run(cfg, source, model, run_id)
    optimizer_client = optimizer_client or client

    def step(unit, g, report, iteration):
        _, g_hat = ggan.generate(model, g)
        fixed = reconstruct(unit, g, g_hat, model.bank).unit
        prompt = infer_prompt(optimizer_client, fixed, iteration, cost_log=run.costs)
        return generate_code(client, prompt, run.costs, unit_id=run.unit_id(iteration + 1)), prompt

    return _iterate(run, source, analyzer, client, step)


def run_ablation(source, mode, model, client, analyzer, cfg, run_id=None):
    """
    a1-no-ggan: analyze, infer a prompt from the current code, regenerate.
    a2-no-llm: analyze, gGAN fix, reconstruct; the reconstruction is the next code.
    """
    if mode not in (A1, A2):
        raise LoopError(f"ablation mode must be {A1} or {A2}, got {mode!r}")
    cfg = replace(cfg, mode=mode)
    if mode == A2 and model is None:
        raise LoopError("a2 ablation needs a trained model")
    run = _Run(cfg, source, _encoder(model, cfg), run_id)

    if mode == A1:
        def step(unit, g, report, iteration):
            prompt = infer_prompt(client, unit, iteration, cost_log=run.costs)
            return generate_code(client, prompt, run.costs, unit_id=run.unit_id(iteration + 1)), prompt
    else:
        def step(unit, g, report, iteration):
            _, g_hat = ggan.generate(model, g)
            fixed = reconstruct(unit, g, g_hat, model.bank).unit
            return SourceUnit.from_text(fixed.text, origin='reconstructed', id=run.unit_id(iteration + 1)), None

    return _iterate(run, source, analyzer, client, step)


def _bl_anchor(run, source, client, analyzer):
    """(base prompt, anchor unit, anchor report) for a BL run, charged to setup"""
    unit = run.initial_unit(source, client)
    if unit is None:
        return None
    base = source if isinstance(source, PromptRecord) else rewrite_prompt(unit)
    setup_trace = IterationTrace(0)
    report = run.analyze(analyzer, unit, setup_trace)
    run.reference = run.graph(unit)
    run.ledger.setup = run.ledger.setup + CostSummary(analyses=setup_trace.analyses,
                                                      analysis_seconds=setup_trace.analysis_seconds)
    return base, unit, report


def _bl_cycle(run, base, report, client, analyzer, cycle, failures):
    """Seven templated generations against one anchor; returns the consecutive failure count"""
    ledger = run.ledger
    for index in range(1, BL_TEMPLATE_COUNT + 1):
        iteration = len(ledger.traces) + 1
        trace = IterationTrace(iteration, template=index, cycle=cycle)
        mark = len(run.costs)
        started = time.monotonic()
        try:
            trace.prompt = render_bl_template(index, base, report, iteration=cycle)
            unit = generate_code(client, trace.prompt, run.costs, unit_id=run.unit_id(iteration))
            run.analyze(analyzer, unit, trace)
            run.measure(trace, run.graph(unit))
            failures = 0
        except PipelineError as e:
            failures += 1
            trace.error = _error_text(e)
            logger.warning("Template %d of %s failed: %s", index, ledger.run_id, e)
        finally:
            trace.charge(run.costs.since(mark))
            trace.seconds = time.monotonic() - started
            ledger.record(trace)
        if failures >= MAX_CONSECUTIVE_FAILURES:
            break
    return failures


def run_bl1(source, client, analyzer, cfg, model=None, run_id=None):
    """One cycle of the seven context templates against the original code"""
    cfg = replace(cfg, mode=BL1)
    run = _Run(cfg, source, _encoder(model, cfg), run_id)
    anchor = _bl_anchor(run, source, client, analyzer)
    if anchor is None:
        run.ledger.error = 'initial code generation failed'
        return run.ledger.finish(cfg.epsilon, failed=True)
    base, _, report = anchor
    failures = _bl_cycle(run, base, report, client, analyzer, 1, 0)
    if failures >= MAX_CONSECUTIVE_FAILURES:
        run.ledger.error = run.ledger.traces[-1].error
    return run.ledger.finish(cfg.epsilon, failed=failures >= MAX_CONSECUTIVE_FAILURES)


def run_bl2(source, client, analyzer, cfg, model=None, run_id=None):
    """
    Repeated BL1 cycles, each anchored on the best code found so far, until
    the best CWE count reaches epsilon or max_iterations cycles have run.
    """
    cfg = replace(cfg, mode=BL2)
    run = _Run(cfg, source, _encoder(model, cfg), run_id)
    ledger = run.ledger
    anchor = _bl_anchor(run, source, client, analyzer)
    if anchor is None:
        ledger.error = 'initial code generation failed'
        return ledger.finish(cfg.epsilon, failed=True)
    base, best_unit, report = anchor
    best_k = len(report.findings)
    failures = 0
    for cycle in range(1, cfg.max_iterations + 1):
        failures = _bl_cycle(run, base, report, client, analyzer, cycle, failures)
        best = ledger.best_trace()
        if best is not None and best.k < best_k:
            best_k, best_unit = best.k, best.unit
            report = SecurityReport(best_unit.id, best.findings)
            base = rewrite_prompt(best_unit, iteration=cycle)
        if failures >= MAX_CONSECUTIVE_FAILURES:
            ledger.error = ledger.traces[-1].error
            return ledger.finish(cfg.epsilon, failed=True)
        if best_k <= cfg.epsilon:
            break
    return ledger.finish(cfg.epsilon)


def run_mode(source, cfg, client=None, analyzer=None, model=None, optimizer_client=None, run_id=None):
    """Dispatch on cfg.mode"""
    if cfg.mode == PROMSEC:
        return run_promsec(source, model, client, analyzer, cfg, optimizer_client, run_id)
    if cfg.mode == BL1:
        return run_bl1(source, client, analyzer, cfg, model, run_id)
    if cfg.mode == BL2:
        return run_bl2(source, client, analyzer, cfg, model, run_id)
    return run_ablation(source, cfg.mode, model, client, analyzer, cfg, run_id)


# ==================== Training-set filtering ====================

def mask_cwe(units, cwes, analyzer):
    """
    Drop every unit whose report contains one of the masked CWE ids.

    Raises:
        LoopError: a CWE id outside the supported set
        EmptyTrainingSet: nothing is left
    """
    masked = {int(cwes)} if isinstance(cwes, (int, str)) else {int(c) for c in cwes}
    unsupported = sorted(masked - set(SUPPORTED_CWES))
    if unsupported:
        raise LoopError(f"cannot mask unsupported CWE ids {unsupported}")
    kept = [unit for unit in units if not masked & set(analyzer.analyze(unit).cwes())]
    if not kept:
        raise EmptyTrainingSet(f"masking CWE {sorted(masked)} leaves no training units")
    logger.info("Masking CWE %s kept %d of %d units", sorted(masked), len(kept), len(units))
    return kept
