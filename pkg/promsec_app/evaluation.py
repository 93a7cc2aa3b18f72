"""
Metrics and studies over graphs and run ledgers.

Graph edit distance works on any GraphDoc or networkx DiGraph whose nodes
carry a ``label`` attribute and whose edges carry ``kinds``. The exact solver
is a best-first search over partial node assignments; the approximate one
solves a bipartite assignment on label and degree signatures and prices the
induced edit path, so it is always an upper bound.
"""
import csv
import heapq
import itertools
import json
import logging
import os
from collections import Counter
from dataclasses import asdict, dataclass, fields

import matplotlib
import numpy as np
from scipy.optimize import linear_sum_assignment

from . import ggan
from .code_graphs import CFG, GraphDoc, default_vocab, graph_from_source, parse_graph_kind
from .code_parser import SourceUnit
from .utils import IoError, PipelineError, data_path, ensure_dir, read_text

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

MAX_EXACT_NODES = 12
_BLOCKED = 1e9

TRACE_COLUMNS = (
    'iteration', 'k', 'cwes', 'similarity', 'ged', 'template', 'llm_queries', 'analyses',
    'input_tokens', 'output_tokens', 'llm_seconds', 'analysis_seconds', 'seconds', 'unit_hash', 'error',
)
CORPUS_COLUMNS = (
    'run_id', 'mode', 'status', 'iterations', 'initial_k', 'final_k', 'best_iteration',
    'cwes_before', 'cwes_after', 'similarity',
)


class EvaluationError(PipelineError):
    pass


class SizeLimitExceeded(EvaluationError):
    pass


# ==================== Graph edit distance ====================

@dataclass(frozen=True)
class GedCosts:
    node_insert: float = 1.0
    node_delete: float = 1.0
    node_relabel: float = 1.0
    edge_insert: float = 1.0
    edge_delete: float = 1.0
    edge_relabel: float = 1.0


UNIT_COSTS = GedCosts()


@dataclass(frozen=True)
class GedResult:
    distance: float
    exact: bool
    node_ops: int
    edge_ops: int

    def to_dict(self):
        return asdict(self)


class _LabeledGraph:
    """Index-addressed labels and edge kinds of a graph"""

    def __init__(self, graph):
        if isinstance(graph, GraphDoc):
            graph = graph.to_networkx()
        nodes = list(graph.nodes)
        index = {n: i for i, n in enumerate(nodes)}
        self.n = len(nodes)
        self.labels = [graph.nodes[n].get('label') for n in nodes]
        self.edges = {(index[u], index[v]): data.get('kinds') for u, v, data in graph.edges(data=True)}
        self.out_degree = [0] * self.n
        self.in_degree = [0] * self.n
        for u, v in self.edges:
            self.out_degree[u] += 1
            self.in_degree[v] += 1


def _as_labeled(graph):
    return graph if isinstance(graph, _LabeledGraph) else _LabeledGraph(graph)


def edit_ops(g1, g2, mapping, costs=UNIT_COSTS):
    """
    Cost of the edit path induced by a node mapping.

    Args:
        mapping: one entry per node of g1, the index of its image in g2 or None
            for a deletion; g2 nodes left without a preimage are insertions

    Returns:
        (distance, node ops, edge ops)
    """
    a, b = _as_labeled(g1), _as_labeled(g2)
    distance, node_ops, edge_ops = 0.0, 0, 0
    used = set()
    for i, j in enumerate(mapping):
        if j is None:
            distance += costs.node_delete
            node_ops += 1
            continue
        used.add(j)
        if a.labels[i] != b.labels[j]:
            distance += costs.node_relabel
            node_ops += 1
    for j in range(b.n):
        if j not in used:
            distance += costs.node_insert
            node_ops += 1
    matched = set()
    for (u, v), kinds in a.edges.items():
        image = (mapping[u], mapping[v])
        if None in image or image not in b.edges:
            distance += costs.edge_delete
            edge_ops += 1
            continue
        matched.add(image)
        if b.edges[image] != kinds:
            distance += costs.edge_relabel
            edge_ops += 1
    for e in b.edges:
        if e not in matched:
            distance += costs.edge_insert
            edge_ops += 1
    return distance, node_ops, edge_ops


def _step_cost(a, b, prefix, j, costs):
    """Cost added by mapping node len(prefix) of a onto j (None deletes it)"""
    i = len(prefix)
    mapping = prefix + (j,)
    if j is None:
        cost = costs.node_delete
    else:
        cost = costs.node_relabel if a.labels[i] != b.labels[j] else 0.0
    for k in range(i + 1):
        pairs = ((i, k), (k, i)) if k != i else ((i, i),)
        for u, v in pairs:
            mu, mv = mapping[u], mapping[v]
            in_a = (u, v) in a.edges
            if mu is None or mv is None:
                if in_a:
                    cost += costs.edge_delete
                continue
            in_b = (mu, mv) in b.edges
            if in_a and in_b:
                if a.edges[(u, v)] != b.edges[(mu, mv)]:
                    cost += costs.edge_relabel
            elif in_a:
                cost += costs.edge_delete
            elif in_b:
                cost += costs.edge_insert
    return cost


def _completion_cost(b, prefix, costs):
    used = {j for j in prefix if j is not None}
    cost = costs.node_insert * (b.n - len(used))
    for u, v in b.edges:
        if u not in used or v not in used:
            cost += costs.edge_insert
    return cost


def _lower_bound(a, b, prefix, costs):
    """Admissible node-label multiset bound on the remaining cost"""
    used = {j for j in prefix if j is not None}
    left = Counter(a.labels[len(prefix):])
    right = Counter(lbl for j, lbl in enumerate(b.labels) if j not in used)
    na, nb = sum(left.values()), sum(right.values())
    m = min(na, nb)
    common = min(sum((left & right).values()), m)
    substitute = min(costs.node_relabel, costs.node_delete + costs.node_insert)
    return (m - common) * substitute + (na - m) * costs.node_delete + (nb - m) * costs.node_insert


def ged_exact(g1, g2, costs=UNIT_COSTS):
    """
    Optimal edit distance by A* over node assignments of g1 in node order.

    Raises:
        SizeLimitExceeded: either graph has more than MAX_EXACT_NODES nodes
    """
    a, b = _as_labeled(g1), _as_labeled(g2)
    if max(a.n, b.n) > MAX_EXACT_NODES:
        raise SizeLimitExceeded(f"exact edit distance is limited to {MAX_EXACT_NODES} nodes, got {max(a.n, b.n)}",
                                nodes=max(a.n, b.n))
    tie = itertools.count()
    heap = [(_lower_bound(a, b, (), costs), 0, next(tie), 0.0, (), False)]
    while heap:
        _, _, _, cost, prefix, complete = heapq.heappop(heap)
        if complete:
            distance, node_ops, edge_ops = edit_ops(a, b, prefix, costs)
            return GedResult(distance, True, node_ops, edge_ops)
        if len(prefix) == a.n:
            total = cost + _completion_cost(b, prefix, costs)
            heapq.heappush(heap, (total, -len(prefix) - 1, next(tie), total, prefix, True))
            continue
        used = set(prefix)
        for j in [j for j in range(b.n) if j not in used] + [None]:
            step = cost + _step_cost(a, b, prefix, j, costs)
            child = prefix + (j,)
            heapq.heappush(heap, (step + _lower_bound(a, b, child, costs), -len(child), next(tie), step, child, False))
    raise EvaluationError("edit distance search exhausted without a complete mapping")


def _assignment(a, b, costs):
    """Node mapping of a into b from a bipartite assignment on label and degree signatures"""
    size = a.n + b.n
    if size == 0:
        return ()
    edge_unit = min(costs.edge_insert, costs.edge_delete, costs.edge_relabel)
    matrix = np.zeros((size, size))
    matrix[:a.n, b.n:] = _BLOCKED
    matrix[a.n:, :b.n] = _BLOCKED
    for i in range(a.n):
        for j in range(b.n):
            degree_gap = abs(a.out_degree[i] - b.out_degree[j]) + abs(a.in_degree[i] - b.in_degree[j])
            relabel = costs.node_relabel if a.labels[i] != b.labels[j] else 0.0
            matrix[i, j] = relabel + 0.5 * degree_gap * edge_unit
        matrix[i, b.n + i] = costs.node_delete + 0.5 * (a.out_degree[i] + a.in_degree[i]) * costs.edge_delete
    for j in range(b.n):
        matrix[a.n + j, j] = costs.node_insert + 0.5 * (b.out_degree[j] + b.in_degree[j]) * costs.edge_insert
    rows, cols = linear_sum_assignment(matrix)
    mapping = [None] * a.n
    for r, c in zip(rows, cols):
        if r < a.n and c < b.n:
            mapping[r] = int(c)
    return tuple(mapping)


def ged_approx(g1, g2, costs=UNIT_COSTS):
    """Upper bound on the edit distance; the cheaper of both assignment directions"""
    a, b = _as_labeled(g1), _as_labeled(g2)
    forward = edit_ops(a, b, _assignment(a, b, costs), costs)
    backward = edit_ops(b, a, _assignment(b, a, costs), costs)
    distance, node_ops, edge_ops = min(forward, backward)
    return GedResult(distance, False, node_ops, edge_ops)


def ged(g1, g2, costs=UNIT_COSTS, exact=None):
    """Exact distance when both graphs fit the size limit (or exact=True), approximate otherwise"""
    a, b = _as_labeled(g1), _as_labeled(g2)
    if exact is None:
        exact = max(a.n, b.n) <= MAX_EXACT_NODES
    return ged_exact(a, b, costs) if exact else ged_approx(a, b, costs)


def similarity(g1, g2, model):
    """Cosine of the mean-pooled encoder embeddings of two graphs, in [-1, 1]"""
    value = ggan.similarity(model, g1, g2).item()
    return float(np.clip(value, -1.0, 1.0))


# ==================== Inter/intra-version study ====================

@dataclass(frozen=True)
class StudyResult:
    codebase: str
    inter: float
    intra: float
    exact: bool
    versions: int

    def normalized(self):
        """(inter, intra) scaled by the larger of the two"""
        top = max(self.inter, self.intra)
        if top == 0:
            return 0.0, 0.0
        return self.inter / top, self.intra / top

    def to_dict(self):
        data = asdict(self)
        data['inter_normalized'], data['intra_normalized'] = self.normalized()
        return data


def inter_intra_study(original, versions, kind=CFG, vocab=None, costs=UNIT_COSTS, codebase=None):
    """
    Mean edit distance from the original to each secure version (inter) and
    among the versions themselves (intra).

    Exact distances are used only when every graph fits the size limit, so a
    study never mixes exact and approximate values.
    """
    if len(versions) < 2:
        raise EvaluationError(f"an inter/intra study needs at least 2 versions, got {len(versions)}")
    kind = parse_graph_kind(kind)
    vocab = vocab or default_vocab()
    graphs = [_LabeledGraph(graph_from_source(u.text, kind, vocab, unit_id=u.id)) for u in [original, *versions]]
    exact = all(g.n <= MAX_EXACT_NODES for g in graphs)
    base, rest = graphs[0], graphs[1:]
    inter = [ged(base, v, costs, exact).distance for v in rest]
    intra = [ged(x, y, costs, exact).distance for x, y in itertools.combinations(rest, 2)]
    result = StudyResult(codebase or original.id, float(np.mean(inter)), float(np.mean(intra)), exact, len(versions))
    logger.debug("Study %s: inter %.3f intra %.3f (%s)", result.codebase, result.inter, result.intra,
                 'exact' if exact else 'approximate')
    return result


def load_mini_study(path=None):
    """[(name, original unit, [version units])] from the bundled mini-study document"""
    path = path or data_path('mini_study.json')
    try:
        document = json.loads(read_text(path))
    except ValueError as e:
        raise EvaluationError(f"cannot read study file {path}: {e}")
    codebases = []
    for entry in document['codebases']:
        name = entry['name']
        original = SourceUnit.from_text(entry['original'], id=f"{name}-original")
        versions = [SourceUnit.from_text(text, id=f"{name}-v{i}") for i, text in enumerate(entry['versions'], 1)]
        codebases.append((name, original, versions))
    return codebases


def run_mini_study(kind=CFG, path=None, vocab=None):
    return [inter_intra_study(original, versions, kind, vocab, codebase=name)
            for name, original, versions in load_mini_study(path)]


# ==================== Costs ====================

@dataclass(frozen=True)
class CostSummary:
    seconds: float = 0.0
    llm_queries: int = 0
    input_tokens: int = 0
    output_tokens: int = 0
    llm_seconds: float = 0.0
    analyses: int = 0
    analysis_seconds: float = 0.0

    def __add__(self, other):
        return CostSummary(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def of(cls, record):
        """Summary of any object carrying the cost fields (a trace, a setup record)"""
        return cls(**{f.name: getattr(record, f.name, 0) or 0 for f in fields(cls)})


def cost_summary(ledger):
    """Column-wise sums over a ledger's setup cost and traces"""
    total = CostSummary.of(ledger.setup) if getattr(ledger, 'setup', None) is not None else CostSummary()
    for trace in ledger.traces:
        total = total + CostSummary.of(trace)
    return total


# ==================== Histograms and charts ====================

def cwe_histogram(reports):
    """Finding counts per CWE id over anything carrying ``findings``"""
    counts = Counter(f.cwe for report in reports for f in report.findings)
    return dict(sorted(counts.items()))


def k_histogram(reports):
    """Number of reports per CWE count k"""
    counts = Counter(len(report.findings) for report in reports)
    return dict(sorted(counts.items()))


def best_template_histogram(ledgers):
    """How often each BL template index produced the best trace of a run"""
    counts = Counter()
    for ledger in ledgers:
        best = ledger.best_trace()
        if best is not None and best.template is not None:
            counts[best.template] += 1
    return dict(sorted(counts.items()))


def bar_chart(series, path, title, xlabel, ylabel='count'):
    """
    Static SVG bar chart.

    Args:
        series: {series name: {category: value}}; several series are drawn as
            grouped bars over the union of their categories
    """
    categories = sorted({c for values in series.values() for c in values}, key=lambda c: (str(type(c)), c))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(categories) + 2), 3.5))
    width = 0.8 / max(len(series), 1)
    positions = np.arange(len(categories))
    for offset, (name, values) in enumerate(series.items()):
        ax.bar(positions + offset * width, [values.get(c) or 0 for c in categories], width, label=name)
    ax.set_xticks(positions + width * (len(series) - 1) / 2)
    ax.set_xticklabels([str(c) for c in categories])
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    try:
        ensure_dir(os.path.dirname(os.path.abspath(path)))
        fig.savefig(path, format='svg')
    except OSError as e:
        raise IoError(f"cannot write chart {path}: {e}")
    finally:
        plt.close(fig)
    return path


# ==================== Reports ====================

def write_csv(path, columns, rows):
    try:
        ensure_dir(os.path.dirname(os.path.abspath(path)))
        with open(path, 'w', newline='', encoding='utf-8') as handle:
            writer = csv.DictWriter(handle, fieldnames=columns, extrasaction='ignore')
            writer.writeheader()
            writer.writerows(rows)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}")
    return path


def _trace_row(trace):
    row = {column: getattr(trace, column, None) for column in TRACE_COLUMNS}
    row['cwes'] = ' '.join(str(c) for c in sorted({f.cwe for f in trace.findings}))
    return row


def _corpus_row(ledger):
    first, best = ledger.traces[0] if ledger.traces else None, ledger.best_trace()
    return {
        'run_id': ledger.run_id,
        'mode': ledger.mode,
        'status': ledger.status,
        'iterations': len(ledger.traces),
        'initial_k': first.k if first else None,
        'final_k': best.k if best else None,
        'best_iteration': best.iteration if best else None,
        'cwes_before': ' '.join(str(c) for c in cwe_histogram([first])) if first else '',
        'cwes_after': ' '.join(str(c) for c in cwe_histogram([best])) if best else '',
        'similarity': best.similarity if best else None,
    }


def emit_report(ledgers, out_dir, runs_dir=None):
    """
    Write per-run trace CSVs, a corpus CSV and SVG charts.

    Trace CSVs go to <runs_dir>/<run id>/report.csv (runs_dir defaults to
    out_dir); the corpus CSV and charts go to out_dir.

    Returns:
        list of written paths
    """
    ledgers = list(ledgers)
    if not ledgers:
        raise EvaluationError("a report needs at least one ledger")
    written = []
    for ledger in ledgers:
        written.append(write_csv(os.path.join(runs_dir or out_dir, ledger.run_id, 'report.csv'), TRACE_COLUMNS,
                                  [_trace_row(t) for t in ledger.traces]))
    written.append(write_csv(os.path.join(out_dir, 'corpus.csv'), CORPUS_COLUMNS,
                              [_corpus_row(ledger) for ledger in ledgers]))
    scored = [ledger for ledger in ledgers if ledger.best_trace() is not None]
    before = cwe_histogram([ledger.traces[0] for ledger in scored])
    after = cwe_histogram([ledger.best_trace() for ledger in scored])
    charts = os.path.join(out_dir, 'charts')
    written.append(bar_chart({'before': before, 'after': after}, os.path.join(charts, 'cwe_histogram.svg'),
                             'CWE findings before and after', 'CWE'))
    written.append(bar_chart(
        {'initial k': {ledger.run_id: ledger.traces[0].k for ledger in scored},
         'final k': {ledger.run_id: ledger.best_trace().k for ledger in scored}},
        os.path.join(charts, 'k_per_codebase.svg'), 'CWE count per codebase', 'run', 'k',
    ))
    templates = best_template_histogram([ledger for ledger in ledgers if ledger.mode == 'bl1'])
    if templates:
        written.append(bar_chart({'best template': templates}, os.path.join(charts, 'best_template.svg'),
                                 'Best BL1 template', 'template'))
    logger.info("Report for %d run(s) written to %s", len(ledgers), out_dir)
    return written


def study_chart(results, path):
    """Grouped normalized inter/intra bars per codebase"""
    inter = {r.codebase: r.normalized()[0] for r in results}
    intra = {r.codebase: r.normalized()[1] for r in results}
    return bar_chart({'inter-version': inter, 'intra-version': intra}, path,
                     'Normalized graph edit distance', 'codebase', 'normalized distance')


# ==================== Benchmarks ====================

BENCH_COLUMNS = (
    'program', 'mode', 'run_id', 'status', 'iterations', 'initial_k', 'final_k', 'similarity',
    'llm_queries', 'analyses', 'input_tokens', 'output_tokens', 'seconds',
)
SUMMARY_COLUMNS = (
    'mode', 'programs', 'secured_fraction', 'mean_iterations', 'mean_similarity',
    'llm_queries', 'analyses', 'input_tokens', 'output_tokens', 'seconds',
)


def bench_row(program, ledger):
    """One comparison row: a program optimized in one mode"""
    row = _corpus_row(ledger)
    costs = cost_summary(ledger)
    row.update(program=program, llm_queries=costs.llm_queries, analyses=costs.analyses,
               input_tokens=costs.input_tokens, output_tokens=costs.output_tokens, seconds=costs.seconds)
    return row


def mode_summary(rows):
    """Per-mode aggregates of bench rows, in first-seen mode order"""
    groups = {}
    for row in rows:
        groups.setdefault(row['mode'], []).append(row)
    summary = []
    for mode, items in groups.items():
        similarities = [r['similarity'] for r in items if r['similarity'] is not None]
        summary.append({
            'mode': mode,
            'programs': len(items),
            'secured_fraction': sum(r['status'] == 'secured' for r in items) / len(items),
            'mean_iterations': float(np.mean([r['iterations'] for r in items])),
            'mean_similarity': float(np.mean(similarities)) if similarities else None,
            'llm_queries': sum(r['llm_queries'] for r in items),
            'analyses': sum(r['analyses'] for r in items),
            'input_tokens': sum(r['input_tokens'] for r in items),
            'output_tokens': sum(r['output_tokens'] for r in items),
            'seconds': sum(r['seconds'] for r in items),
        })
    return summary
