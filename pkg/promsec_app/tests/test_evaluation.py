"""
Tests for edit distances, studies, costs and reports
"""
import csv
import itertools
import json
import os
import tempfile

import networkx as nx
from django.test import SimpleTestCase
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from promsec_app.code_graphs import CFG, graph_from_source
from promsec_app.code_parser import SourceUnit
from promsec_app.evaluation import (
    MAX_EXACT_NODES, CostSummary, EvaluationError, SizeLimitExceeded, StudyResult, bench_row,
    best_template_histogram, cost_summary, cwe_histogram, edit_ops, emit_report, ged, ged_approx, ged_exact,
    inter_intra_study, k_histogram, load_mini_study, mode_summary, run_mini_study, similarity, study_chart,
)
from promsec_app.ggan import GganModel
from promsec_app.optimizer_loop import IterationTrace, RunLedger
from promsec_app.security_analyzer import Finding

BASE_SETTINGS = {
    'max_examples': 60,
    'deadline': None,
    'suppress_health_check': [HealthCheck.too_slow],
}


def path_graph(labels, kind='flow'):
    g = nx.DiGraph()
    for i, label in enumerate(labels):
        g.add_node(i, label=label)
    for i in range(len(labels) - 1):
        g.add_edge(i, i + 1, kinds=frozenset({kind}))
    return g


@st.composite
def small_graphs(draw, max_nodes=4):
    n = draw(st.integers(0, max_nodes))
    g = nx.DiGraph()
    for i in range(n):
        g.add_node(i, label=draw(st.sampled_from('AB')))
    for u, v in itertools.product(range(n), repeat=2):
        if draw(st.booleans()):
            g.add_edge(u, v, kinds=frozenset({draw(st.sampled_from(['flow', 'true']))}))
    return g


def brute_force_ged(g1, g2):
    targets = list(range(g2.number_of_nodes())) + [None]
    best = None
    for mapping in itertools.product(targets, repeat=g1.number_of_nodes()):
        images = [j for j in mapping if j is not None]
        if len(images) != len(set(images)):
            continue
        distance = edit_ops(g1, g2, mapping)[0]
        best = distance if best is None else min(best, distance)
    return best


def trace(iteration, cwes=(), **kwargs):
    findings = tuple(Finding(cwe, 'rule', line) for line, cwe in enumerate(cwes, 1))
    return IterationTrace(iteration, k=len(findings), findings=findings, **kwargs)


def ledger(run_id, mode, traces, status, setup=None):
    return RunLedger(run_id, mode, {}, traces=traces, status=status, setup=setup or CostSummary())


class EditDistanceTest(SimpleTestCase):
    """Test exact and approximate graph edit distance"""

    def test_known_distances(self):
        """Test hand-computed distances on small paths"""
        ab = path_graph('AB')
        self.assertEqual(ged_exact(ab, path_graph('AB')).distance, 0.0)
        self.assertEqual(ged_exact(ab, path_graph('AC')).distance, 1.0)
        self.assertEqual(ged_exact(ab, path_graph('AB', kind='true')).distance, 1.0)
        result = ged_exact(ab, path_graph('ABC'))
        self.assertEqual((result.distance, result.node_ops, result.edge_ops), (2.0, 1, 1))
        self.assertTrue(result.exact)
        self.assertEqual(ged_exact(nx.DiGraph(), ab).distance, 3.0)
        self.assertEqual(ged_approx(nx.DiGraph(), nx.DiGraph()).distance, 0.0)

    def test_edit_ops_of_empty_mapping(self):
        """Test that mapping nothing deletes and reinserts everything"""
        self.assertEqual(edit_ops(path_graph('AB'), path_graph('AB'), [None, None]), (6.0, 4, 2))

    @settings(**BASE_SETTINGS)
    @given(small_graphs(), small_graphs())
    def test_exact_matches_brute_force(self, g1, g2):
        """Test the search against every node mapping"""
        self.assertEqual(ged_exact(g1, g2).distance, brute_force_ged(g1, g2))

    @settings(**BASE_SETTINGS)
    @given(small_graphs(), small_graphs())
    def test_approx_is_upper_bound(self, g1, g2):
        """Test that the assignment-based distance never undercuts the optimum"""
        self.assertGreaterEqual(ged_approx(g1, g2).distance, ged_exact(g1, g2).distance)

    def test_size_limit(self):
        """Test that large graphs fall back to the approximation"""
        big = path_graph('ABCDEFGHIJKLM')
        self.assertGreater(big.number_of_nodes(), MAX_EXACT_NODES)
        with self.assertRaises(SizeLimitExceeded):
            ged_exact(big, big)
        result = ged(big, path_graph('ABCDEFGHIJKLM'))
        self.assertFalse(result.exact)
        self.assertEqual(result.distance, 0.0)

    def test_code_graphs(self):
        """Test distances and similarity on graphs built from source"""
        g = graph_from_source('x = 1\n', CFG)
        self.assertEqual(ged(g, graph_from_source('x = 1\n', CFG)).distance, 0.0)
        self.assertGreater(ged(g, graph_from_source('x = 1\ny = 2\n', CFG)).distance, 0.0)
        self.assertAlmostEqual(similarity(g, g, GganModel(hidden_dim=16, seed=3)), 1.0, places=6)


class StudyTest(SimpleTestCase):
    """Test the inter/intra-version study"""

    def test_needs_two_versions(self):
        """Test that a single version cannot form an intra-version distance"""
        original = SourceUnit.from_text('x = 1\n', id='x')
        with self.assertRaises(EvaluationError):
            inter_intra_study(original, [original])

    def test_identical_versions(self):
        """Test that unchanged versions have zero distances"""
        original = SourceUnit.from_text('x = 1\n', id='tiny')
        result = inter_intra_study(original, [original, original])
        self.assertEqual((result.inter, result.intra), (0.0, 0.0))
        self.assertEqual(result.codebase, 'tiny')
        self.assertTrue(result.exact)
        self.assertEqual(result.normalized(), (0.0, 0.0))

    def test_normalized(self):
        """Test scaling by the larger distance"""
        result = StudyResult('c', 2.0, 4.0, True, 3)
        self.assertEqual(result.normalized(), (0.5, 1.0))
        self.assertEqual(result.to_dict()['inter_normalized'], 0.5)

    def test_bundled_study(self):
        """Test that the bundled study has three secure versions per codebase"""
        codebases = load_mini_study()
        self.assertEqual(len(codebases), 10)
        for name, original, versions in codebases:
            self.assertEqual(original.id, f"{name}-original")
            self.assertEqual(len(versions), 3)

    def test_run_study_file(self):
        """Test running a study document and charting it"""
        document = {'codebases': [{'name': 'tiny', 'original': 'x = 1\n',
                                   'versions': ['x = 1\n', 'x = 1\ny = 2\n']}]}
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'study.json')
            with open(path, 'w') as fh:
                json.dump(document, fh)
            results = run_mini_study(path=path)
            chart = study_chart(results, os.path.join(tmp, 'study.svg'))
            with open(chart) as fh:
                self.assertIn('<svg', fh.read())
        self.assertEqual([r.codebase for r in results], ['tiny'])
        self.assertGreater(results[0].inter, 0.0)
        self.assertEqual(results[0].versions, 2)


class CostAndHistogramTest(SimpleTestCase):
    """Test cost sums and histograms"""

    def test_cost_summary(self):
        """Test column-wise sums over setup and traces"""
        self.assertEqual(CostSummary(1.0, 2, 3, 4, 0.5, 1, 0.25) + CostSummary(1.0, 1, 1, 1, 0.5, 1, 0.25),
                         CostSummary(2.0, 3, 4, 5, 1.0, 2, 0.5))
        run = ledger('r', 'promsec', [IterationTrace(1, llm_queries=2, input_tokens=10, analyses=1),
                                      IterationTrace(2, analyses=1)], 'secured',
                     setup=CostSummary(llm_queries=1, output_tokens=7))
        total = cost_summary(run)
        self.assertEqual((total.llm_queries, total.input_tokens, total.output_tokens, total.analyses), (3, 10, 7, 2))

    def test_histograms(self):
        """Test CWE, k and best-template counts"""
        traces = [trace(1, (89, 78)), trace(2, (89,)), trace(3)]
        self.assertEqual(cwe_histogram(traces), {78: 1, 89: 2})
        self.assertEqual(k_histogram(traces), {0: 1, 1: 1, 2: 1})
        ledgers = [
            ledger('a', 'bl1', [trace(1, (89,), template=1), trace(2, template=2)], 'budget-exhausted'),
            ledger('b', 'bl1', [trace(1, template=1), trace(2, template=2)], 'secured'),
            ledger('c', 'bl1', [trace(1, (89,), template=3)], 'budget-exhausted'),
        ]
        self.assertEqual(best_template_histogram(ledgers), {1: 1, 2: 1, 3: 1})


class ReportTest(SimpleTestCase):
    """Test CSV reports, charts and benchmark summaries"""

    def setUp(self):
        """Set up a secured promsec run and an unfinished baseline run"""
        self.secured = ledger('run-a', 'promsec', [trace(1, (259, 330), similarity=1.0, llm_queries=2, analyses=1),
                                                   trace(2, similarity=0.8, analyses=1)], 'secured')
        self.baseline = ledger('run-b', 'bl1', [trace(1, (89,), template=1, similarity=1.0, llm_queries=1,
                                                      analyses=1)], 'budget-exhausted')

    def test_emit_report(self):
        """Test the trace CSVs, the corpus CSV and the charts"""
        with tempfile.TemporaryDirectory() as tmp:
            written = emit_report([self.secured, self.baseline], tmp)
            for path in written:
                self.assertTrue(os.path.exists(path), path)
            with open(os.path.join(tmp, 'corpus.csv'), newline='') as fh:
                rows = list(csv.DictReader(fh))
            with open(os.path.join(tmp, 'run-a', 'report.csv'), newline='') as fh:
                traces = list(csv.DictReader(fh))
            self.assertTrue(os.path.exists(os.path.join(tmp, 'charts', 'best_template.svg')))
        self.assertEqual([r['run_id'] for r in rows], ['run-a', 'run-b'])
        self.assertEqual((rows[0]['initial_k'], rows[0]['final_k'], rows[0]['cwes_before']), ('2', '0', '259 330'))
        self.assertEqual([t['k'] for t in traces], ['2', '0'])
        self.assertEqual(traces[0]['cwes'], '259 330')

    def test_emit_report_needs_ledgers(self):
        """Test that an empty report is refused"""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(EvaluationError):
                emit_report([], tmp)

    def test_bench_summary(self):
        """Test per-mode aggregation of bench rows"""
        unfinished = ledger('run-c', 'promsec', [trace(1, (89,), similarity=1.0, analyses=1)], 'budget-exhausted')
        rows = [bench_row('p1', self.secured), bench_row('p2', unfinished), bench_row('p1', self.baseline)]
        self.assertEqual(rows[0]['llm_queries'], 2)
        self.assertEqual(rows[0]['program'], 'p1')
        summary = mode_summary(rows)
        self.assertEqual([s['mode'] for s in summary], ['promsec', 'bl1'])
        promsec = summary[0]
        self.assertEqual(promsec['programs'], 2)
        self.assertEqual(promsec['secured_fraction'], 0.5)
        self.assertEqual(promsec['mean_iterations'], 1.5)
        self.assertAlmostEqual(promsec['mean_similarity'], 0.9)
        self.assertEqual(promsec['analyses'], 3)
