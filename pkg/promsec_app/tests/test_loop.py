"""
Tests for the optimization loop, its baselines and ablations
"""
import os
import tempfile

from django.core.cache import cache
from django.test import SimpleTestCase

from promsec_app.corpus import CorpusSpec, generate_corpus
from promsec_app.evaluation import cost_summary
from promsec_app.ggan import GganModel
from promsec_app.llm_client import INFERRED, BaseLlmClient, HttpError, LlmConfig, PromptRecord, ScriptedLlmClient
from promsec_app.optimizer_loop import (
    A1, A2, BL1, BL2, BUDGET_EXHAUSTED, ERROR, PROMSEC, SECURED, EmptyTrainingSet, IterationTrace, LoopConfig,
    LoopError, RunLedger, best_iteration, mask_cwe, run_ablation, run_bl1, run_bl2, run_mode, run_promsec,
)
from promsec_app.security_analyzer import Analyzer, AnalyzerConfig

from .fixtures import HARDCODED_SECRETS, VULNERABLE_LOOKUP, desk_scale_training, unit

RECONSTRUCTED_SECRETS = (
    'import hashlib\n'
    'import random\n'
    'password = os.getenv("PASSWORD")\n'
    'api_key = os.getenv("API_KEY")\n'
    'token = secrets.token_hex(16)\n'
    'digest = hashlib.sha256(password.encode()).hexdigest()\n'
)

# the scripted regeneration prompts for credentials instead of reading the environment
FIXED_SECRETS = (
    'import hashlib\n'
    'import random\n'
    'password = getpass.getpass("PASSWORD: ")\n'
    'api_key = getpass.getpass("API_KEY: ")\n'
    'token = secrets.token_hex(16)\n'
    'digest = hashlib.sha256(password.encode()).hexdigest()\n'
)


class FailingClient(BaseLlmClient):
    name = 'failing'

    def complete(self, messages):
        raise HttpError("endpoint unavailable", status=503)


def query_and_analysis_counts(ledger):
    return [(t.llm_queries, t.analyses) for t in ledger.traces]


class LoopTestCase(SimpleTestCase):
    """Shared fixtures for loop runs"""

    def setUp(self):
        """Set up a scripted client, the builtin analyzer and a small untrained model"""
        cache.clear()
        self.client = ScriptedLlmClient()
        self.analyzer = Analyzer(AnalyzerConfig())
        self.model = GganModel(hidden_dim=16, seed=3)
        self.source = unit(HARDCODED_SECRETS, id='secrets')


class LoopConfigTest(SimpleTestCase):
    """Test loop configuration"""

    def test_defaults_from_settings(self):
        """Test the configured iteration budget and epsilon"""
        cfg = LoopConfig.from_settings()
        self.assertEqual(cfg.max_iterations, 20)
        self.assertEqual(cfg.epsilon, 0)
        self.assertEqual(cfg.graph_kind, 'CFG')

    def test_invalid_values(self):
        """Test that out-of-range values are rejected"""
        for bad in ({'epsilon': -1}, {'max_iterations': 0}, {'mode': 'random-search'}, {'graph_kind': 'pdg'}):
            with self.assertRaises(LoopError):
                LoopConfig(**bad)


class PromsecRunTest(LoopTestCase):
    """Test the full optimization loop"""

    def test_code_input_is_secured(self):
        """Test that the fixed code comes back from the LLM and reaches zero findings"""
        ledger = run_promsec(self.source, self.model, self.client, self.analyzer, LoopConfig(max_iterations=5))
        self.assertEqual(ledger.status, SECURED)
        self.assertEqual([t.k for t in ledger.traces], [4, 0])
        self.assertEqual(ledger.best_unit().text, FIXED_SECRETS)
        self.assertEqual(ledger.input_kind, 'code')

    def test_cost_structure(self):
        """Test two LLM queries and one analysis per non-terminal iteration"""
        ledger = run_promsec(self.source, self.model, self.client, self.analyzer, LoopConfig(max_iterations=5))
        self.assertEqual(query_and_analysis_counts(ledger), [(2, 1), (0, 1)])
        self.assertEqual(ledger.setup.llm_queries, 0)
        self.assertEqual(ledger.traces[1].prompt.role, INFERRED)
        self.assertEqual(cost_summary(ledger).llm_queries, 2)

    def test_distance_columns(self):
        """Test that the first version is the reference for similarity and edit distance"""
        ledger = run_promsec(self.source, self.model, self.client, self.analyzer, LoopConfig(max_iterations=5))
        first, second = ledger.traces
        self.assertAlmostEqual(first.similarity, 1.0, places=6)
        self.assertEqual(first.ged, 0.0)
        self.assertGreater(second.ged, 0.0)

    def test_prompt_input_charges_setup(self):
        """Test that generating the first code from a prompt is charged to setup"""
        prompt = PromptRecord('Write a function that hashes a password')
        ledger = run_promsec(prompt, self.model, self.client, self.analyzer, LoopConfig(max_iterations=5))
        self.assertEqual(ledger.input_kind, 'prompt')
        self.assertEqual(ledger.setup.llm_queries, 1)
        self.assertEqual(ledger.traces[0].prompt, prompt)
        self.assertEqual([t.k for t in ledger.traces], [1, 0])
        self.assertIn('hashlib.sha256(pwd.encode())', ledger.best_unit().text)

    def test_last_iteration_is_terminal(self):
        """Test that the final iteration only analyzes"""
        ledger = run_promsec(self.source, self.model, self.client, self.analyzer, LoopConfig(max_iterations=1))
        self.assertEqual(query_and_analysis_counts(ledger), [(0, 1)])
        self.assertEqual(ledger.status, BUDGET_EXHAUSTED)

    def test_needs_matching_model(self):
        """Test that the loop refuses a missing model or a graph kind mismatch"""
        with self.assertRaises(LoopError):
            run_promsec(self.source, None, self.client, self.analyzer, LoopConfig())
        with self.assertRaises(LoopError):
            run_promsec(self.source, self.model, self.client, self.analyzer, LoopConfig(graph_kind='ast'))

    def test_initial_generation_failure(self):
        """Test that a prompt whose code cannot be generated ends the run in error"""
        ledger = run_promsec(PromptRecord('anything'), self.model, FailingClient(LlmConfig()), self.analyzer,
                             LoopConfig())
        self.assertEqual(ledger.status, ERROR)
        self.assertEqual(ledger.traces, [])
        self.assertEqual(ledger.setup.llm_queries, 3)


class BaselineRunTest(LoopTestCase):
    """Test the templated-context baselines"""

    def test_bl1_single_cycle(self):
        """Test seven templated generations, one query and one analysis each"""
        ledger = run_bl1(self.source, self.client, self.analyzer, LoopConfig(), model=self.model)
        self.assertEqual(ledger.mode, BL1)
        self.assertEqual([t.template for t in ledger.traces], [1, 2, 3, 4, 5, 6, 7])
        self.assertEqual(query_and_analysis_counts(ledger), [(1, 1)] * 7)
        self.assertEqual(ledger.setup.analyses, 1)
        self.assertEqual(ledger.status, BUDGET_EXHAUSTED)
        self.assertEqual(ledger.best_k(), 4)

    def test_bl2_repeats_cycles(self):
        """Test that cycles repeat until the budget when nothing improves"""
        ledger = run_bl2(self.source, self.client, self.analyzer, LoopConfig(max_iterations=2), model=self.model)
        self.assertEqual(len(ledger.traces), 14)
        self.assertEqual([t.cycle for t in ledger.traces], [1] * 7 + [2] * 7)
        self.assertEqual([t.iteration for t in ledger.traces], list(range(1, 15)))

    def test_run_mode_dispatch(self):
        """Test that run_mode follows the configured mode"""
        ledger = run_mode(self.source, LoopConfig(mode=BL1), client=self.client, analyzer=self.analyzer,
                          model=self.model)
        self.assertEqual(ledger.mode, BL1)


class AblationRunTest(LoopTestCase):
    """Test the loop without the gGAN and without the LLM"""

    def test_without_ggan(self):
        """Test that regenerating from an inferred prompt alone does not fix the code"""
        ledger = run_ablation(self.source, A1, self.model, self.client, self.analyzer, LoopConfig(max_iterations=3))
        self.assertEqual(ledger.mode, A1)
        self.assertEqual([t.k for t in ledger.traces], [4, 4, 4])
        self.assertEqual(query_and_analysis_counts(ledger), [(2, 1), (2, 1), (0, 1)])
        self.assertEqual(ledger.status, BUDGET_EXHAUSTED)

    def test_without_llm(self):
        """Test that the reconstructed code is used directly"""
        ledger = run_ablation(self.source, A2, self.model, self.client, self.analyzer, LoopConfig(max_iterations=3))
        self.assertEqual([t.k for t in ledger.traces], [4, 0])
        self.assertEqual(query_and_analysis_counts(ledger), [(0, 1), (0, 1)])
        self.assertEqual(ledger.status, SECURED)
        self.assertEqual(ledger.best_unit().text, RECONSTRUCTED_SECRETS)

    def test_regeneration_keeps_code_closer_to_original(self):
        """Test that the final code without the LLM stage is less similar to the original"""
        cfg = LoopConfig(max_iterations=3)
        promsec = run_promsec(self.source, self.model, self.client, self.analyzer, cfg)
        without_llm = run_ablation(self.source, A2, self.model, self.client, self.analyzer, cfg)
        self.assertEqual((promsec.best_k(), without_llm.best_k()), (0, 0))
        self.assertLess(without_llm.best_trace().similarity, promsec.best_trace().similarity)

    def test_without_llm_needs_model(self):
        """Test that the a2 ablation requires a model"""
        with self.assertRaises(LoopError):
            run_ablation(self.source, A2, None, self.client, self.analyzer, LoopConfig())
        with self.assertRaises(LoopError):
            run_ablation(self.source, PROMSEC, self.model, self.client, self.analyzer, LoopConfig())

    def test_consecutive_failures_stop_the_run(self):
        """Test that three failed iterations in a row end the run in error"""
        ledger = run_ablation(self.source, A1, self.model, FailingClient(LlmConfig()), self.analyzer,
                              LoopConfig(max_iterations=5))
        self.assertEqual(ledger.status, ERROR)
        self.assertEqual(len(ledger.traces), 3)
        self.assertTrue(all(t.error.startswith('HttpError') for t in ledger.traces))
        self.assertEqual(ledger.best_k(), 4)


class LedgerTest(LoopTestCase):
    """Test best-trace selection and ledger persistence"""

    def test_best_iteration(self):
        """Test minimal k, then higher similarity, then earlier iteration"""
        traces = [
            IterationTrace(1, k=3, similarity=1.0),
            IterationTrace(2, k=1, similarity=0.5),
            IterationTrace(3, k=1, similarity=0.9),
            IterationTrace(4, k=1, similarity=0.9),
            IterationTrace(5),
        ]
        self.assertEqual(best_iteration(traces), 2)
        self.assertIsNone(best_iteration([IterationTrace(1)]))

    def test_save_and_load(self):
        """Test that a saved ledger reloads with its traces and artifacts"""
        ledger = run_promsec(self.source, self.model, self.client, self.analyzer, LoopConfig(max_iterations=5))
        with tempfile.TemporaryDirectory() as tmp:
            run_dir = ledger.save(tmp)
            self.assertTrue(os.path.exists(os.path.join(run_dir, 'artifacts', '2.src')))
            loaded = RunLedger.load(run_dir)
        self.assertEqual(loaded.status, SECURED)
        self.assertEqual(loaded.best_index, 1)
        self.assertEqual(loaded.setup, ledger.setup)
        self.assertEqual([t.k for t in loaded.traces], [4, 0])
        self.assertEqual(loaded.best_unit().text, FIXED_SECRETS)
        self.assertEqual(loaded.traces[1].findings, ())

    def test_mask_cwe(self):
        """Test that masking drops every unit reporting the CWE"""
        units = [unit(HARDCODED_SECRETS, id='a'), unit(VULNERABLE_LOOKUP, id='b')]
        self.assertEqual([u.id for u in mask_cwe(units, 89, self.analyzer)], ['a'])
        with self.assertRaises(EmptyTrainingSet):
            mask_cwe(units, [259, 89], self.analyzer)
        with self.assertRaises(LoopError):
            mask_cwe(units, 400, self.analyzer)


def secured_fraction(ledgers):
    return sum(ledger.secured for ledger in ledgers) / len(ledgers)


def mean_final_similarity(ledgers):
    return sum(ledger.best_trace().similarity for ledger in ledgers) / len(ledgers)


class SeededCorpusRunTest(SimpleTestCase):
    """Test the hermetic pipeline on the 20-program seeded subset with the desk-scale model"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.model, _ = desk_scale_training()
        cls.programs = generate_corpus(CorpusSpec(count=20, seed=7))
        cls.llm_client = ScriptedLlmClient()
        cls.analyzer = Analyzer(AnalyzerConfig())
        cls.runs = {}

    def ledgers(self, mode, programs=None, **overrides):
        key = (mode, programs is None, tuple(sorted(overrides.items())))
        if key not in self.runs:
            cfg = LoopConfig(mode=mode, **overrides)
            self.runs[key] = [run_mode(p.unit, cfg, client=self.llm_client, analyzer=self.analyzer, model=self.model)
                              for p in programs or self.programs]
        return self.runs[key]

    def test_promsec_secures_the_subset(self):
        """Test that at least 90% of programs are secured with mean similarity of at least 0.8"""
        ledgers = self.ledgers(PROMSEC)
        self.assertGreaterEqual(secured_fraction(ledgers), 0.9)
        self.assertGreaterEqual(mean_final_similarity(ledgers), 0.8)
        self.assertTrue(all(len(ledger.traces) <= 20 for ledger in ledgers))

    def test_promsec_secures_at_least_as_many_as_bl1(self):
        """Test that the loop secures no fewer programs than one templated-context cycle"""
        self.assertGreaterEqual(secured_fraction(self.ledgers(PROMSEC)), secured_fraction(self.ledgers(BL1)))

    def test_bl2_best_k_never_rises(self):
        """Test that the best CWE count so far never increases across cycles"""
        for ledger in self.ledgers(BL2, self.programs[:4], max_iterations=3):
            best = [t.best_k for t in ledger.traces]
            self.assertEqual(best, sorted(best, reverse=True), ledger.run_id)

    def test_without_llm_similarity_is_lower(self):
        """Test that dropping the LLM stage lowers the mean final similarity"""
        self.assertLess(mean_final_similarity(self.ledgers(A2)), mean_final_similarity(self.ledgers(PROMSEC)))


class MaskedCweRunTest(SimpleTestCase):
    """Test a model trained without command-injection examples on command-injection programs"""

    def test_masked_model_halves_findings(self):
        """Test that mean k on CWE-78 programs drops by at least half"""
        model, _ = desk_scale_training(masked_cwe=78)
        client, analyzer = ScriptedLlmClient(), Analyzer(AnalyzerConfig())
        programs = generate_corpus(CorpusSpec(count=10, mix={78: 1.0}, seed=11))
        ledgers = [run_promsec(p.unit, model, client, analyzer, LoopConfig()) for p in programs]
        before = sum(ledger.traces[0].k for ledger in ledgers) / len(ledgers)
        after = sum(ledger.best_k() for ledger in ledgers) / len(ledgers)
        self.assertGreater(before, 0)
        self.assertLessEqual(after, 0.5 * before)
